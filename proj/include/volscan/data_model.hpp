// Copyright 2026 The volscan Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Core domain types and their on-disk representation.
//
// VOLZ layout (all integers little-endian):
//   bytes 0..5   magic "VOLZ1\n"
//   bytes 6..9   uint32 header length L
//   next L bytes JSON object {"dims":[S,H,W],"spacing_mm":..,"thickness_mm":..,"kind":..}
//   remainder    S*H*W float32 values, slice-major (slice, row, col)
//
// Manifest: one JSON object per line,
//   {"path":..,"age":..,"weight":..,"sex":"female"|"male","split":"train"|"test","mask_path":..}
// Blank lines and lines starting with '#' are skipped.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "volscan/error.hpp"

namespace volscan {

namespace fs = std::filesystem;

struct Dims {
  std::size_t slices = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t count() const noexcept { return slices * rows * cols; }
  std::size_t plane() const noexcept { return rows * cols; }
  friend bool operator==(const Dims&, const Dims&) = default;
};

inline std::string to_string(const Dims& d) {
  return "[" + std::to_string(d.slices) + "," + std::to_string(d.rows) + "," +
         std::to_string(d.cols) + "]";
}

/// Dense 3D array indexed (slice, row, col), slice-major.
template <class T>
class Grid3 {
 public:
  Grid3() = default;
  explicit Grid3(Dims dims, T fill = T{}) : dims_(dims), data_(dims.count(), fill) {}
  Grid3(Dims dims, std::vector<T> data) : dims_(dims), data_(std::move(data)) {
    if (data_.size() != dims_.count()) {
      throw ShapeError("grid data size " + std::to_string(data_.size()) +
                       " does not match dims " + to_string(dims_));
    }
  }

  const Dims& dims() const noexcept { return dims_; }
  std::size_t size() const noexcept { return data_.size(); }

  T& operator()(std::size_t s, std::size_t r, std::size_t c) noexcept {
    return data_[(s * dims_.rows + r) * dims_.cols + c];
  }
  const T& operator()(std::size_t s, std::size_t r, std::size_t c) const noexcept {
    return data_[(s * dims_.rows + r) * dims_.cols + c];
  }

  std::span<T> slice(std::size_t s) noexcept {
    return {data_.data() + s * dims_.plane(), dims_.plane()};
  }
  std::span<const T> slice(std::size_t s) const noexcept {
    return {data_.data() + s * dims_.plane(), dims_.plane()};
  }

  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  friend bool operator==(const Grid3&, const Grid3&) = default;

 private:
  Dims dims_{};
  std::vector<T> data_;
};

/// Physical slice geometry shared by volumes and masks.
struct SliceGeometry {
  double spacing_mm = 1.0;    // distance between slice centers
  double thickness_mm = 1.0;  // slice thickness
  friend bool operator==(const SliceGeometry&, const SliceGeometry&) = default;
};

struct Volume {
  Grid3<float> data;
  SliceGeometry geometry;

  const Dims& dims() const noexcept { return data.dims(); }
  friend bool operator==(const Volume&, const Volume&) = default;
};

enum class MaskKind { continuous, binary };

struct MaskVolume {
  Grid3<float> data;
  MaskKind kind = MaskKind::continuous;
  SliceGeometry geometry;

  const Dims& dims() const noexcept { return data.dims(); }
  friend bool operator==(const MaskVolume&, const MaskVolume&) = default;
};

enum class Sex { female, male };

inline std::string_view to_string(Sex s) { return s == Sex::female ? "female" : "male"; }

struct PatientMeta {
  double age = 10.0;     // years
  double weight = 30.0;  // kilograms
  Sex sex = Sex::female;
  friend bool operator==(const PatientMeta&, const PatientMeta&) = default;
};

inline void validate(const PatientMeta& m) {
  if (!std::isfinite(m.age) || m.age < 0.0 || m.age > 25.0) {
    throw ValidationError("patient age " + std::to_string(m.age) + " outside [0, 25]");
  }
  if (!std::isfinite(m.weight) || m.weight <= 0.0) {
    throw ValidationError("patient weight " + std::to_string(m.weight) + " must be positive");
  }
}

inline void validate(const SliceGeometry& g) {
  if (!std::isfinite(g.spacing_mm) || g.spacing_mm <= 0.0) {
    throw ValidationError("spacing_mm must be positive and finite");
  }
  if (!std::isfinite(g.thickness_mm) || g.thickness_mm <= 0.0) {
    throw ValidationError("thickness_mm must be positive and finite");
  }
}

namespace detail {

inline void validate_dims(const Dims& d) {
  if (d.slices < 1 || d.rows < 1 || d.cols < 1) {
    throw ValidationError("every dimension must be >= 1, got " + to_string(d));
  }
}

}  // namespace detail

inline void validate(const Volume& v) {
  detail::validate_dims(v.dims());
  validate(v.geometry);
  for (float x : v.data.values()) {
    if (!std::isfinite(x) || x < 0.0f || x > 1.0f) {
      throw ValidationError("volume value " + std::to_string(x) + " outside [0, 1]");
    }
  }
}

inline void validate(const MaskVolume& m) {
  detail::validate_dims(m.dims());
  validate(m.geometry);
  for (float x : m.data.values()) {
    if (m.kind == MaskKind::binary) {
      if (x != 0.0f && x != 1.0f) {
        throw ValidationError("binary mask value " + std::to_string(x) + " not in {0,1}");
      }
    } else if (!std::isfinite(x) || x < 0.0f) {
      throw ValidationError("continuous mask value " + std::to_string(x) +
                            " must be finite and >= 0");
    }
  }
}

enum class VolzKind { image, continuous_mask, binary_mask };

inline std::string_view to_string(VolzKind k) {
  switch (k) {
    case VolzKind::image: return "image";
    case VolzKind::continuous_mask: return "continuous_mask";
    case VolzKind::binary_mask: return "binary_mask";
  }
  return "image";
}

/// Raw content of a VOLZ file before kind-specific validation.
struct VolzRecord {
  Grid3<float> data;
  SliceGeometry geometry;
  VolzKind kind = VolzKind::image;
};

inline constexpr std::string_view kVolzMagic = "VOLZ1\n";
inline constexpr std::uint32_t kMaxVolzHeader = 1u << 16;

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint32_t float_bits_le(float f) {
  std::uint32_t u = std::bit_cast<std::uint32_t>(f);
  return u;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PersistenceError("cannot open file", path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw PersistenceError("read failed", path.string());
  return std::move(ss).str();
}

inline void write_file(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path() && !fs::is_directory(path.parent_path())) {
    throw PersistenceError("parent directory does not exist", path.string());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PersistenceError("cannot open file for writing", path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw PersistenceError("write failed", path.string());
}

}  // namespace detail

inline std::string encode_volz(const VolzRecord& rec) {
  nlohmann::ordered_json header;
  const Dims& d = rec.data.dims();
  header["dims"] = {d.slices, d.rows, d.cols};
  header["spacing_mm"] = rec.geometry.spacing_mm;
  header["thickness_mm"] = rec.geometry.thickness_mm;
  header["kind"] = std::string(to_string(rec.kind));
  const std::string text = header.dump();

  std::string out;
  out.reserve(kVolzMagic.size() + 4 + text.size() + 4 * rec.data.size());
  out.append(kVolzMagic);
  detail::put_u32_le(out, static_cast<std::uint32_t>(text.size()));
  out.append(text);
  for (float v : rec.data.values()) detail::put_u32_le(out, detail::float_bits_le(v));
  return out;
}

/// Parses VOLZ bytes. Structural problems raise FormatError; geometry
/// problems raise ValidationError. Voxel values are not checked here.
inline VolzRecord decode_volz(std::string_view bytes) {
  if (bytes.size() < kVolzMagic.size() + 4 || bytes.substr(0, kVolzMagic.size()) != kVolzMagic) {
    throw FormatError("VOLZ: bad magic");
  }
  const auto* base = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t hlen = detail::get_u32_le(base + kVolzMagic.size());
  const std::size_t hstart = kVolzMagic.size() + 4;
  if (hlen > kMaxVolzHeader || hstart + hlen > bytes.size()) {
    throw FormatError("VOLZ: header length " + std::to_string(hlen) + " exceeds file size");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(hstart, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("VOLZ: header is not valid JSON: ") + e.what());
  }
  if (!header.is_object()) throw FormatError("VOLZ: header must be an object");

  auto field = [&](const char* name) -> const nlohmann::json& {
    auto it = header.find(name);
    if (it == header.end()) throw FormatError(std::string("VOLZ: missing header field '") + name + "'");
    return *it;
  };

  const auto& jd = field("dims");
  if (!jd.is_array() || jd.size() != 3) throw FormatError("VOLZ: field 'dims' must be [S,H,W]");
  std::array<std::size_t, 3> dv{};
  for (std::size_t i = 0; i < 3; ++i) {
    if (!jd[i].is_number_unsigned()) throw FormatError("VOLZ: field 'dims' must hold non-negative integers");
    dv[i] = jd[i].get<std::size_t>();
  }
  Dims dims{dv[0], dv[1], dv[2]};
  detail::validate_dims(dims);

  auto number = [&](const char* name) {
    const auto& j = field(name);
    if (!j.is_number()) throw FormatError(std::string("VOLZ: field '") + name + "' must be a number");
    return j.get<double>();
  };
  VolzRecord rec;
  rec.geometry.spacing_mm = number("spacing_mm");
  rec.geometry.thickness_mm = number("thickness_mm");
  validate(rec.geometry);

  const auto& jk = field("kind");
  if (!jk.is_string()) throw FormatError("VOLZ: field 'kind' must be a string");
  const std::string kind = jk.get<std::string>();
  if (kind == "image") rec.kind = VolzKind::image;
  else if (kind == "continuous_mask") rec.kind = VolzKind::continuous_mask;
  else if (kind == "binary_mask") rec.kind = VolzKind::binary_mask;
  else throw FormatError("VOLZ: field 'kind' has unknown value '" + kind + "'");

  const std::size_t limit = std::numeric_limits<std::size_t>::max() / 4;
  if (dims.slices > limit / dims.rows || dims.slices * dims.rows > limit / dims.cols) {
    throw FormatError("VOLZ: field 'dims' overflows");
  }
  const std::size_t expected = dims.count() * 4;
  const std::size_t actual = bytes.size() - hstart - hlen;
  if (actual != expected) {
    throw FormatError("VOLZ: payload length expected " + std::to_string(expected) + " bytes, got " +
                      std::to_string(actual));
  }
  std::vector<float> values(dims.count());
  const unsigned char* p = base + hstart + hlen;
  for (std::size_t i = 0; i < values.size(); ++i, p += 4) {
    values[i] = std::bit_cast<float>(detail::get_u32_le(p));
  }
  rec.data = Grid3<float>(dims, std::move(values));
  return rec;
}

inline void save_volume(const Volume& v, const fs::path& path) {
  validate(v);
  detail::write_file(path, encode_volz({v.data, v.geometry, VolzKind::image}));
}

inline Volume load_volume(const fs::path& path) {
  if (!fs::exists(path)) throw PersistenceError("missing file", path.string());
  VolzRecord rec = decode_volz(detail::read_file(path));
  if (rec.kind != VolzKind::image) {
    throw FormatError("VOLZ: expected kind 'image' in " + path.string());
  }
  Volume v{std::move(rec.data), rec.geometry};
  validate(v);
  return v;
}

inline void save_mask(const MaskVolume& m, const fs::path& path) {
  validate(m);
  const VolzKind kind = m.kind == MaskKind::binary ? VolzKind::binary_mask : VolzKind::continuous_mask;
  detail::write_file(path, encode_volz({m.data, m.geometry, kind}));
}

inline MaskVolume load_mask(const fs::path& path) {
  if (!fs::exists(path)) throw PersistenceError("missing file", path.string());
  VolzRecord rec = decode_volz(detail::read_file(path));
  if (rec.kind == VolzKind::image) {
    throw FormatError("VOLZ: expected a mask kind in " + path.string());
  }
  MaskVolume m{std::move(rec.data),
               rec.kind == VolzKind::binary_mask ? MaskKind::binary : MaskKind::continuous,
               rec.geometry};
  validate(m);
  return m;
}

// ---------------------------------------------------------------------------
// Manifest

enum class Split { train, test };

struct ManifestEntry {
  fs::path path;
  PatientMeta meta;
  std::optional<fs::path> mask_path;
  Split split = Split::train;
  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> of_split(Split s) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries) {
      if (e.split == s) out.push_back(e);
    }
    return out;
  }
};

namespace detail {

inline std::string line_prefix(std::size_t line) { return "manifest line " + std::to_string(line) + ": "; }

}  // namespace detail

/// Parses manifest text; relative paths resolve against `base_dir`.
/// File existence is not checked here, see load_manifest.
inline DatasetManifest parse_manifest(std::string_view text, const fs::path& base_dir) {
  DatasetManifest manifest;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.remove_suffix(1);
    while (!line.empty() && (line.front() == ' ' || line.front() == '\t')) line.remove_prefix(1);
    if (line.empty() || line.front() == '#') {
      if (end == text.size()) break;
      continue;
    }
    const std::string where = detail::line_prefix(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + "invalid record: " + e.what());
    }
    if (!j.is_object()) throw FormatError(where + "record must be an object");
    auto str = [&](const char* key) {
      auto it = j.find(key);
      if (it == j.end() || !it->is_string()) throw FormatError(where + "field '" + key + "' must be a string");
      return it->get<std::string>();
    };
    auto num = [&](const char* key) {
      auto it = j.find(key);
      if (it == j.end() || !it->is_number()) throw FormatError(where + "field '" + key + "' must be a number");
      return it->get<double>();
    };

    ManifestEntry e;
    e.path = base_dir / fs::path(str("path"));
    e.meta.age = num("age");
    e.meta.weight = num("weight");
    const std::string sex = str("sex");
    if (sex == "female") e.meta.sex = Sex::female;
    else if (sex == "male") e.meta.sex = Sex::male;
    else throw FormatError(where + "unknown sex token '" + sex + "'");
    const std::string split = str("split");
    if (split == "train") e.split = Split::train;
    else if (split == "test") e.split = Split::test;
    else throw FormatError(where + "unknown split token '" + split + "'");
    if (auto it = j.find("mask_path"); it != j.end() && !it->is_null()) {
      if (!it->is_string()) throw FormatError(where + "field 'mask_path' must be a string");
      e.mask_path = base_dir / fs::path(it->get<std::string>());
    }
    try {
      validate(e.meta);
    } catch (const ValidationError& err) {
      throw ValidationError(where + err.what());
    }
    if (e.split == Split::train && e.mask_path) {
      throw ValidationError(where + "train entry must not carry a mask_path");
    }
    if (e.split == Split::test && !e.mask_path) {
      throw ValidationError(where + "test entry requires a mask_path");
    }
    manifest.entries.push_back(std::move(e));
    if (end == text.size()) break;
  }
  if (manifest.entries.empty()) throw ValidationError("empty manifest");
  return manifest;
}

inline DatasetManifest load_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw PersistenceError("missing file", path.string());
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  DatasetManifest m = parse_manifest(detail::read_file(path), base);
  for (const auto& e : m.entries) {
    if (!fs::exists(e.path)) throw PersistenceError("manifest references missing volume", e.path.string());
    if (e.mask_path && !fs::exists(*e.mask_path)) {
      throw PersistenceError("manifest references missing mask", e.mask_path->string());
    }
  }
  return m;
}

/// Writes entries with paths relative to the manifest's directory.
inline void save_manifest(const DatasetManifest& m, const fs::path& path) {
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  std::string out;
  for (const auto& e : m.entries) {
    nlohmann::ordered_json j;
    j["path"] = e.path.lexically_proximate(base).generic_string();
    j["age"] = e.meta.age;
    j["weight"] = e.meta.weight;
    j["sex"] = std::string(to_string(e.meta.sex));
    j["split"] = e.split == Split::train ? "train" : "test";
    if (e.mask_path) j["mask_path"] = e.mask_path->lexically_proximate(base).generic_string();
    out += j.dump();
    out += '\n';
  }
  detail::write_file(path, out);
}

}  // namespace volscan
