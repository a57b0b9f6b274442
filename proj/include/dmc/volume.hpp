#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dmc/errors.hpp"
#include "dmc/shape.hpp"

// Volume files are a JSON header plus a sibling raw blob. The header names
// the blob, the shape, the per-axis spacing in mm and the element type; the
// blob is packed little-endian regardless of host byte order. For 3D data
// the through-plane axis is stored last.
//
//   { "shape": [64, 64, 64], "spacing_mm": [1.0, 1.0, 1.0], "dtype": "f32",
//     "order": "row-major", "axis_names": ["y", "x", "z"],
//     "data_file": "case000_image.raw" }

namespace dmc {

struct VolumeData {
  Shape shape;                    // spatial extents only
  std::vector<double> spacing;    // mm per axis
  std::string dtype;              // "f32" | "u8"
  std::vector<float> f32;
  std::vector<std::uint8_t> u8;

  std::int64_t voxels() const { return numel(shape); }
};

// One training/evaluation case: image plus optional integer labels.
struct VolumeSample {
  std::string id;
  Shape shape;
  std::vector<double> spacing;
  std::vector<float> image;
  std::vector<std::uint8_t> label;  // empty when the case has no labels

  std::int64_t voxels() const { return numel(shape); }
  bool has_label() const { return !label.empty(); }
};

namespace detail {

inline void append_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t read_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_all(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return bytes;
}

inline std::vector<std::string> default_axis_names(std::size_t rank) {
  if (rank == 2) return {"y", "x"};
  if (rank == 3) return {"y", "x", "z"};
  std::vector<std::string> names;
  for (std::size_t i = 0; i < rank; ++i) names.push_back("a" + std::to_string(i));
  return names;
}

}  // namespace detail

inline void write_volume_file(const VolumeData& v, const std::filesystem::path& header_path) {
  namespace fs = std::filesystem;
  if (v.dtype != "f32" && v.dtype != "u8") {
    throw IoError("write_volume_file: unknown dtype '" + v.dtype + "'");
  }
  if (v.spacing.size() != v.shape.size()) {
    throw DataError("write_volume_file: spacing rank does not match shape");
  }
  for (double s : v.spacing) {
    if (!(s > 0.0)) throw DataError("write_volume_file: spacing must be positive");
  }
  const std::int64_t n = v.voxels();
  std::string blob;
  if (v.dtype == "f32") {
    if (static_cast<std::int64_t>(v.f32.size()) != n) {
      throw DataError("write_volume_file: f32 payload has " + std::to_string(v.f32.size()) +
                      " values, shape needs " + std::to_string(n));
    }
    blob.reserve(static_cast<std::size_t>(n) * 4);
    for (float x : v.f32) {
      std::uint32_t u;
      std::memcpy(&u, &x, 4);
      detail::append_u32_le(blob, u);
    }
  } else {
    if (static_cast<std::int64_t>(v.u8.size()) != n) {
      throw DataError("write_volume_file: u8 payload has " + std::to_string(v.u8.size()) +
                      " values, shape needs " + std::to_string(n));
    }
    blob.assign(v.u8.begin(), v.u8.end());
  }
  fs::path raw_path = header_path;
  raw_path.replace_extension(".raw");
  nlohmann::json header{{"shape", v.shape},
                        {"spacing_mm", v.spacing},
                        {"dtype", v.dtype},
                        {"order", "row-major"},
                        {"axis_names", detail::default_axis_names(v.shape.size())},
                        {"data_file", raw_path.filename().string()}};
  detail::atomic_write(raw_path, blob);
  detail::atomic_write(header_path, header.dump(2) + "\n");
}

inline VolumeData read_volume_file(const std::filesystem::path& header_path) {
  namespace fs = std::filesystem;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(detail::read_all(header_path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed volume header " + header_path.string() + ": " + e.what());
  }
  VolumeData v;
  try {
    v.shape = header.at("shape").get<Shape>();
    v.spacing = header.at("spacing_mm").get<std::vector<double>>();
    v.dtype = header.at("dtype").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("volume header " + header_path.string() + " missing fields: " + e.what());
  }
  if (header.value("order", "row-major") != "row-major") {
    throw IoError("volume header " + header_path.string() + ": unsupported order");
  }
  if (v.dtype != "f32" && v.dtype != "u8") {
    throw IoError("volume header " + header_path.string() + ": unknown dtype '" + v.dtype + "'");
  }
  check_positive_extents(v.shape, "volume shape");
  if (v.spacing.size() != v.shape.size()) {
    throw IoError("volume header " + header_path.string() + ": spacing rank mismatch");
  }
  for (double s : v.spacing) {
    if (!(s > 0.0)) {
      throw IoError("volume header " + header_path.string() + ": spacing must be positive");
    }
  }
  const fs::path raw_path =
      header_path.parent_path() / header.at("data_file").get<std::string>();
  if (!fs::exists(raw_path)) {
    throw IoError("volume blob missing: " + raw_path.string());
  }
  const std::string blob = detail::read_all(raw_path);
  const std::int64_t n = v.voxels();
  const std::size_t elem = v.dtype == "f32" ? 4 : 1;
  if (blob.size() != static_cast<std::size_t>(n) * elem) {
    throw IoError("volume blob " + raw_path.string() + ": length mismatch, expected " +
                  std::to_string(static_cast<std::size_t>(n) * elem) + " bytes, got " +
                  std::to_string(blob.size()));
  }
  if (v.dtype == "f32") {
    v.f32.resize(static_cast<std::size_t>(n));
    const auto* p = reinterpret_cast<const unsigned char*>(blob.data());
    for (std::int64_t i = 0; i < n; ++i) {
      const std::uint32_t u = detail::read_u32_le(p + 4 * i);
      float x;
      std::memcpy(&x, &u, 4);
      v.f32[static_cast<std::size_t>(i)] = x;
    }
  } else {
    v.u8.assign(blob.begin(), blob.end());
  }
  return v;
}

inline void write_sample(const VolumeSample& s, const std::filesystem::path& image_header,
                         const std::filesystem::path& label_header) {
  VolumeData img;
  img.shape = s.shape;
  img.spacing = s.spacing;
  img.dtype = "f32";
  img.f32 = s.image;
  write_volume_file(img, image_header);
  if (s.has_label()) {
    VolumeData lab;
    lab.shape = s.shape;
    lab.spacing = s.spacing;
    lab.dtype = "u8";
    lab.u8 = s.label;
    write_volume_file(lab, label_header);
  }
}

inline VolumeSample load_sample(const std::filesystem::path& image_header,
                                const std::filesystem::path& label_header,
                                std::string id = {}) {
  VolumeData img = read_volume_file(image_header);
  if (img.dtype != "f32") {
    throw IoError("image volume " + image_header.string() + " must be f32");
  }
  VolumeSample s;
  s.id = std::move(id);
  s.shape = img.shape;
  s.spacing = img.spacing;
  s.image = std::move(img.f32);
  if (!label_header.empty()) {
    VolumeData lab = read_volume_file(label_header);
    if (lab.dtype != "u8") {
      throw IoError("label volume " + label_header.string() + " must be u8");
    }
    if (lab.shape != s.shape) {
      throw DataError("label shape " + shape_str(lab.shape) + " does not match image " +
                      shape_str(s.shape));
    }
    s.label = std::move(lab.u8);
  }
  return s;
}

// ---- dataset manifest ----

struct ManifestCase {
  std::string id;
  std::string image;  // paths relative to the manifest file
  std::string label;
  int fold = -1;
};

struct DatasetManifest {
  std::int64_t num_classes = 2;
  std::string provenance;
  std::vector<ManifestCase> cases;
  std::filesystem::path base_dir;  // set on load; not serialized

  void save(const std::filesystem::path& path) const {
    nlohmann::json jc = nlohmann::json::array();
    for (const ManifestCase& c : cases) {
      nlohmann::json e{{"id", c.id}, {"image", c.image}, {"label", c.label}};
      if (c.fold >= 0) e["fold"] = c.fold;
      jc.push_back(e);
    }
    nlohmann::json j{{"num_classes", num_classes}, {"provenance", provenance}, {"cases", jc}};
    detail::atomic_write(path, j.dump(2) + "\n");
  }

  static DatasetManifest load(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(detail::read_all(path));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("malformed manifest " + path.string() + ": " + e.what());
    }
    DatasetManifest m;
    try {
      m.num_classes = j.at("num_classes").get<std::int64_t>();
      m.provenance = j.value("provenance", "");
      for (const auto& e : j.at("cases")) {
        ManifestCase c;
        c.id = e.at("id").get<std::string>();
        c.image = e.at("image").get<std::string>();
        c.label = e.value("label", "");
        c.fold = e.value("fold", -1);
        m.cases.push_back(std::move(c));
      }
    } catch (const nlohmann::json::exception& e) {
      throw IoError("manifest " + path.string() + " missing fields: " + e.what());
    }
    m.base_dir = path.parent_path();
    return m;
  }

  VolumeSample load_case(std::size_t i) const {
    const ManifestCase& c = cases.at(i);
    VolumeSample s = load_sample(base_dir / c.image,
                                 c.label.empty() ? std::filesystem::path{} : base_dir / c.label,
                                 c.id);
    for (std::uint8_t v : s.label) {
      if (v >= num_classes) {
        throw DataError("case " + c.id + ": label id " + std::to_string(v) +
                        " >= num_classes " + std::to_string(num_classes));
      }
    }
    return s;
  }
};

}  // namespace dmc
