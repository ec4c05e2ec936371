#pragma once

// On-disk dataset bundle:
//
//   <dir>/meta.json    n, channels, height, width, num_classes, target_label,
//                      gamma, attack_name, seed
//   <dir>/images.u8    raw N x C x H x W bytes, byte v decodes to v / 255
//   <dir>/labels.csv   "index,label,is_backdoor", one row per sample
//
// Masks use the same byte encoding (mask.u8 + mask_meta.json).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bsift/datamodel.hpp"
#include "bsift/error.hpp"

namespace bsift {

namespace fs = std::filesystem;

inline std::uint8_t encode_pixel(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline float decode_pixel(std::uint8_t b) { return static_cast<float>(b) / 255.0f; }

inline void write_u8(const fs::path& path, std::span<const float> values) {
  std::vector<std::uint8_t> bytes(values.size());
  std::transform(values.begin(), values.end(), bytes.begin(), encode_pixel);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline FloatBuffer read_u8(const fs::path& path, std::size_t expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != expected) {
    throw FormatError(path.filename().string(), "expected " + std::to_string(expected) +
                                                    " bytes, found " + std::to_string(bytes.size()));
  }
  FloatBuffer out(bytes.size());
  for (std::size_t k = 0; k < bytes.size(); ++k) {
    out[k] = decode_pixel(static_cast<std::uint8_t>(bytes[k]));
  }
  return out;
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.filename().string(), e.what());
  }
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

namespace detail {

template <typename T>
T meta_field(const nlohmann::json& meta, const std::string& file, const char* key) {
  if (!meta.contains(key)) throw FormatError(file + ":" + key, "missing");
  try {
    return meta.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError(file + ":" + key, "wrong type");
  }
}

}  // namespace detail

inline void save_dataset(const PoisonedDataset& d, const fs::path& dir) {
  fs::create_directories(dir);
  const ImageShape& s = d.batch.shape();
  nlohmann::json meta = {
      {"n", d.size()},
      {"channels", s.channels},
      {"height", s.height},
      {"width", s.width},
      {"num_classes", d.num_classes},
      {"target_label", d.target_label},
      {"gamma", d.gamma},
      {"attack_name", d.attack_name},
      {"seed", d.seed},
  };
  write_json(dir / "meta.json", meta);
  write_u8(dir / "images.u8", d.batch.images.data);

  std::ofstream labels(dir / "labels.csv");
  if (!labels) throw IoError("cannot open labels.csv for writing");
  labels << "index,label,is_backdoor\n";
  for (std::size_t i = 0; i < d.size(); ++i) {
    labels << i << ',' << d.batch.labels[i] << ',' << (d.is_backdoor[i] ? 1 : 0) << '\n';
  }
}

inline PoisonedDataset load_dataset(const fs::path& dir) {
  const nlohmann::json meta = read_json(dir / "meta.json");
  PoisonedDataset d;
  const auto n = detail::meta_field<std::size_t>(meta, "meta.json", "n");
  ImageShape shape{detail::meta_field<std::size_t>(meta, "meta.json", "channels"),
                   detail::meta_field<std::size_t>(meta, "meta.json", "height"),
                   detail::meta_field<std::size_t>(meta, "meta.json", "width")};
  d.num_classes = detail::meta_field<int>(meta, "meta.json", "num_classes");
  d.target_label = detail::meta_field<int>(meta, "meta.json", "target_label");
  d.gamma = detail::meta_field<double>(meta, "meta.json", "gamma");
  d.attack_name = detail::meta_field<std::string>(meta, "meta.json", "attack_name");
  d.seed = detail::meta_field<std::uint64_t>(meta, "meta.json", "seed");

  d.batch.images.n = n;
  d.batch.images.shape = shape;
  d.batch.images.data = read_u8(dir / "images.u8", n * shape.size());

  std::ifstream labels(dir / "labels.csv");
  if (!labels) throw IoError("cannot open " + (dir / "labels.csv").string());
  std::string line;
  if (!std::getline(labels, line) || line != "index,label,is_backdoor") {
    throw FormatError("labels.csv", "missing header \"index,label,is_backdoor\"");
  }
  d.batch.labels.reserve(n);
  d.is_backdoor.reserve(n);
  std::size_t row = 0;
  while (std::getline(labels, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string f_index, f_label, f_flag;
    if (!std::getline(ss, f_index, ',') || !std::getline(ss, f_label, ',') ||
        !std::getline(ss, f_flag)) {
      throw FormatError("labels.csv", "row " + std::to_string(row) + " has fewer than 3 fields");
    }
    try {
      if (std::stoul(f_index) != row) {
        throw FormatError("labels.csv", "row " + std::to_string(row) + " has index " + f_index);
      }
      d.batch.labels.push_back(std::stoi(f_label));
    } catch (const std::logic_error&) {
      throw FormatError("labels.csv", "row " + std::to_string(row) + " is not numeric");
    }
    if (f_flag != "0" && f_flag != "1") {
      throw FormatError("labels.csv", "row " + std::to_string(row) + " is_backdoor must be 0 or 1");
    }
    d.is_backdoor.push_back(f_flag == "1");
    ++row;
  }
  if (row != n) {
    throw FormatError("labels.csv", "meta.json declares n=" + std::to_string(n) + " but found " +
                                        std::to_string(row) + " rows");
  }
  try {
    validate(d);
  } catch (const InvalidArgument& e) {
    throw FormatError(dir.filename().string(), e.what());
  }
  return d;
}

inline void save_mask(const Mask& m, const fs::path& dir) {
  fs::create_directories(dir);
  write_u8(dir / "mask.u8", m.values());
  write_json(dir / "mask_meta.json", {{"channels", m.shape().channels},
                                      {"height", m.shape().height},
                                      {"width", m.shape().width}});
}

inline Mask load_mask(const fs::path& dir) {
  const auto meta = read_json(dir / "mask_meta.json");
  ImageShape shape{detail::meta_field<std::size_t>(meta, "mask_meta.json", "channels"),
                   detail::meta_field<std::size_t>(meta, "mask_meta.json", "height"),
                   detail::meta_field<std::size_t>(meta, "mask_meta.json", "width")};
  Image img(shape);
  img.data = read_u8(dir / "mask.u8", shape.size());
  return Mask(std::move(img));
}

}  // namespace bsift
