#pragma once

#include <zlib.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "hft/geometry.hpp"
#include "hft/png.hpp"
#include "hft/synthworld.hpp"
#include "hft/tensor.hpp"

namespace hft {

inline nlohmann::json grid_to_json(const BevGridSpec& g) {
  nlohmann::json j;
  j["depth_cells"] = g.depth_cells;
  j["lateral_cells"] = g.lateral_cells;
  j["cell_size"] = g.cell_size;
  j["z_min"] = g.z_min;
  j["z_max"] = g.z_max;
  auto arr = nlohmann::json::array();
  for (const auto& [lo, hi] : g.extents) arr.push_back({lo, hi});
  j["extents"] = arr;
  return j;
}

inline BevGridSpec grid_from_json(const nlohmann::json& j) {
  BevGridSpec g;
  g.depth_cells = j.at("depth_cells").get<int>();
  g.lateral_cells = j.at("lateral_cells").get<int>();
  g.cell_size = j.at("cell_size").get<double>();
  g.z_min = j.at("z_min").get<double>();
  g.z_max = j.at("z_max").get<double>();
  for (const auto& e : j.at("extents"))
    g.extents.emplace_back(e.at(0).get<double>(), e.at(1).get<double>());
  g.validate();
  return g;
}

inline nlohmann::json intrinsics_to_json(const CameraIntrinsics& k) {
  return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"cam_height", k.cam_height}};
}

inline CameraIntrinsics intrinsics_from_json(const nlohmann::json& j) {
  CameraIntrinsics k;
  k.fx = j.at("fx").get<double>();
  k.fy = j.at("fy").get<double>();
  k.cx = j.at("cx").get<double>();
  k.cy = j.at("cy").get<double>();
  k.cam_height = j.at("cam_height").get<double>();
  k.validate();
  return k;
}

namespace datadetail {

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("dataset: cannot read " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string crc32_hex(const std::vector<std::uint8_t>& bytes) {
  const auto c = crc32(0L, bytes.data(), static_cast<uInt>(bytes.size()));
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%08lx", static_cast<unsigned long>(c));
  return buf;
}

}  // namespace datadetail

struct DatasetMeta {
  int image_h = 0;
  int image_w = 0;
  std::vector<std::string> class_names;
  std::vector<int> static_ids;
  std::vector<int> dynamic_ids;
  BevGridSpec grid;
};

inline constexpr int kDatasetFormatVersion = 1;

// Writes manifest.json plus fv_{id}.png (8-bit RGB), bev_{id}.png (16-bit
// class bitmask) and valid_{id}.png (8-bit binary) per sample. The manifest
// carries per-file CRC32 checksums so corruption is caught on read.
inline void write_dataset(const std::vector<SampleRecord>& samples, const std::string& dir,
                          const DatasetMeta& meta) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format_version"] = kDatasetFormatVersion;
  manifest["image_h"] = meta.image_h;
  manifest["image_w"] = meta.image_w;
  manifest["class_names"] = meta.class_names;
  manifest["static_ids"] = meta.static_ids;
  manifest["dynamic_ids"] = meta.dynamic_ids;
  manifest["grid"] = grid_to_json(meta.grid);
  auto palette = nlohmann::json::array();
  for (size_t c = 0; c < meta.class_names.size(); ++c) {
    const auto rgb = class_color(static_cast<int>(c));
    palette.push_back({rgb[0], rgb[1], rgb[2]});
  }
  manifest["palette"] = palette;

  std::map<std::string, int> split_sizes;
  auto sample_arr = nlohmann::json::array();
  for (const auto& s : samples) {
    const std::string fv = "fv_" + std::to_string(s.id) + ".png";
    const std::string bev = "bev_" + std::to_string(s.id) + ".png";
    const std::string valid = "valid_" + std::to_string(s.id) + ".png";
    write_png_rgb8(dir + "/" + fv, s.fv);
    write_png_gray16(dir + "/" + bev, s.bev_bits);
    write_png_gray8(dir + "/" + valid, s.validity);
    nlohmann::json rec;
    rec["id"] = s.id;
    rec["split"] = s.split;
    rec["scene_seed"] = s.scene_seed;
    rec["intrinsics"] = intrinsics_to_json(s.intr);
    rec["files"] = {{"fv", fv}, {"bev", bev}, {"valid", valid}};
    rec["checksums"] = {{"fv", datadetail::crc32_hex(datadetail::read_file(dir + "/" + fv))},
                        {"bev", datadetail::crc32_hex(datadetail::read_file(dir + "/" + bev))},
                        {"valid", datadetail::crc32_hex(datadetail::read_file(dir + "/" + valid))}};
    sample_arr.push_back(std::move(rec));
    ++split_sizes[s.split];
  }
  manifest["samples"] = std::move(sample_arr);
  manifest["splits"] = split_sizes;

  std::ofstream out(dir + "/manifest.json", std::ios::trunc);
  if (!out) throw DataError("dataset: cannot write manifest in " + dir);
  out << manifest.dump(2) << "\n";
}

// Read-side handle. Sample payloads are loaded on demand and checksum- and
// class-count-validated as they come in.
class Dataset {
 public:
  static Dataset open(const std::string& dir) {
    Dataset d;
    d.dir_ = dir;
    nlohmann::json manifest;
    try {
      const auto bytes = datadetail::read_file(dir + "/manifest.json");
      d.manifest_digest_ = datadetail::crc32_hex(bytes);
      manifest = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
      throw DataError("dataset: corrupt manifest in " + dir + ": " + e.what());
    }
    try {
      if (manifest.at("format_version").get<int>() != kDatasetFormatVersion)
        throw DataError("dataset: unknown format version in " + dir);
      d.meta_.image_h = manifest.at("image_h").get<int>();
      d.meta_.image_w = manifest.at("image_w").get<int>();
      d.meta_.class_names = manifest.at("class_names").get<std::vector<std::string>>();
      d.meta_.static_ids = manifest.at("static_ids").get<std::vector<int>>();
      d.meta_.dynamic_ids = manifest.at("dynamic_ids").get<std::vector<int>>();
      d.meta_.grid = grid_from_json(manifest.at("grid"));
      for (const auto& rec : manifest.at("samples")) {
        Entry e;
        e.id = rec.at("id").get<int>();
        e.split = rec.at("split").get<std::string>();
        e.scene_seed = rec.at("scene_seed").get<std::uint64_t>();
        e.intr = intrinsics_from_json(rec.at("intrinsics"));
        e.fv = rec.at("files").at("fv").get<std::string>();
        e.bev = rec.at("files").at("bev").get<std::string>();
        e.valid = rec.at("files").at("valid").get<std::string>();
        e.crc_fv = rec.at("checksums").at("fv").get<std::string>();
        e.crc_bev = rec.at("checksums").at("bev").get<std::string>();
        e.crc_valid = rec.at("checksums").at("valid").get<std::string>();
        d.entries_.push_back(std::move(e));
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError("dataset: manifest missing fields in " + dir + ": " + e.what());
    }
    for (const auto& e : d.entries_) ++d.split_sizes_[e.split];
    return d;
  }

  const DatasetMeta& meta() const { return meta_; }
  size_t size() const { return entries_.size(); }
  int num_classes() const { return static_cast<int>(meta_.class_names.size()); }
  const std::map<std::string, int>& split_sizes() const { return split_sizes_; }
  const std::string& manifest_digest() const { return manifest_digest_; }

  std::vector<int> split_indices(const std::string& split) const {
    std::vector<int> idx;
    for (size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].split == split) idx.push_back(static_cast<int>(i));
    return idx;
  }

  SampleRecord load(int index) const {
    const Entry& e = entries_.at(static_cast<size_t>(index));
    auto checked = [&](const std::string& file, const std::string& crc) {
      const auto bytes = datadetail::read_file(dir_ + "/" + file);
      if (datadetail::crc32_hex(bytes) != crc)
        throw DataError("dataset: checksum mismatch for " + file);
    };
    checked(e.fv, e.crc_fv);
    checked(e.bev, e.crc_bev);
    checked(e.valid, e.crc_valid);

    SampleRecord s;
    s.id = e.id;
    s.split = e.split;
    s.scene_seed = e.scene_seed;
    s.intr = e.intr;
    s.fv = read_png_rgb8(dir_ + "/" + e.fv);
    s.bev_bits = read_png_gray16(dir_ + "/" + e.bev);
    s.validity = read_png_gray8(dir_ + "/" + e.valid);
    if (s.fv.height != meta_.image_h || s.fv.width != meta_.image_w)
      throw DataError("dataset: image size mismatch for sample " + std::to_string(e.id));
    if (s.bev_bits.height != meta_.grid.depth_cells || s.bev_bits.width != meta_.grid.lateral_cells)
      throw DataError("dataset: BEV mask size mismatch for sample " + std::to_string(e.id));
    const int classes = num_classes();
    for (const std::uint16_t bits : s.bev_bits.data) {
      if (classes < 16 && (bits >> classes) != 0)
        throw DataError("dataset: mask channels exceed the manifest class count");
    }
    return s;
  }

 private:
  struct Entry {
    int id = 0;
    std::string split;
    std::uint64_t scene_seed = 0;
    CameraIntrinsics intr;
    std::string fv, bev, valid;
    std::string crc_fv, crc_bev, crc_valid;
  };
  std::string dir_;
  DatasetMeta meta_;
  std::vector<Entry> entries_;
  std::map<std::string, int> split_sizes_;
  std::string manifest_digest_;
};

}  // namespace hft
