#pragma once

// On-disk dataset layout:
//
//   <dir>/manifest.json
//   <dir>/images/<id>.ppm        P6, maxval 255
//   <dir>/masks/<id>_<k>.pgm     P5, mask bits as 0/255
//
// manifest.json: {version, seed, samples[{id, image_file, objects[{mask_file, caption}]}],
//                 splits{hi, train, val, test}}; file names are relative to <dir>.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "hiprobe/data/generate.hpp"
#include "hiprobe/data/pnm.hpp"
#include "hiprobe/data/sample.hpp"
#include "hiprobe/error.hpp"

namespace hiprobe {

inline constexpr int kManifestVersion = 1;

struct Dataset {
  std::uint64_t seed = 0;
  std::vector<Sample> samples;
  DatasetSplits splits;

  const Sample& sample(const std::string& id) const {
    for (const auto& s : samples) {
      if (s.id == id) return s;
    }
    throw InvalidArgument("no sample with id '" + id + "'");
  }

  std::vector<const Sample*> split(const std::vector<std::string>& ids) const {
    std::map<std::string, const Sample*> by_id;
    for (const auto& s : samples) by_id.emplace(s.id, &s);
    std::vector<const Sample*> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw InvalidArgument("split references unknown sample '" + id + "'");
      out.push_back(it->second);
    }
    return out;
  }
};

inline void write_dataset(const Dataset& data, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : data.samples) {
    const std::string image_file = "images/" + s.id + ".ppm";
    write_ppm(s.image, dir / image_file);
    nlohmann::json objects = nlohmann::json::array();
    for (std::size_t k = 0; k < s.objects.size(); ++k) {
      const std::string mask_file = "masks/" + s.id + "_" + std::to_string(k) + ".pgm";
      write_pgm(s.objects[k].mask, dir / mask_file);
      objects.push_back({{"mask_file", mask_file}, {"caption", s.objects[k].caption}});
    }
    samples.push_back({{"id", s.id}, {"image_file", image_file}, {"objects", objects}});
  }
  const nlohmann::json manifest = {
      {"version", kManifestVersion},
      {"seed", data.seed},
      {"samples", samples},
      {"splits",
       {{"hi", data.splits.hi}, {"train", data.splits.train}, {"val", data.splits.val}, {"test", data.splits.test}}}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw FormatError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(1) << "\n";
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw FormatError("missing manifest " + manifest_path.string());
  Dataset data;
  try {
    const auto m = nlohmann::json::parse(in);
    if (m.at("version") != kManifestVersion) {
      throw FormatError(manifest_path.string() + ": unsupported manifest version " + m.at("version").dump());
    }
    data.seed = m.at("seed").get<std::uint64_t>();
    auto load = [&dir](const std::string& rel) {
      const auto path = dir / rel;
      if (!std::filesystem::exists(path)) throw FormatError("manifest references missing file " + path.string());
      return path;
    };
    for (const auto& entry : m.at("samples")) {
      Sample s;
      s.id = entry.at("id").get<std::string>();
      s.image = read_ppm(load(entry.at("image_file").get<std::string>()));
      for (const auto& obj : entry.at("objects")) {
        SampleObject o;
        const auto mask_path = load(obj.at("mask_file").get<std::string>());
        o.mask = read_pgm_mask(mask_path);
        o.caption = obj.at("caption").get<std::string>();
        if (o.mask.width != s.image.width || o.mask.height != s.image.height) {
          throw FormatError(mask_path.string() + ": mask size differs from image");
        }
        s.objects.push_back(std::move(o));
      }
      data.samples.push_back(std::move(s));
    }
    const auto& sp = m.at("splits");
    data.splits.hi = sp.at("hi").get<std::vector<std::string>>();
    data.splits.train = sp.at("train").get<std::vector<std::string>>();
    data.splits.val = sp.at("val").get<std::vector<std::string>>();
    data.splits.test = sp.at("test").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": malformed manifest: " + e.what());
  }
  for (const auto* ids : {&data.splits.hi, &data.splits.train, &data.splits.val, &data.splits.test}) {
    try {
      data.split(*ids);
    } catch (const InvalidArgument& e) {
      throw FormatError(manifest_path.string() + ": " + e.what());
    }
  }
  return data;
}

}  // namespace hiprobe
