#pragma once

// Weight file layout (all integers little-endian):
//
//   u64  header_length
//   u8   header[header_length]    UTF-8 JSON document
//   f64  payload[...]             tensor data, row-major, little-endian
//
// The JSON header carries "format", "version", the model "config", and a
// "tensors" array of {name, shape, offset} where offset is the byte offset of
// the tensor inside the payload. Checkpoints of adapted models add an
// "adapters" array of {layer, target, rank, alpha, a, b} naming the adapter
// tensors, which are stored in the same payload.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hiprobe/error.hpp"
#include "hiprobe/model/config.hpp"
#include "hiprobe/model/model.hpp"
#include "hiprobe/util/hash.hpp"

namespace hiprobe {

inline constexpr const char* kWeightFormat = "hiprobe-weights";
inline constexpr int kWeightFormatVersion = 1;

struct WeightFile {
  nlohmann::json header;
  std::map<std::string, Tensor> tensors;
};

using NamedTensors = std::vector<std::pair<std::string, const Tensor*>>;

inline void write_weight_file(const std::filesystem::path& path, nlohmann::json header,
                              const NamedTensors& tensors) {
  std::uint64_t offset = 0;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    entries.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}});
    offset += t->size() * 8;
  }
  header["format"] = kWeightFormat;
  header["version"] = kWeightFormatVersion;
  header["tensors"] = std::move(entries);
  header["payload_bytes"] = offset;
  const std::string text = header.dump();

  std::string bytes;
  bytes.reserve(8 + text.size() + offset);
  auto put_u64 = [&bytes](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  put_u64(text.size());
  bytes += text;
  for (const auto& entry : tensors) {
    for (double v : entry.second->data()) put_u64(std::bit_cast<std::uint64_t>(v));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

inline WeightFile read_weight_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open weight file " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto get_u64 = [&bytes](std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes[at + i])) << (8 * i);
    return v;
  };
  if (bytes.size() < 8) throw FormatError(path.string() + ": truncated before header length");
  const std::uint64_t header_len = get_u64(0);
  if (header_len > bytes.size() - 8) throw FormatError(path.string() + ": truncated header");

  WeightFile file;
  try {
    file.header = nlohmann::json::parse(bytes.substr(8, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": corrupt header: " + e.what());
  }
  const auto& h = file.header;
  const std::size_t payload_start = 8 + header_len;
  const std::size_t payload_size = bytes.size() - payload_start;
  try {
    if (!h.is_object() || h.value("format", "") != kWeightFormat) {
      throw FormatError(path.string() + ": not a " + std::string(kWeightFormat) + " file");
    }
    if (h.at("version") != kWeightFormatVersion) {
      throw FormatError(path.string() + ": unsupported version " + h.at("version").dump());
    }
    if (h.at("payload_bytes").get<std::uint64_t>() != payload_size) {
      throw FormatError(path.string() + ": payload is " + std::to_string(payload_size) +
                        " bytes, header declares " + h.at("payload_bytes").dump());
    }
    for (const auto& entry : h.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const std::size_t count = shape_numel(shape);
      if (offset % 8 != 0 || offset + count * 8 > payload_size) {
        throw FormatError(path.string() + ": tensor '" + name + "' shape " + shape_str(shape) +
                          " disagrees with payload length");
      }
      std::vector<double> values(count);
      for (std::size_t i = 0; i < count; ++i) {
        values[i] = std::bit_cast<double>(get_u64(payload_start + offset + i * 8));
      }
      file.tensors.emplace(name, Tensor(shape, std::move(values)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed header: " + e.what());
  } catch (const ShapeError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return file;
}

namespace detail {

inline NamedTensors named_tensors(const ModelWeights& w) {
  NamedTensors out;
  w.for_each([&out](const std::string& name, const Tensor& t) { out.emplace_back(name, &t); });
  return out;
}

inline ModelWeights weights_from_file(const WeightFile& file, const std::filesystem::path& path) {
  ModelConfig config;
  try {
    config = file.header.at("config").get<ModelConfig>();
    config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad config: " + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (config.vocab_size != Vocabulary::standard().size()) {
    throw FormatError(path.string() + ": vocabulary size " + std::to_string(config.vocab_size) +
                      " does not match this build (" + std::to_string(Vocabulary::standard().size()) + ")");
  }
  ModelWeights w = make_weights(config);
  w.for_each([&](const std::string& name, Tensor& t) {
    auto it = file.tensors.find(name);
    if (it == file.tensors.end()) throw FormatError(path.string() + ": missing tensor '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw FormatError(path.string() + ": tensor '" + name + "' has shape " +
                        shape_str(it->second.shape()) + ", config expects " + shape_str(t.shape()));
    }
    t = it->second;
  });
  return w;
}

}  // namespace detail

inline void save_weights(const ModelWeights& weights, const std::filesystem::path& path) {
  write_weight_file(path, {{"config", weights.config}}, detail::named_tensors(weights));
}

inline ModelWeights load_weights(const std::filesystem::path& path) {
  return detail::weights_from_file(read_weight_file(path), path);
}

/// Saves base weights plus adapters in one file.
inline void save_model(const Model& model, const std::filesystem::path& path) {
  NamedTensors tensors = detail::named_tensors(model.base);
  nlohmann::json adapters = nlohmann::json::array();
  for (std::size_t i = 0; i < model.adapters.size(); ++i) {
    const auto& a = model.adapters[i];
    const std::string prefix = "lora." + std::to_string(a.layer) + "." + projection_name(a.target) + ".";
    adapters.push_back({{"layer", a.layer},
                        {"target", projection_name(a.target)},
                        {"rank", a.rank},
                        {"alpha", a.alpha},
                        {"a", prefix + "a"},
                        {"b", prefix + "b"}});
    tensors.emplace_back(prefix + "a", &a.a);
    tensors.emplace_back(prefix + "b", &a.b);
  }
  write_weight_file(path, {{"config", model.base.config}, {"adapters", adapters}}, tensors);
}

inline Model load_model(const std::filesystem::path& path) {
  const WeightFile file = read_weight_file(path);
  Model model{detail::weights_from_file(file, path), {}};
  if (!file.header.contains("adapters")) return model;
  try {
    for (const auto& entry : file.header.at("adapters")) {
      LoraAdapter a;
      a.layer = entry.at("layer").get<std::size_t>();
      const auto target = entry.at("target").get<std::string>();
      if (target == "wq") a.target = Projection::query;
      else if (target == "wk") a.target = Projection::key;
      else if (target == "wv") a.target = Projection::value;
      else throw FormatError(path.string() + ": unknown adapter target '" + target + "'");
      a.rank = entry.at("rank").get<std::size_t>();
      a.alpha = entry.at("alpha").get<double>();
      a.a = file.tensors.at(entry.at("a").get<std::string>());
      a.b = file.tensors.at(entry.at("b").get<std::string>());
      const std::size_t d = model.base.config.d_model;
      if (a.layer >= model.base.config.n_layers || a.a.shape() != Shape{a.rank, d} ||
          a.b.shape() != Shape{d, a.rank}) {
        throw FormatError(path.string() + ": adapter tensors inconsistent with config");
      }
      model.adapters.push_back(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed adapter section: " + e.what());
  } catch (const std::out_of_range&) {
    throw FormatError(path.string() + ": adapter references a missing tensor");
  }
  return model;
}

/// Digest of every base tensor, used to prove weights did not change.
inline std::string weights_hash(const ModelWeights& w) {
  Fnv1a h;
  w.for_each([&h](const std::string& name, const Tensor& t) { h.update(name).update(t); });
  return h.hex();
}

}  // namespace hiprobe
