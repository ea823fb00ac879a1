#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>

#include <json.hpp>

#include "hiprobe/analysis/head_impact.hpp"
#include "hiprobe/data/generate.hpp"
#include "hiprobe/error.hpp"
#include "hiprobe/model/config.hpp"
#include "hiprobe/model/prompt.hpp"
#include "hiprobe/peft/setups.hpp"
#include "hiprobe/peft/train.hpp"

namespace hiprobe {

/// Invalid or unknown configuration; the command line maps it to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"gen-data", "pretrain", "hi", "finetune", "eval"};
  return names;
}

inline TrainConfig default_pretrain_config() {
  TrainConfig c;
  c.epochs = 30;
  c.patience = 5;
  return c;
}

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t dataset_size = 300;
  std::filesystem::path out = "runs/default";
  std::optional<std::size_t> k;  // default: n_layers / 4, at least 1
  double tau = kDefaultCoverage;
  std::size_t workers = 1;
  ModelConfig model;
  TrainConfig pretrain = default_pretrain_config();
  TrainConfig finetune;
  LoraOptions lora;

  std::size_t effective_k() const { return k.value_or(default_k(model.n_layers)); }

  void validate() const {
    auto fail = [](const std::string& what) { throw ConfigError(what); };
    if (dataset_size < 10) fail("dataset_size must be at least 10");
    if (!(tau > 0 && tau <= 1)) fail("tau must be in (0, 1]");
    if (workers == 0) fail("workers must be positive");
    if (lora.rank == 0 || !(lora.alpha > 0) || !(lora.init_std >= 0)) fail("lora: rank, alpha must be positive");
    try {
      model.validate();
      pretrain.validate();
      finetune.validate();
    } catch (const InvalidArgument& e) {
      fail(e.what());
    }
    if (model.vocab_size != Vocabulary::standard().size()) {
      fail("model.vocab_size must be " + std::to_string(Vocabulary::standard().size()));
    }
    if (model.image_size != kCanvasSide) fail("model.image_size must be " + std::to_string(kCanvasSide));
    const std::string caption = "a small red square";
    try {
      caption_prompt(caption, model);
      vqa_prompt({{caption, caption, caption, caption}, 0}, model);
    } catch (const InvalidArgument&) {
      fail("model.max_seq_len " + std::to_string(model.max_seq_len) + " is too short for the prompts");
    }
    const std::size_t kk = effective_k();
    if (kk == 0 || 3 * kk > model.n_layers) {
      fail("k = " + std::to_string(kk) + " needs 3k <= n_layers (" + std::to_string(model.n_layers) + ")");
    }
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown config key '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& dst, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(dst);
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + (where.empty() ? std::string(key) : where + "." + key) + "' has the wrong type");
  }
}

inline void read_train(const nlohmann::json& j, TrainConfig& c, const std::string& where) {
  reject_unknown(j, {"epochs", "batch_size", "learning_rate", "clip_norm", "patience", "max_steps"}, where);
  read_if(j, "epochs", c.epochs, where);
  read_if(j, "batch_size", c.batch_size, where);
  read_if(j, "learning_rate", c.learning_rate, where);
  read_if(j, "clip_norm", c.clip_norm, where);
  read_if(j, "patience", c.patience, where);
  read_if(j, "max_steps", c.max_steps, where);
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::reject_unknown(j, {"seed", "dataset_size", "out", "k", "tau", "workers", "model", "pretrain", "finetune", "lora"},
                         "");
  detail::read_if(j, "seed", c.seed, "");
  detail::read_if(j, "dataset_size", c.dataset_size, "");
  if (j.contains("out")) {
    std::string out;
    detail::read_if(j, "out", out, "");
    c.out = out;
  }
  if (j.contains("k") && !j.at("k").is_null()) {
    std::size_t k = 0;
    detail::read_if(j, "k", k, "");
    c.k = k;
  }
  detail::read_if(j, "tau", c.tau, "");
  detail::read_if(j, "workers", c.workers, "");
  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::reject_unknown(m, {"d_model", "n_layers", "n_heads", "head_dim", "ffn_dim", "image_size", "patch_size",
                               "max_seq_len"},
                           "model");
    detail::read_if(m, "d_model", c.model.d_model, "model");
    detail::read_if(m, "n_layers", c.model.n_layers, "model");
    detail::read_if(m, "n_heads", c.model.n_heads, "model");
    detail::read_if(m, "head_dim", c.model.head_dim, "model");
    detail::read_if(m, "ffn_dim", c.model.ffn_dim, "model");
    detail::read_if(m, "image_size", c.model.image_size, "model");
    detail::read_if(m, "patch_size", c.model.patch_size, "model");
    detail::read_if(m, "max_seq_len", c.model.max_seq_len, "model");
  }
  if (j.contains("pretrain")) detail::read_train(j.at("pretrain"), c.pretrain, "pretrain");
  if (j.contains("finetune")) detail::read_train(j.at("finetune"), c.finetune, "finetune");
  if (j.contains("lora")) {
    const auto& l = j.at("lora");
    detail::reject_unknown(l, {"rank", "alpha", "init_std"}, "lora");
    detail::read_if(l, "rank", c.lora.rank, "lora");
    detail::read_if(l, "alpha", c.lora.alpha, "lora");
    detail::read_if(l, "init_std", c.lora.init_std, "lora");
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

inline nlohmann::json train_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},       {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
          {"clip_norm", c.clip_norm}, {"patience", c.patience},     {"max_steps", c.max_steps}};
}

/// Full resolved configuration, as written next to the artifacts.
inline nlohmann::json run_config_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"dataset_size", c.dataset_size},
          {"out", c.out.string()},
          {"k", c.effective_k()},
          {"tau", c.tau},
          {"workers", c.workers},
          {"model", c.model},
          {"pretrain", train_json(c.pretrain)},
          {"finetune", train_json(c.finetune)},
          {"lora", {{"rank", c.lora.rank}, {"alpha", c.lora.alpha}, {"init_std", c.lora.init_std}}}};
}

}  // namespace hiprobe
