#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "hiprobe/analysis/head_impact.hpp"
#include "hiprobe/error.hpp"
#include "hiprobe/peft/lora.hpp"
#include "hiprobe/peft/train.hpp"

namespace hiprobe {

inline const std::vector<std::string>& setup_names() {
  static const std::vector<std::string> names{"original", "top-k", "bottom-k", "random-k", "full"};
  return names;
}

inline std::size_t default_k(std::size_t n_layers) { return std::max<std::size_t>(1, n_layers / 4); }

/// Adapted layers for a named setup; empty for "original".
inline std::vector<std::size_t> setup_layers(const std::string& name, const HiMatrix& hi, std::size_t k,
                                             std::uint64_t seed) {
  if (name == "original") return {};
  if (name == "top-k") return rank_layers(hi, k, LayerStrategy::top);
  if (name == "bottom-k") return rank_layers(hi, k, LayerStrategy::bottom);
  if (name == "random-k") return rank_layers(hi, k, LayerStrategy::random_excluding, seed);
  if (name == "full") {
    std::vector<std::size_t> all(hi.n_layers);
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  throw InvalidArgument("unknown setup '" + name + "'");
}

struct SetupResult {
  std::string name;
  std::size_t k = 0;
  std::vector<std::size_t> layers;
  std::uint64_t seed = 0;
  ParamCounts params;
  TrainHistory history;
  Model model;
  bool trained = false;
};

inline nlohmann::json setup_metadata(const SetupResult& s) {
  return {{"name", s.name},
          {"k", s.k},
          {"layers", s.layers},
          {"seed", s.seed},
          {"trained", s.trained},
          {"params", {{"total", s.params.total}, {"trainable", s.params.trainable}, {"percent", s.params.percent}}}};
}

/// Builds and trains one setup. "original" is the base model untouched.
inline SetupResult run_setup(const std::string& name, const ModelWeights& base, const HiMatrix& hi, std::size_t k,
                             const std::vector<CaptionUnit>& train_units, const std::vector<CaptionUnit>& val_units,
                             const TrainConfig& config, const LoraOptions& lora = {},
                             const EpochCallback& on_epoch = {}) {
  SetupResult r;
  r.name = name;
  r.k = k;
  r.seed = config.seed;
  r.layers = setup_layers(name, hi, k, config.seed);
  r.model = attach_lora(base, r.layers, config.seed, lora);
  r.params = count_params(r.model);
  if (name == "original") return r;
  try {
    TrainResult t = train(std::move(r.model), train_units, val_units, config, on_epoch);
    r.model = std::move(t.model);
    r.history = std::move(t.history);
    r.trained = true;
  } catch (const NumericError& e) {
    throw NumericError("setup " + name + ": " + e.what());
  } catch (const Error& e) {
    throw Error("setup " + name + ": " + e.what());
  }
  return r;
}

/// All five setups with one training configuration.
inline std::vector<SetupResult> run_setup_suite(const ModelWeights& base, const HiMatrix& hi, std::size_t k,
                                                const std::vector<CaptionUnit>& train_units,
                                                const std::vector<CaptionUnit>& val_units, const TrainConfig& config,
                                                const LoraOptions& lora = {}) {
  std::vector<SetupResult> out;
  for (const auto& name : setup_names()) {
    out.push_back(run_setup(name, base, hi, k, train_units, val_units, config, lora));
  }
  return out;
}

}  // namespace hiprobe
