#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "hiprobe/autodiff/rng.hpp"
#include "hiprobe/error.hpp"
#include "hiprobe/model/model.hpp"

namespace hiprobe {

struct LoraOptions {
  std::size_t rank = 8;
  double alpha = 16.0;
  double init_std = 0.02;
};

/// Base weights frozen, one query/key/value adapter triple per listed layer.
/// B starts at zero, so the adapted model computes exactly what the base does.
inline Model attach_lora(ModelWeights base, const std::vector<std::size_t>& layers, std::uint64_t seed,
                         const LoraOptions& options = {}) {
  if (options.rank == 0) throw InvalidArgument("attach_lora: rank must be positive");
  std::set<std::size_t> seen;
  for (auto l : layers) {
    if (l >= base.config.n_layers) {
      throw InvalidArgument("attach_lora: layer " + std::to_string(l) + " out of range for " +
                            std::to_string(base.config.n_layers) + " layers");
    }
    if (!seen.insert(l).second) throw InvalidArgument("attach_lora: duplicate layer " + std::to_string(l));
  }
  base.set_trainable(false);
  Model model{std::move(base), {}};
  const std::size_t d = model.base.config.d_model;
  Rng rng(seed);
  for (auto l : layers) {
    for (auto target : {Projection::query, Projection::key, Projection::value}) {
      LoraAdapter a;
      a.layer = l;
      a.target = target;
      a.rank = options.rank;
      a.alpha = options.alpha;
      a.a = Tensor({options.rank, d});
      for (auto& v : a.a.data()) v = rng.normal(0.0, options.init_std);
      a.b = Tensor({d, options.rank});
      a.a.set_requires_grad(true);
      a.b.set_requires_grad(true);
      model.adapters.push_back(std::move(a));
    }
  }
  return model;
}

struct ParamCounts {
  std::size_t total = 0;      // base plus adapters
  std::size_t trainable = 0;  // adapters only
  double percent = 0;
};

inline ParamCounts count_params(const Model& model) {
  ParamCounts c;
  for (const auto& a : model.adapters) c.trainable += a.parameter_count();
  c.total = model.base.parameter_count() + c.trainable;
  c.percent = c.total ? 100.0 * static_cast<double>(c.trainable) / static_cast<double>(c.total) : 0.0;
  return c;
}

}  // namespace hiprobe
