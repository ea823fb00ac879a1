#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "hiprobe/autodiff/adam.hpp"
#include "hiprobe/autodiff/ops.hpp"
#include "hiprobe/autodiff/rng.hpp"
#include "hiprobe/autodiff/tape.hpp"
#include "hiprobe/data/units.hpp"
#include "hiprobe/error.hpp"
#include "hiprobe/model/model.hpp"
#include "hiprobe/model/patchify.hpp"
#include "hiprobe/model/prompt.hpp"

namespace hiprobe {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  double clip_norm = 1.0;  // 0 disables clipping
  std::size_t patience = 3;
  std::uint64_t seed = 0;
  std::size_t max_steps = 0;  // 0 means no limit

  void validate() const {
    if (epochs == 0 || batch_size == 0 || patience == 0) {
      throw InvalidArgument("TrainConfig: epochs, batch_size and patience must be positive");
    }
    if (!(learning_rate > 0) || !std::isfinite(learning_rate)) {
      throw InvalidArgument("TrainConfig: learning_rate must be positive");
    }
    if (!(clip_norm >= 0) || !std::isfinite(clip_norm)) throw InvalidArgument("TrainConfig: clip_norm must be >= 0");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},       {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
                     {"clip_norm", c.clip_norm}, {"patience", c.patience},     {"seed", c.seed},
                     {"max_steps", c.max_steps}};
}

/// Mean cross entropy over the caption tokens, each predicted from the previous position.
inline Var caption_loss(Tape& tape, const Model& model, const PromptLayout& layout, const Patches& patches) {
  if (layout.caption.empty()) throw InvalidArgument("caption_loss: layout has no caption tokens");
  std::vector<std::size_t> rows, targets;
  for (std::size_t p = layout.caption.begin; p < layout.caption.end; ++p) {
    rows.push_back(p - 1);
    targets.push_back(layout.tokens[p]);
  }
  return ops::cross_entropy(forward_graph(tape, model, layout, patches), rows, targets);
}

/// A unit with its prompt and patches prepared once.
struct PreparedUnit {
  const Sample* sample = nullptr;
  std::size_t object = 0;
  PromptLayout layout;
  Patches patches;
};

inline std::vector<PreparedUnit> prepare_caption_units(const std::vector<CaptionUnit>& units,
                                                       const ModelConfig& config) {
  std::vector<PreparedUnit> out;
  out.reserve(units.size());
  for (const auto& u : units) {
    out.push_back({u.sample, u.object, assemble_prompt(*u.sample, u.object, PromptMode::caption, config),
                   patchify(u.sample->image, config)});
  }
  return out;
}

/// Mean caption loss over units, no gradients.
inline double mean_caption_loss(const Model& model, const std::vector<PreparedUnit>& units) {
  if (units.empty()) throw InvalidArgument("mean_caption_loss: no units");
  double total = 0;
  for (const auto& u : units) {
    Tape tape(false);
    total += caption_loss(tape, model, u.layout, u.patches).value()[0];
  }
  return total / static_cast<double>(units.size());
}

struct TrainHistory {
  std::vector<double> train_loss;  // per epoch, mean over units
  std::vector<double> val_loss;    // per epoch
  double initial_val_loss = 0;
  std::size_t best_epoch = 0;  // 1-based; 0 when no epoch ran
  double best_val_loss = 0;
  std::size_t steps = 0;
  bool stopped_early = false;
};

inline void to_json(nlohmann::json& j, const TrainHistory& h) {
  j = nlohmann::json{{"train_loss", h.train_loss}, {"val_loss", h.val_loss},
                     {"initial_val_loss", h.initial_val_loss}, {"best_epoch", h.best_epoch},
                     {"best_val_loss", h.best_val_loss}, {"steps", h.steps}, {"stopped_early", h.stopped_early}};
}

struct EpochReport {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  std::size_t steps = 0;
};

using EpochCallback = std::function<void(const EpochReport&)>;

struct TrainResult {
  Model model;  // checkpoint with the best validation loss
  TrainHistory history;
};

namespace detail {

inline void clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  if (max_norm <= 0) return;
  double sq = 0;
  for (const auto& g : grads) {
    for (double v : g.data()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double scale = max_norm / norm;
  for (auto& g : grads) {
    for (auto& v : g.data()) v *= scale;
  }
}

}  // namespace detail

/// Adam on the caption loss of every trainable tensor in `model`. Batches are
/// drawn from a per-epoch seeded shuffle; batch gradients are unit means.
/// Stops after `patience` epochs without validation improvement.
inline TrainResult train(Model model, const std::vector<CaptionUnit>& train_units,
                         const std::vector<CaptionUnit>& val_units, const TrainConfig& config,
                         const EpochCallback& on_epoch = {}) {
  config.validate();
  if (train_units.empty() || val_units.empty()) throw InvalidArgument("train: empty train or validation split");
  const auto train_set = prepare_caption_units(train_units, model.base.config);
  const auto val_set = prepare_caption_units(val_units, model.base.config);

  TrainResult result{model, {}};
  TrainHistory& hist = result.history;
  hist.initial_val_loss = mean_caption_loss(model, val_set);
  hist.best_val_loss = hist.initial_val_loss;
  const std::vector<Tensor*> params = model.trainable();
  if (params.empty()) return result;

  AdamState adam;
  adam.config.learning_rate = config.learning_rate;
  Rng rng(config.seed);
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  bool out_of_steps = false;

  for (std::size_t epoch = 1; epoch <= config.epochs && !out_of_steps; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<Tensor> grads;
      for (const Tensor* p : params) grads.emplace_back(p->shape(), 0.0);
      for (std::size_t i = start; i < end; ++i) {
        const auto& u = train_set[order[i]];
        Tape tape;
        Var loss = caption_loss(tape, model, u.layout, u.patches);
        const double value = loss.value()[0];
        if (!std::isfinite(value)) {
          throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(hist.steps + 1) + ", sample " + u.sample->id);
        }
        epoch_loss += value;
        ++seen;
        tape.backward(loss);
        for (std::size_t k = 0; k < params.size(); ++k) {
          const Tensor g = tape.grad_of(*params[k]);
          auto dst = grads[k].data();
          auto src = g.data();
          for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
        }
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (auto& g : grads) {
        for (auto& v : g.data()) v *= inv;
      }
      detail::clip_global_norm(grads, config.clip_norm);
      adam_step(params, grads, adam);
      ++hist.steps;
      if (config.max_steps && hist.steps >= config.max_steps) {
        out_of_steps = true;
        break;
      }
    }
    hist.train_loss.push_back(epoch_loss / static_cast<double>(seen));
    const double val = mean_caption_loss(model, val_set);
    if (!std::isfinite(val)) throw NumericError("train: non-finite validation loss at epoch " + std::to_string(epoch));
    hist.val_loss.push_back(val);
    if (on_epoch) on_epoch({epoch, hist.train_loss.back(), val, hist.steps});
    if (val < best) {
      best = val;
      since_best = 0;
      hist.best_epoch = epoch;
      hist.best_val_loss = val;
      result.model = model;
    } else if (++since_best >= config.patience) {
      hist.stopped_early = true;
      break;
    }
  }
  return result;
}

}  // namespace hiprobe
