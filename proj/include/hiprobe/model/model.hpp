#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "hiprobe/autodiff/ops.hpp"
#include "hiprobe/autodiff/rng.hpp"
#include "hiprobe/autodiff/tape.hpp"
#include "hiprobe/data/sample.hpp"
#include "hiprobe/error.hpp"
#include "hiprobe/model/config.hpp"
#include "hiprobe/model/patchify.hpp"
#include "hiprobe/model/prompt.hpp"

namespace hiprobe {

struct LayerWeights {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, wk, wv, wo;  // (d_model, d_model), applied as x @ W
  Tensor ln2_gamma, ln2_beta;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

/// Parameters of the toy decoder. Visual tokens come from a linear patch
/// projection; text tokens from an embedding table; both get a learned
/// position embedding before the pre-norm transformer blocks.
struct ModelWeights {
  ModelConfig config;
  Tensor patch_proj, patch_bias;
  Tensor token_embedding;
  Tensor position_embedding;
  std::vector<LayerWeights> layers;
  Tensor final_gamma, final_beta;
  Tensor output_head;  // untied, (d_model, vocab)

  /// Calls f(name, tensor) for every parameter in a fixed order.
  template <typename F>
  void for_each(F&& f) {
    for_each_impl(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    for_each_impl(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&n](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }

  void set_trainable(bool flag) {
    for_each([flag](const std::string&, Tensor& t) { t.set_requires_grad(flag); });
  }

 private:
  template <typename Self, typename F>
  static void for_each_impl(Self& self, F& f) {
    f(std::string("patch_proj"), self.patch_proj);
    f(std::string("patch_bias"), self.patch_bias);
    f(std::string("token_embedding"), self.token_embedding);
    f(std::string("position_embedding"), self.position_embedding);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& L = self.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      f(p + "ln1_gamma", L.ln1_gamma);
      f(p + "ln1_beta", L.ln1_beta);
      f(p + "wq", L.wq);
      f(p + "wk", L.wk);
      f(p + "wv", L.wv);
      f(p + "wo", L.wo);
      f(p + "ln2_gamma", L.ln2_gamma);
      f(p + "ln2_beta", L.ln2_beta);
      f(p + "ffn_w1", L.ffn_w1);
      f(p + "ffn_b1", L.ffn_b1);
      f(p + "ffn_w2", L.ffn_w2);
      f(p + "ffn_b2", L.ffn_b2);
    }
    f(std::string("final_gamma"), self.final_gamma);
    f(std::string("final_beta"), self.final_beta);
    f(std::string("output_head"), self.output_head);
  }
};

/// Weights with the right shapes, every entry zero except norm scales (one).
inline ModelWeights make_weights(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.d_model;
  ModelWeights w;
  w.config = config;
  w.patch_proj = Tensor({config.patch_dim(), d});
  w.patch_bias = Tensor({d});
  w.token_embedding = Tensor({config.vocab_size, d});
  w.position_embedding = Tensor({config.max_seq_len, d});
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerWeights L;
    L.ln1_gamma = Tensor({d}, 1.0);
    L.ln1_beta = Tensor({d});
    L.wq = Tensor({d, d});
    L.wk = Tensor({d, d});
    L.wv = Tensor({d, d});
    L.wo = Tensor({d, d});
    L.ln2_gamma = Tensor({d}, 1.0);
    L.ln2_beta = Tensor({d});
    L.ffn_w1 = Tensor({d, config.ffn_dim});
    L.ffn_b1 = Tensor({config.ffn_dim});
    L.ffn_w2 = Tensor({config.ffn_dim, d});
    L.ffn_b2 = Tensor({d});
    w.layers.push_back(std::move(L));
  }
  w.final_gamma = Tensor({d}, 1.0);
  w.final_beta = Tensor({d});
  w.output_head = Tensor({d, config.vocab_size});
  return w;
}

/// Gaussian(0, 0.02) for projections and embeddings, ones/zeros for norms,
/// zeros for biases. Deterministic per seed.
inline ModelWeights init_model(const ModelConfig& config, std::uint64_t seed) {
  ModelWeights w = make_weights(config);
  Rng rng(seed);
  w.for_each([&rng](const std::string& name, Tensor& t) {
    const bool is_norm = name.find("gamma") != std::string::npos || name.find("beta") != std::string::npos;
    const bool is_bias = name.find("bias") != std::string::npos || name.find("_b1") != std::string::npos ||
                         name.find("_b2") != std::string::npos;
    if (is_norm || is_bias) return;
    for (auto& v : t.data()) v = rng.normal(0.0, 0.02);
  });
  return w;
}

enum class Projection { query = 0, key = 1, value = 2 };

inline const char* projection_name(Projection p) {
  switch (p) {
    case Projection::query: return "wq";
    case Projection::key: return "wk";
    case Projection::value: return "wv";
  }
  return "?";
}

/// Low-rank update of one projection: x @ W + (alpha / rank) * (x @ A^T) @ B^T,
/// i.e. delta W = (alpha / rank) * B A in (d_out, d_in) orientation.
struct LoraAdapter {
  std::size_t layer = 0;
  Projection target = Projection::query;
  std::size_t rank = 8;
  double alpha = 16.0;
  Tensor a;  // (rank, d_in)
  Tensor b;  // (d_out, rank)

  double scaling() const { return alpha / static_cast<double>(rank); }
  std::size_t parameter_count() const { return a.size() + b.size(); }
};

/// Base weights plus any attached adapters. Adapters are never merged into
/// the base tensors.
struct Model {
  ModelWeights base;
  std::vector<LoraAdapter> adapters;

  /// Every tensor flagged as trainable, in deterministic order.
  std::vector<Tensor*> trainable() {
    std::vector<Tensor*> out;
    base.for_each([&out](const std::string&, Tensor& t) {
      if (t.requires_grad()) out.push_back(&t);
    });
    for (auto& a : adapters) {
      if (a.a.requires_grad()) out.push_back(&a.a);
      if (a.b.requires_grad()) out.push_back(&a.b);
    }
    return out;
  }
};

/// Post-softmax attention probabilities, indexed (layer, head, query, key).
struct AttentionRecord {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t seq_len = 0;
  std::vector<double> probs;

  AttentionRecord() = default;
  AttentionRecord(std::size_t layers, std::size_t heads, std::size_t len)
      : n_layers(layers), n_heads(heads), seq_len(len), probs(layers * heads * len * len, 0.0) {}

  double at(std::size_t l, std::size_t h, std::size_t q, std::size_t k) const {
    return probs[((l * n_heads + h) * seq_len + q) * seq_len + k];
  }
  double* head(std::size_t l, std::size_t h) { return probs.data() + (l * n_heads + h) * seq_len * seq_len; }
};

inline const LoraAdapter* find_adapter(std::span<const LoraAdapter> adapters, std::size_t layer,
                                       Projection target) {
  for (const auto& a : adapters) {
    if (a.layer == layer && a.target == target) return &a;
  }
  return nullptr;
}

namespace detail {

inline void require_finite(std::span<const double> values, const std::string& where) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError("forward: non-finite activation " + where);
  }
}

inline Var project(Tape& tape, Var x, const Tensor& weight, const LoraAdapter* adapter) {
  Var y = ops::matmul(x, tape.param(weight));
  if (!adapter) return y;
  Var down = ops::matmul(x, ops::transpose(tape.param(adapter->a)));
  Var up = ops::matmul(down, ops::transpose(tape.param(adapter->b)));
  return ops::add(y, ops::scale(up, adapter->scaling()));
}

}  // namespace detail

/// Builds the forward graph on `tape` and returns the logits, shape
/// (seq_len, vocab). Parameters are bound with Tape::param, so the ones
/// flagged requires_grad collect gradients. When `record` is non-null it
/// receives every head's attention probabilities.
inline Var forward_graph(Tape& tape, const ModelWeights& w, std::span<const LoraAdapter> adapters,
                         const PromptLayout& layout, const Patches& patches,
                         AttentionRecord* record = nullptr) {
  const ModelConfig& c = w.config;
  layout.validate(c);
  if (patches.vectors.dim(0) != layout.visual.size() || patches.vectors.dim(1) != c.patch_dim()) {
    throw ShapeError("forward: patch tensor " + shape_str(patches.vectors.shape()) +
                     " does not match layout/config");
  }
  const std::size_t n = layout.size();
  const std::size_t hd = c.head_dim;

  Var table = tape.param(w.token_embedding);
  const std::span<const TokenId> ids(layout.tokens);
  Var before = ops::embedding(table, ids.subspan(0, layout.visual.begin));
  Var visual = ops::add(ops::matmul(tape.constant(patches.vectors), tape.param(w.patch_proj)),
                        tape.param(w.patch_bias));
  Var after = ops::embedding(table, ids.subspan(layout.visual.end));
  Var x = ops::concat({before, visual, after}, 0);
  x = ops::add(x, ops::slice(tape.param(w.position_embedding), 0, 0, n));

  Tensor mask({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) mask.at(i, j) = -std::numeric_limits<double>::infinity();
  Var causal = tape.constant(mask);
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

  if (record) *record = AttentionRecord(c.n_layers, c.n_heads, n);

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const LayerWeights& L = w.layers[l];
    Var h = ops::layer_norm(x, tape.param(L.ln1_gamma), tape.param(L.ln1_beta));
    Var q = detail::project(tape, h, L.wq, find_adapter(adapters, l, Projection::query));
    Var k = detail::project(tape, h, L.wk, find_adapter(adapters, l, Projection::key));
    Var v = detail::project(tape, h, L.wv, find_adapter(adapters, l, Projection::value));
    std::vector<Var> heads;
    heads.reserve(c.n_heads);
    for (std::size_t head = 0; head < c.n_heads; ++head) {
      Var qh = ops::slice(q, 1, head * hd, (head + 1) * hd);
      Var kh = ops::slice(k, 1, head * hd, (head + 1) * hd);
      Var vh = ops::slice(v, 1, head * hd, (head + 1) * hd);
      Var scores = ops::add(ops::scale(ops::matmul(qh, ops::transpose(kh)), inv_sqrt_hd), causal);
      Var probs = ops::softmax_rows(scores);
      if (record) {
        const auto pv = probs.value();
        std::copy(pv.begin(), pv.end(), record->head(l, head));
      }
      heads.push_back(ops::matmul(probs, vh));
    }
    Var attn = ops::matmul(ops::concat(heads, 1), tape.param(L.wo));
    x = ops::add(x, attn);
    Var h2 = ops::layer_norm(x, tape.param(L.ln2_gamma), tape.param(L.ln2_beta));
    Var ff = ops::add(ops::matmul(h2, tape.param(L.ffn_w1)), tape.param(L.ffn_b1));
    ff = ops::add(ops::matmul(ops::gelu(ff), tape.param(L.ffn_w2)), tape.param(L.ffn_b2));
    x = ops::add(x, ff);
    detail::require_finite(x.value(), "in layer " + std::to_string(l));
  }
  x = ops::layer_norm(x, tape.param(w.final_gamma), tape.param(w.final_beta));
  Var logits = ops::matmul(x, tape.param(w.output_head));
  detail::require_finite(logits.value(), "in output logits");
  return logits;
}

inline Var forward_graph(Tape& tape, const Model& model, const PromptLayout& layout,
                         const Patches& patches, AttentionRecord* record = nullptr) {
  return forward_graph(tape, model.base, model.adapters, layout, patches, record);
}

struct ForwardResult {
  Tensor logits;  // (seq_len, vocab)
  std::optional<AttentionRecord> attention;
};

/// Inference-only forward pass. Safe to call concurrently on shared weights.
inline ForwardResult forward(const ModelWeights& weights, std::span<const LoraAdapter> adapters,
                             const PromptLayout& layout, const Image& image,
                             bool record_attention = false) {
  const Patches patches = patchify(image, weights.config);
  Tape tape(false);
  ForwardResult result;
  AttentionRecord record;
  Var logits = forward_graph(tape, weights, adapters, layout, patches,
                             record_attention ? &record : nullptr);
  result.logits = logits.tensor();
  if (record_attention) result.attention = std::move(record);
  return result;
}

inline ForwardResult forward(const Model& model, const PromptLayout& layout, const Image& image,
                             bool record_attention = false) {
  return forward(model.base, model.adapters, layout, image, record_attention);
}

inline ForwardResult forward(const ModelWeights& weights, const PromptLayout& layout,
                             const Image& image, bool record_attention = false) {
  return forward(weights, {}, layout, image, record_attention);
}

}  // namespace hiprobe
