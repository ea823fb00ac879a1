#pragma once

#include <algorithm>
#include <cstdint>
#include <exception>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "hiprobe/analysis/stats.hpp"
#include "hiprobe/autodiff/rng.hpp"
#include "hiprobe/data/sample.hpp"
#include "hiprobe/data/units.hpp"
#include "hiprobe/error.hpp"
#include "hiprobe/model/model.hpp"
#include "hiprobe/model/prompt.hpp"

namespace hiprobe {

inline constexpr double kDefaultCoverage = 0.25;

/// Row-major 0/1 grid over visual tokens.
struct BitGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bits;

  BitGrid() = default;
  BitGrid(std::size_t r, std::size_t c) : rows(r), cols(c), bits(r * c, 0) {}
  BitGrid(std::size_t r, std::size_t c, std::vector<std::uint8_t> b) : rows(r), cols(c), bits(std::move(b)) {
    if (bits.size() != r * c) throw ShapeError("BitGrid: " + std::to_string(bits.size()) + " bits for " +
                                               std::to_string(r) + "x" + std::to_string(c));
  }

  std::uint8_t at(std::size_t r, std::size_t c) const { return bits[r * cols + c]; }
  std::size_t popcount() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }

  friend bool operator==(const BitGrid&, const BitGrid&) = default;
};

/// Token grid of an object mask: a token is set when at least `coverage` of its patch is object.
inline BitGrid project_mask(const BinaryMask& mask, std::size_t patch_size, double coverage = kDefaultCoverage) {
  if (patch_size == 0 || mask.width % patch_size != 0 || mask.height % patch_size != 0) {
    throw ShapeError("project_mask: mask " + std::to_string(mask.width) + "x" + std::to_string(mask.height) +
                     " is not divisible into patches of " + std::to_string(patch_size));
  }
  if (!(coverage > 0 && coverage <= 1)) throw InvalidArgument("project_mask: coverage must be in (0, 1]");
  BitGrid out(mask.height / patch_size, mask.width / patch_size);
  const double area = static_cast<double>(patch_size * patch_size);
  for (std::size_t pr = 0; pr < out.rows; ++pr) {
    for (std::size_t pc = 0; pc < out.cols; ++pc) {
      std::size_t on = 0;
      for (std::size_t y = 0; y < patch_size; ++y) {
        for (std::size_t x = 0; x < patch_size; ++x) on += mask.at(pc * patch_size + x, pr * patch_size + y);
      }
      out.bits[pr * out.cols + pc] = static_cast<double>(on) / area >= coverage ? 1 : 0;
    }
  }
  return out;
}

/// Caption-to-image attention per head: (n_layers, n_heads, rows, cols).
struct HeadAttentionGrid {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  std::span<const double> grid(std::size_t layer, std::size_t head) const {
    return std::span<const double>(values).subspan((layer * n_heads + head) * rows * cols, rows * cols);
  }
};

inline HeadAttentionGrid extract_caption_attention(const AttentionRecord& record, const PromptLayout& layout) {
  if (layout.caption.empty()) throw InvalidArgument("extract_caption_attention: empty caption range");
  if (layout.visual.empty()) throw InvalidArgument("extract_caption_attention: empty visual range");
  if (layout.caption.end > record.seq_len || layout.visual.end > record.seq_len) {
    throw ShapeError("extract_caption_attention: layout ranges exceed recorded sequence length " +
                     std::to_string(record.seq_len));
  }
  if (layout.grid_rows * layout.grid_cols != layout.visual.size()) {
    throw ShapeError("extract_caption_attention: visual range does not fill the token grid");
  }
  HeadAttentionGrid out{record.n_layers, record.n_heads, layout.grid_rows, layout.grid_cols, {}};
  out.values.assign(record.n_layers * record.n_heads * layout.visual.size(), 0.0);
  const double inv = 1.0 / static_cast<double>(layout.caption.size());
  for (std::size_t l = 0; l < record.n_layers; ++l) {
    for (std::size_t h = 0; h < record.n_heads; ++h) {
      double* dst = out.values.data() + (l * record.n_heads + h) * layout.visual.size();
      for (std::size_t q = layout.caption.begin; q < layout.caption.end; ++q) {
        for (std::size_t v = 0; v < layout.visual.size(); ++v) dst[v] += record.at(l, h, q, layout.visual.begin + v);
      }
      for (std::size_t v = 0; v < layout.visual.size(); ++v) dst[v] *= inv;
    }
  }
  return out;
}

/// 1 where the value is strictly above the grid mean.
inline std::vector<std::uint8_t> binarize(std::span<const double> grid) {
  if (grid.empty()) throw InvalidArgument("binarize: empty grid");
  std::vector<std::uint8_t> out(grid.size(), 0);
  // A rounded mean can land just below a constant value.
  const auto [lo, hi] = std::minmax_element(grid.begin(), grid.end());
  if (*lo == *hi) return out;
  const double mean = std::accumulate(grid.begin(), grid.end(), 0.0) / static_cast<double>(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) out[i] = grid[i] > mean ? 1 : 0;
  return out;
}

/// Jaccard index of two binary grids; 0 when both are empty.
inline double iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) {
    throw ShapeError("iou: grids of " + std::to_string(a.size()) + " and " + std::to_string(b.size()) + " cells");
  }
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += static_cast<std::size_t>(a[i] * b[i]);
    uni += (a[i] + b[i] > 0) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double iou(const BitGrid& a, const BitGrid& b) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw ShapeError("iou: grid shapes " + std::to_string(a.rows) + "x" + std::to_string(a.cols) + " and " +
                     std::to_string(b.rows) + "x" + std::to_string(b.cols));
  }
  return iou(std::span<const std::uint8_t>(a.bits), std::span<const std::uint8_t>(b.bits));
}

/// Head Impact scores, (n_layers x n_heads) row-major.
struct HiMatrix {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::vector<double> scores;
  std::size_t n_units = 0;

  double at(std::size_t layer, std::size_t head) const { return scores[layer * n_heads + head]; }

  std::vector<double> layer_means() const {
    std::vector<double> out(n_layers, 0.0);
    for (std::size_t l = 0; l < n_layers; ++l) {
      for (std::size_t h = 0; h < n_heads; ++h) out[l] += at(l, h);
      out[l] /= static_cast<double>(n_heads);
    }
    return out;
  }

  HiMatrix transposed() const {
    HiMatrix t{n_heads, n_layers, std::vector<double>(scores.size()), n_units};
    for (std::size_t l = 0; l < n_layers; ++l) {
      for (std::size_t h = 0; h < n_heads; ++h) t.scores[h * n_layers + l] = at(l, h);
    }
    return t;
  }
};

/// Per-head IoU of one (sample, object) unit.
inline std::vector<double> unit_iou(const Model& model, const Sample& sample, std::size_t object_index,
                                    double coverage = kDefaultCoverage) {
  const ModelConfig& cfg = model.base.config;
  const PromptLayout layout = assemble_prompt(sample, object_index, PromptMode::caption, cfg);
  const ForwardResult fr = forward(model, layout, sample.image, true);
  const HeadAttentionGrid grids = extract_caption_attention(*fr.attention, layout);
  const BitGrid token_mask = project_mask(sample.objects[object_index].mask, cfg.patch_size, coverage);
  if (token_mask.rows != grids.rows || token_mask.cols != grids.cols) {
    throw ShapeError("unit_iou: token mask does not match the visual grid");
  }
  std::vector<double> out(cfg.n_layers * cfg.n_heads);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const auto bits = binarize(grids.grid(l, h));
      out[l * cfg.n_heads + h] = iou(bits, token_mask.bits);
    }
  }
  return out;
}

struct HiOptions {
  double coverage = kDefaultCoverage;
  std::size_t workers = 1;
};

/// Mean per-head IoU over every (sample, object) unit. Units are reduced in
/// (sample id, object index) order, so the result does not depend on input
/// order or worker count.
inline HiMatrix head_impact(const Model& model, const std::vector<const Sample*>& samples,
                            const HiOptions& options = {}) {
  const std::vector<CaptionUnit> units = caption_units(samples);
  if (units.empty()) throw InvalidArgument("head_impact: no scoring units");

  std::vector<std::vector<double>> per_unit(units.size());
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < units.size(); i += stride) {
      try {
        per_unit[i] = unit_iou(model, *units[i].sample, units[i].object, options.coverage);
      } catch (const NumericError& e) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::make_exception_ptr(NumericError("sample " + units[i].sample->id + ": " + e.what()));
        return;
      } catch (const Error& e) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::make_exception_ptr(Error("sample " + units[i].sample->id + ": " + e.what()));
        return;
      }
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(options.workers, 1, units.size());
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  const ModelConfig& cfg = model.base.config;
  HiMatrix hi{cfg.n_layers, cfg.n_heads, std::vector<double>(cfg.n_layers * cfg.n_heads, 0.0), units.size()};
  for (const auto& u : per_unit) {
    for (std::size_t i = 0; i < u.size(); ++i) hi.scores[i] += u[i];
  }
  for (auto& v : hi.scores) v /= static_cast<double>(units.size());
  return hi;
}

struct HiTests {
  KwResult layers;  // groups = layers, observations = head scores
  KwResult heads;   // groups = heads, observations = per-layer scores
};

inline HiTests layer_tests(const HiMatrix& hi) {
  std::vector<std::vector<double>> by_layer(hi.n_layers, std::vector<double>(hi.n_heads));
  std::vector<std::vector<double>> by_head(hi.n_heads, std::vector<double>(hi.n_layers));
  for (std::size_t l = 0; l < hi.n_layers; ++l) {
    for (std::size_t h = 0; h < hi.n_heads; ++h) {
      by_layer[l][h] = hi.at(l, h);
      by_head[h][l] = hi.at(l, h);
    }
  }
  return {kruskal_wallis(by_layer), kruskal_wallis(by_head)};
}

enum class LayerStrategy { top, bottom, random_excluding };

inline std::optional<LayerStrategy> parse_layer_strategy(const std::string& name) {
  if (name == "top") return LayerStrategy::top;
  if (name == "bottom") return LayerStrategy::bottom;
  if (name == "random") return LayerStrategy::random_excluding;
  return std::nullopt;
}

/// Layers ordered by mean Head Impact, highest first; equal means keep the lower index first.
inline std::vector<std::size_t> layers_by_score(const HiMatrix& hi) {
  const auto means = hi.layer_means();
  std::vector<std::size_t> order(hi.n_layers);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return means[a] > means[b]; });
  return order;
}

/// k layer indices, returned ascending. `random_excluding` draws from the
/// layers in neither the top k nor the bottom k.
inline std::vector<std::size_t> rank_layers(const HiMatrix& hi, std::size_t k, LayerStrategy strategy,
                                            std::uint64_t seed = 0) {
  if (k == 0 || k > hi.n_layers) {
    throw InvalidArgument("rank_layers: k = " + std::to_string(k) + " outside [1, " + std::to_string(hi.n_layers) + "]");
  }
  const auto desc = layers_by_score(hi);
  // Bottom takes the lowest means; among equal means the lower index still wins.
  std::vector<std::size_t> asc(hi.n_layers);
  std::iota(asc.begin(), asc.end(), 0);
  const auto means = hi.layer_means();
  std::stable_sort(asc.begin(), asc.end(), [&](std::size_t a, std::size_t b) { return means[a] < means[b]; });

  std::vector<std::size_t> out;
  switch (strategy) {
    case LayerStrategy::top:
      out.assign(desc.begin(), desc.begin() + static_cast<std::ptrdiff_t>(k));
      break;
    case LayerStrategy::bottom:
      out.assign(asc.begin(), asc.begin() + static_cast<std::ptrdiff_t>(k));
      break;
    case LayerStrategy::random_excluding: {
      std::vector<std::uint8_t> excluded(hi.n_layers, 0);
      for (std::size_t i = 0; i < k; ++i) excluded[desc[i]] = excluded[asc[i]] = 1;
      std::vector<std::size_t> pool;
      for (std::size_t l = 0; l < hi.n_layers; ++l) {
        if (!excluded[l]) pool.push_back(l);
      }
      if (pool.size() < k) {
        throw InvalidArgument("rank_layers: only " + std::to_string(pool.size()) +
                              " layers outside the top and bottom " + std::to_string(k) + ", need " +
                              std::to_string(k));
      }
      Rng rng(seed);
      for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
      out.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
      break;
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace hiprobe
