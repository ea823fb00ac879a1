#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hiprobe/autodiff/rng.hpp"
#include "hiprobe/data/distractors.hpp"
#include "hiprobe/data/units.hpp"
#include "hiprobe/error.hpp"
#include "hiprobe/model/model.hpp"
#include "hiprobe/model/prompt.hpp"
#include "hiprobe/model/vocab.hpp"

namespace hiprobe {

/// Next-token logits (seq_len, vocab) for a prompt about a sample.
using LogitFn = std::function<Tensor(const PromptLayout&, const Sample&)>;

inline LogitFn model_logits(const Model& model) {
  return [&model](const PromptLayout& layout, const Sample& sample) {
    return forward(model, layout, sample.image).logits;
  };
}

inline constexpr double kMinProbability = 1e-300;

/// log-softmax of one logit row.
inline std::vector<double> log_softmax_row(std::span<const double> row) {
  const double mx = *std::max_element(row.begin(), row.end());
  double sum = 0;
  for (double v : row) sum += std::exp(v - mx);
  const double log_z = mx + std::log(sum);
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = row[i] - log_z;
  return out;
}

/// Mean and standard error derived from per-unit values.
struct MeanSe {
  double mean = 0;
  double se = 0;
};

inline MeanSe mean_se(const std::vector<double>& v) {
  if (v.empty()) throw InvalidArgument("mean_se: no values");
  MeanSe r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.se = std::sqrt(ss / static_cast<double>(v.size() - 1)) / std::sqrt(static_cast<double>(v.size()));
  }
  return r;
}

struct PerplexityResult {
  double value = 0;
  double se = 0;
  std::vector<double> unit_nll;  // per-unit mean negative log-probability
  bool clamped = false;          // some token probability fell below kMinProbability
};

/// exp of the mean of per-unit means; standard error by the delta method.
inline PerplexityResult perplexity_from_unit_nll(std::vector<double> unit_nll) {
  PerplexityResult r;
  const MeanSe m = mean_se(unit_nll);
  r.value = std::exp(m.mean);
  r.se = r.value * m.se;
  r.unit_nll = std::move(unit_nll);
  return r;
}

/// Mean negative log-probability of the caption tokens under teacher forcing.
inline double caption_nll(const Tensor& logits, const PromptLayout& layout, bool* clamped = nullptr) {
  if (layout.caption.empty()) throw InvalidArgument("caption_nll: layout has no caption tokens");
  const std::size_t vocab = logits.shape().at(1);
  const double floor = std::log(kMinProbability);
  double total = 0;
  for (std::size_t p = layout.caption.begin; p < layout.caption.end; ++p) {
    const auto row = logits.data().subspan((p - 1) * vocab, vocab);
    double lp = log_softmax_row(row)[layout.tokens[p]];
    if (!(lp >= floor)) {
      lp = floor;
      if (clamped) *clamped = true;
    }
    total -= lp;
  }
  return total / static_cast<double>(layout.caption.size());
}

inline PerplexityResult perplexity(const LogitFn& logits_of, const std::vector<CaptionUnit>& units,
                                   const ModelConfig& config) {
  if (units.empty()) throw InvalidArgument("perplexity: no units");
  std::vector<double> nll;
  bool clamped = false;
  for (const auto& u : units) {
    const auto layout = assemble_prompt(*u.sample, u.object, PromptMode::caption, config);
    nll.push_back(caption_nll(logits_of(layout, *u.sample), layout, &clamped));
  }
  PerplexityResult r = perplexity_from_unit_nll(std::move(nll));
  r.clamped = clamped;
  return r;
}

inline PerplexityResult perplexity(const Model& model, const std::vector<CaptionUnit>& units) {
  return perplexity(model_logits(model), units, model.base.config);
}

struct VqaRecord {
  std::string sample_id;
  std::size_t object = 0;
  std::size_t correct = 0;
  std::size_t predicted = 0;
  std::array<double, 4> probs{};  // renormalized over the four option labels
};

struct VqaResult {
  double accuracy = 0;
  double ans_prob = 0;
  double ans_prob_se = 0;
  std::vector<VqaRecord> records;
};

/// Label probabilities from the logit row that predicts the answer letter,
/// restricted to the four option labels and renormalized.
inline std::array<double, 4> option_probabilities(const Tensor& logits, const PromptLayout& layout) {
  if (!layout.label_position || *layout.label_position == 0) {
    throw InvalidArgument("option_probabilities: layout has no answer position");
  }
  const auto& vocab = Vocabulary::standard();
  const std::size_t width = logits.shape().at(1);
  const auto lp = log_softmax_row(logits.data().subspan((*layout.label_position - 1) * width, width));
  std::array<double, 4> p{};
  double z = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    p[i] = std::exp(lp[vocab.id(Vocabulary::kOptionLabels[i])]);
    z += p[i];
  }
  if (!(z > 0)) {
    // Every label underflowed; fall back to comparing log-probabilities.
    double mx = -INFINITY;
    for (std::size_t i = 0; i < 4; ++i) mx = std::max(mx, lp[vocab.id(Vocabulary::kOptionLabels[i])]);
    z = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      p[i] = std::exp(lp[vocab.id(Vocabulary::kOptionLabels[i])] - mx);
      z += p[i];
    }
  }
  for (auto& v : p) v /= z;
  return p;
}

/// Index of the largest value; the first one on ties.
inline std::size_t argmax_first(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Four options per unit: the object's caption at a uniformly drawn letter and
/// three distractors from `pool`. Per-unit randomness comes from one seeded stream.
inline std::vector<VqaOptions> vqa_options(const std::vector<CaptionUnit>& units, const std::vector<std::string>& pool,
                                           std::uint64_t seed) {
  Rng rng(seed);
  std::vector<VqaOptions> out;
  out.reserve(units.size());
  for (const auto& u : units) {
    const std::uint64_t unit_seed = rng.next_u64();
    VqaOptions o;
    o.correct = static_cast<std::size_t>(rng.below(4));
    const auto wrong = draw_distractors(*u.sample, u.object, pool, unit_seed);
    std::size_t w = 0;
    for (std::size_t i = 0; i < 4; ++i) o.captions[i] = i == o.correct ? u.sample->objects[u.object].caption : wrong[w++];
    out.push_back(std::move(o));
  }
  return out;
}

inline VqaResult vqa_eval(const LogitFn& logits_of, const std::vector<CaptionUnit>& units,
                          const std::vector<std::string>& pool, std::uint64_t seed, const ModelConfig& config) {
  if (units.empty()) throw InvalidArgument("vqa_eval: no units");
  const auto options = vqa_options(units, pool, seed);
  VqaResult r;
  std::vector<double> correct_probs;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < units.size(); ++i) {
    const auto& u = units[i];
    const auto layout = assemble_prompt(*u.sample, u.object, PromptMode::vqa, config, options[i]);
    VqaRecord rec;
    rec.sample_id = u.sample->id;
    rec.object = u.object;
    rec.correct = options[i].correct;
    rec.probs = option_probabilities(logits_of(layout, *u.sample), layout);
    rec.predicted = argmax_first(rec.probs);
    hits += rec.predicted == rec.correct;
    correct_probs.push_back(rec.probs[rec.correct]);
    r.records.push_back(rec);
  }
  r.accuracy = static_cast<double>(hits) / static_cast<double>(units.size());
  const MeanSe m = mean_se(correct_probs);
  r.ans_prob = m.mean;
  r.ans_prob_se = m.se;
  return r;
}

inline VqaResult vqa_eval(const Model& model, const std::vector<CaptionUnit>& units,
                          const std::vector<std::string>& pool, std::uint64_t seed) {
  return vqa_eval(model_logits(model), units, pool, seed, model.base.config);
}

struct EvalResult {
  std::string setup;
  double perplexity = 0;
  double perplexity_se = 0;
  double accuracy = 0;
  double ans_prob = 0;
  double ans_prob_se = 0;
  std::size_t n_units = 0;
  bool clamped = false;

  friend bool operator==(const EvalResult&, const EvalResult&) = default;
};

inline void to_json(nlohmann::json& j, const EvalResult& r) {
  j = nlohmann::json{{"setup", r.setup},       {"perplexity", r.perplexity},   {"perplexity_se", r.perplexity_se},
                     {"accuracy", r.accuracy}, {"ans_prob", r.ans_prob},       {"ans_prob_se", r.ans_prob_se},
                     {"n_units", r.n_units},   {"clamped", r.clamped}};
}

inline void from_json(const nlohmann::json& j, EvalResult& r) {
  j.at("setup").get_to(r.setup);
  j.at("perplexity").get_to(r.perplexity);
  j.at("perplexity_se").get_to(r.perplexity_se);
  j.at("accuracy").get_to(r.accuracy);
  j.at("ans_prob").get_to(r.ans_prob);
  j.at("ans_prob_se").get_to(r.ans_prob_se);
  j.at("n_units").get_to(r.n_units);
  j.at("clamped").get_to(r.clamped);
}

inline EvalResult evaluate(const std::string& setup, const LogitFn& logits_of, const std::vector<CaptionUnit>& units,
                           const std::vector<std::string>& pool, std::uint64_t seed, const ModelConfig& config) {
  const auto ppl = perplexity(logits_of, units, config);
  const auto vqa = vqa_eval(logits_of, units, pool, seed, config);
  return {setup, ppl.value, ppl.se, vqa.accuracy, vqa.ans_prob, vqa.ans_prob_se, units.size(), ppl.clamped};
}

inline EvalResult evaluate(const std::string& setup, const Model& model, const std::vector<CaptionUnit>& units,
                           const std::vector<std::string>& pool, std::uint64_t seed) {
  return evaluate(setup, model_logits(model), units, pool, seed, model.base.config);
}

enum class Metric { perplexity, accuracy, ans_prob };

inline const char* metric_name(Metric m) {
  switch (m) {
    case Metric::perplexity: return "perplexity";
    case Metric::accuracy: return "accuracy";
    case Metric::ans_prob: return "ans_prob";
  }
  return "?";
}

inline double metric_value(const EvalResult& r, Metric m) {
  switch (m) {
    case Metric::perplexity: return r.perplexity;
    case Metric::accuracy: return r.accuracy;
    case Metric::ans_prob: return r.ans_prob;
  }
  return 0;
}

inline constexpr std::array<Metric, 3> kMetrics{Metric::perplexity, Metric::accuracy, Metric::ans_prob};

struct ComparisonRow {
  EvalResult result;
  std::array<double, 3> abs_delta{};  // |setup - baseline| per metric
  std::array<bool, 3> flagged{};      // largest nonzero |delta| among the setups
};

struct Comparison {
  std::string baseline;
  std::vector<ComparisonRow> rows;

  std::optional<std::string> flagged_setup(Metric m) const {
    const auto i = static_cast<std::size_t>(m);
    for (const auto& r : rows) {
      if (r.flagged[i]) return r.result.setup;
    }
    return std::nullopt;
  }
};

/// Deltas against the baseline; per metric the setup with the largest
/// nonzero |delta| is flagged (earliest row on ties).
inline Comparison compare_setups(const std::vector<EvalResult>& results, const std::string& baseline = "original") {
  const auto base = std::find_if(results.begin(), results.end(), [&](const EvalResult& r) { return r.setup == baseline; });
  if (base == results.end()) throw InvalidArgument("compare_setups: baseline '" + baseline + "' missing");
  Comparison c;
  c.baseline = baseline;
  for (const auto& r : results) {
    ComparisonRow row{r, {}, {}};
    for (auto m : kMetrics) {
      const auto i = static_cast<std::size_t>(m);
      row.abs_delta[i] = std::abs(metric_value(r, m) - metric_value(*base, m));
    }
    c.rows.push_back(row);
  }
  for (auto m : kMetrics) {
    const auto i = static_cast<std::size_t>(m);
    ComparisonRow* best = nullptr;
    for (auto& row : c.rows) {
      if (row.result.setup == baseline) continue;
      if (row.abs_delta[i] > 0 && (!best || row.abs_delta[i] > best->abs_delta[i])) best = &row;
    }
    if (best) best->flagged[i] = true;
  }
  return c;
}

namespace detail {

inline std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace detail

inline std::string comparison_csv(const Comparison& c) {
  std::ostringstream os;
  os << "setup,perplexity,perplexity_se,accuracy,ans_prob,ans_prob_se,n_units,"
        "delta_perplexity,delta_accuracy,delta_ans_prob,flag_perplexity,flag_accuracy,flag_ans_prob\n";
  for (const auto& row : c.rows) {
    const auto& r = row.result;
    os << r.setup << ',' << detail::fixed(r.perplexity, 6) << ',' << detail::fixed(r.perplexity_se, 6) << ','
       << detail::fixed(r.accuracy, 6) << ',' << detail::fixed(r.ans_prob, 6) << ',' << detail::fixed(r.ans_prob_se, 6)
       << ',' << r.n_units;
    for (double d : row.abs_delta) os << ',' << detail::fixed(d, 6);
    for (bool f : row.flagged) os << ',' << (f ? 1 : 0);
    os << '\n';
  }
  return os.str();
}

/// Plain-text table; a '*' marks the flagged delta in each metric column.
inline std::string comparison_table(const Comparison& c) {
  std::vector<std::vector<std::string>> cells{
      {"setup", "perplexity", "accuracy", "ans_prob", "|d ppl|", "|d acc|", "|d ans|"}};
  for (const auto& row : c.rows) {
    const auto& r = row.result;
    std::vector<std::string> line{r.setup, detail::fixed(r.perplexity, 3) + " +- " + detail::fixed(r.perplexity_se, 3),
                                  detail::fixed(r.accuracy, 3),
                                  detail::fixed(r.ans_prob, 3) + " +- " + detail::fixed(r.ans_prob_se, 3)};
    for (std::size_t i = 0; i < 3; ++i) line.push_back(detail::fixed(row.abs_delta[i], 3) + (row.flagged[i] ? "*" : ""));
    cells.push_back(std::move(line));
  }
  std::vector<std::size_t> width(cells[0].size(), 0);
  for (const auto& line : cells)
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  std::ostringstream os;
  for (const auto& line : cells) {
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (i) os << "  ";
      if (i == 0) {
        os << line[i] << std::string(width[i] - line[i].size(), ' ');
      } else {
        os << std::string(width[i] - line[i].size(), ' ') << line[i];
      }
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace hiprobe
