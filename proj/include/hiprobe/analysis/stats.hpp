#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "hiprobe/error.hpp"

namespace hiprobe {

namespace detail {

// Lower regularized gamma P(a, x) by its power series; converges fast for x < a + 1.
inline double gamma_p_series(double a, double x) {
  double term = 1.0 / a;
  double sum = term;
  for (int n = 1; n < 10000; ++n) {
    term *= x / (a + n);
    sum += term;
    if (std::abs(term) < std::abs(sum) * 1e-17) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Upper regularized gamma Q(a, x) by continued fraction (modified Lentz), for x >= a + 1.
inline double gamma_q_fraction(double a, double x) {
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 10000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace detail

/// Upper regularized incomplete gamma Q(a, x).
inline double gamma_q(double a, double x) {
  if (!std::isfinite(a) || !std::isfinite(x)) throw NumericError("gamma_q: non-finite argument");
  if (a <= 0 || x < 0) throw InvalidArgument("gamma_q: need a > 0 and x >= 0");
  if (x == 0) return 1.0;
  if (x < a + 1.0) return std::clamp(1.0 - detail::gamma_p_series(a, x), 0.0, 1.0);
  return std::clamp(detail::gamma_q_fraction(a, x), 0.0, 1.0);
}

/// Survival function of the chi-square distribution.
inline double chi_square_sf(double x, double df) {
  if (!std::isfinite(x) || !std::isfinite(df)) throw NumericError("chi_square_sf: non-finite argument");
  if (x < 0 || df < 1) throw InvalidArgument("chi_square_sf: need x >= 0 and df >= 1");
  return gamma_q(df / 2.0, x / 2.0);
}

struct KwResult {
  double statistic = 0;  // tie-corrected H
  std::size_t df = 0;
  double p_value = 1;
  std::vector<std::size_t> group_sizes;
  double tie_correction = 1;  // 1 - sum(t^3 - t) / (N^3 - N)
  bool degenerate = false;    // every observation identical
};

/// Average ranks (1-based) with ties sharing the mean of their positions.
inline std::vector<double> average_ranks(const std::vector<double>& values, double* tie_sum = nullptr) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  double ties = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i + 1;
    while (j < order.size() && values[order[j]] == values[order[i]]) ++j;
    const double rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = rank;
    const double t = static_cast<double>(j - i);
    ties += t * t * t - t;
    i = j;
  }
  if (tie_sum) *tie_sum = ties;
  return ranks;
}

inline KwResult kruskal_wallis(const std::vector<std::vector<double>>& groups) {
  if (groups.size() < 2) throw InvalidArgument("kruskal_wallis: need at least 2 groups");
  KwResult r;
  std::vector<double> pooled;
  for (const auto& g : groups) {
    if (g.empty()) throw InvalidArgument("kruskal_wallis: every group needs at least one observation");
    for (double v : g) {
      if (!std::isfinite(v)) throw NumericError("kruskal_wallis: non-finite observation");
    }
    r.group_sizes.push_back(g.size());
    pooled.insert(pooled.end(), g.begin(), g.end());
  }
  const double n = static_cast<double>(pooled.size());
  if (pooled.size() < 3) throw InvalidArgument("kruskal_wallis: need at least 3 observations in total");
  r.df = groups.size() - 1;

  double tie_sum = 0;
  const auto ranks = average_ranks(pooled, &tie_sum);
  r.tie_correction = 1.0 - tie_sum / (n * n * n - n);
  if (r.tie_correction <= 0) {
    r.degenerate = true;
    r.tie_correction = 0;
    r.statistic = 0;
    r.p_value = 1;
    return r;
  }
  double rank_term = 0;
  std::size_t at = 0;
  for (const auto& g : groups) {
    double sum = 0;
    for (std::size_t i = 0; i < g.size(); ++i) sum += ranks[at + i];
    at += g.size();
    rank_term += sum * sum / static_cast<double>(g.size());
  }
  const double h = 12.0 / (n * (n + 1)) * rank_term - 3.0 * (n + 1);
  r.statistic = std::max(0.0, h / r.tie_correction);
  r.p_value = chi_square_sf(r.statistic, static_cast<double>(r.df));
  return r;
}

}  // namespace hiprobe
