#pragma once

// Differentiable operations over Tape values. Every function checks operand
// shapes, computes the forward value eagerly and records a closure that
// accumulates input gradients during Tape::backward.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "hiprobe/autodiff/tape.hpp"
#include "hiprobe/error.hpp"

namespace hiprobe::ops {

namespace detail {

inline Tape& same_tape(std::string_view op, Var a, Var b) {
  if (!a.valid() || a.tape() != b.tape()) {
    throw InvalidArgument(std::string(op) + ": operands belong to different tapes");
  }
  return *a.tape();
}

[[noreturn]] inline void shape_fail(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

[[noreturn]] inline void shape_fail(std::string_view op, const Shape& a, std::string_view why) {
  throw ShapeError(std::string(op) + ": shape " + shape_str(a) + " " + std::string(why));
}

inline void require_matrix(std::string_view op, const Shape& s) {
  if (s.size() != 2) shape_fail(op, s, "is not a matrix");
}

// out[m,n] += a[m,k] * b[k,n], all row-major.
inline void gemm_nn(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[m,k] += g[m,n] * b[k,n]^T, via a transposed copy of b so the inner loop is an axpy.
inline void gemm_nt(const double* g, const double* b, double* out, std::size_t m, std::size_t n,
                    std::size_t k) {
  std::vector<double> bt(n * k);
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  }
  gemm_nn(g, bt.data(), out, m, n, k);
}

// out[k,n] += a[m,k]^T * g[m,n]
inline void gemm_tn(const double* a, const double* g, double* out, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
    }
  }
}

inline double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

}  // namespace detail

/// a[m,k] @ b[k,n]
inline Var matmul(Var a, Var b) {
  Tape& tape = detail::same_tape("matmul", a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) detail::shape_fail("matmul", sa, sb);
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record({m, n}, std::move(out), {ia, ib}, [=](Tape& t, std::size_t self) {
    const double* g = t.node(self).grad.data();
    if (auto ga = t.grad_sink(ia); !ga.empty()) {
      detail::gemm_nt(g, t.node(ib).value.data(), ga.data(), m, n, k);
    }
    if (auto gb = t.grad_sink(ib); !gb.empty()) {
      detail::gemm_tn(t.node(ia).value.data(), g, gb.data(), m, k, n);
    }
  });
}

/// Elementwise sum. `b` may also be a vector matching the last axis of `a`,
/// in which case it is broadcast over the leading axes (bias add).
inline Var add(Var a, Var b) {
  Tape& tape = detail::same_tape("add", a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const auto av = a.value();
  const auto bv = b.value();
  const std::size_t ia = a.id(), ib = b.id();
  if (sa == sb) {
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return tape.record(sa, std::move(out), {ia, ib}, [=](Tape& t, std::size_t self) {
      const auto& g = t.node(self).grad;
      for (auto id : {ia, ib}) {
        if (auto s = t.grad_sink(id); !s.empty()) {
          for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i];
        }
      }
    });
  }
  if (sb.size() == 1 && !sa.empty() && sa.back() == sb[0]) {
    const std::size_t n = sb[0];
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i % n];
    return tape.record(sa, std::move(out), {ia, ib}, [=](Tape& t, std::size_t self) {
      const auto& g = t.node(self).grad;
      if (auto s = t.grad_sink(ia); !s.empty()) {
        for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i];
      }
      if (auto s = t.grad_sink(ib); !s.empty()) {
        for (std::size_t i = 0; i < g.size(); ++i) s[i % n] += g[i];
      }
    });
  }
  detail::shape_fail("add", sa, sb);
}

/// Elementwise (Hadamard) product of equal shapes.
inline Var mul(Var a, Var b) {
  Tape& tape = detail::same_tape("mul", a, b);
  if (a.shape() != b.shape()) detail::shape_fail("mul", a.shape(), b.shape());
  const auto av = a.value();
  const auto bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(a.shape(), std::move(out), {ia, ib}, [=](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    // Read values by id: when ia == ib both sinks alias the same buffer.
    if (auto s = t.grad_sink(ia); !s.empty()) {
      const auto& other = t.node(ib).value;
      for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i] * other[i];
    }
    if (auto s = t.grad_sink(ib); !s.empty()) {
      const auto& other = t.node(ia).value;
      for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i] * other[i];
    }
  });
}

inline Var scale(Var a, double factor) {
  Tape& tape = *a.tape();
  const auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  const std::size_t ia = a.id();
  return tape.record(a.shape(), std::move(out), {ia}, [=](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    auto s = t.grad_sink(ia);
    for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i] * factor;
  });
}

/// Sum of all elements, as a scalar.
inline Var sum(Var a) {
  Tape& tape = *a.tape();
  double total = 0.0;
  for (double v : a.value()) total += v;
  const std::size_t ia = a.id();
  return tape.record({}, {total}, {ia}, [=](Tape& t, std::size_t self) {
    const double g = t.node(self).grad[0];
    for (auto& s : t.grad_sink(ia)) s += g;
  });
}

/// Softmax along the last axis. Entries equal to -inf get probability exactly
/// zero; each row needs at least one finite entry.
inline Var softmax_rows(Var a) {
  Tape& tape = *a.tape();
  const Shape& sa = a.shape();
  if (sa.empty()) detail::shape_fail("softmax_rows", sa, "has no axis");
  const std::size_t n = sa.back();
  const std::size_t rows = a.value().size() / n;
  const auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * n;
    double* y = out.data() + r * n;
    const double mx = *std::max_element(x, x + n);
    if (!std::isfinite(mx)) throw NumericError("softmax_rows: row " + std::to_string(r) + " has no finite entry");
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  const std::size_t ia = a.id();
  return tape.record(sa, std::move(out), {ia}, [=](Tape& t, std::size_t self) {
    const auto& node = t.node(self);
    auto s = t.grad_sink(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = node.value.data() + r * n;
      const double* g = node.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) s[r * n + j] += y[j] * (g[j] - dot);
    }
  });
}

/// Layer normalization of each row of x[m,d], followed by gamma/beta.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  Tape& tape = detail::same_tape("layer_norm", x, gamma);
  detail::same_tape("layer_norm", x, beta);
  const Shape& sx = x.shape();
  detail::require_matrix("layer_norm", sx);
  const std::size_t m = sx[0], d = sx[1];
  if (gamma.shape() != Shape{d}) detail::shape_fail("layer_norm", sx, gamma.shape());
  if (beta.shape() != Shape{d}) detail::shape_fail("layer_norm", sx, beta.shape());
  const auto xv = x.value();
  const auto gv = gamma.value();
  const auto bv = beta.value();
  std::vector<double> out(m * d);
  std::vector<double> xhat(m * d);
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mean) * inv_std[i];
      out[i * d + j] = xhat[i * d + j] * gv[j] + bv[j];
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return tape.record(sx, std::move(out), {ix, ig, ib},
                     [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                               std::size_t self) {
                       const auto& g = t.node(self).grad;
                       const auto& gam = t.node(ig).value;
                       auto sx_ = t.grad_sink(ix);
                       auto sg = t.grad_sink(ig);
                       auto sb = t.grad_sink(ib);
                       for (std::size_t i = 0; i < m; ++i) {
                         const double* gr = g.data() + i * d;
                         const double* xh = xhat.data() + i * d;
                         if (!sg.empty()) {
                           for (std::size_t j = 0; j < d; ++j) sg[j] += gr[j] * xh[j];
                         }
                         if (!sb.empty()) {
                           for (std::size_t j = 0; j < d; ++j) sb[j] += gr[j];
                         }
                         if (!sx_.empty()) {
                           double mean_dy = 0.0, mean_dy_xh = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dy = gr[j] * gam[j];
                             mean_dy += dy;
                             mean_dy_xh += dy * xh[j];
                           }
                           mean_dy /= static_cast<double>(d);
                           mean_dy_xh /= static_cast<double>(d);
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dy = gr[j] * gam[j];
                             sx_[i * d + j] += inv_std[i] * (dy - mean_dy - xh[j] * mean_dy_xh);
                           }
                         }
                       }
                     });
}

/// Exact GELU, x * Phi(x).
inline double gelu_scalar(double x) { return x * detail::std_normal_cdf(x); }

inline Var gelu(Var a) {
  Tape& tape = *a.tape();
  const auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_scalar(av[i]);
  const std::size_t ia = a.id();
  return tape.record(a.shape(), std::move(out), {ia}, [=](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    const auto& x = t.node(ia).value;
    auto s = t.grad_sink(ia);
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
      s[i] += g[i] * (detail::std_normal_cdf(x[i]) + x[i] * pdf);
    }
  });
}

/// Rows of table[V,d] selected by `ids`, giving [ids.size(), d].
inline Var embedding(Var table, std::span<const std::size_t> ids) {
  Tape& tape = *table.tape();
  const Shape& st = table.shape();
  detail::require_matrix("embedding", st);
  if (ids.empty()) detail::shape_fail("embedding", st, "looked up with no ids");
  const std::size_t vocab = st[0], d = st[1];
  const auto tv = table.value();
  std::vector<std::size_t> rows(ids.begin(), ids.end());
  std::vector<double> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(rows[i]) + " outside table " +
                       shape_str(st));
    }
    std::copy_n(tv.data() + rows[i] * d, d, out.data() + i * d);
  }
  const std::size_t it = table.id();
  const std::size_t n = rows.size();
  return tape.record({n, d}, std::move(out), {it},
                     [=, rows = std::move(rows)](Tape& t, std::size_t self) {
                       const auto& g = t.node(self).grad;
                       auto s = t.grad_sink(it);
                       for (std::size_t i = 0; i < rows.size(); ++i) {
                         for (std::size_t j = 0; j < d; ++j) s[rows[i] * d + j] += g[i * d + j];
                       }
                     });
}

inline Var transpose(Var a) {
  Tape& tape = *a.tape();
  const Shape& sa = a.shape();
  detail::require_matrix("transpose", sa);
  const std::size_t m = sa[0], n = sa[1];
  const auto av = a.value();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  const std::size_t ia = a.id();
  return tape.record({n, m}, std::move(out), {ia}, [=](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    auto s = t.grad_sink(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) s[i * n + j] += g[j * m + i];
  });
}

inline Var reshape(Var a, Shape shape) {
  Tape& tape = *a.tape();
  if (shape_numel(shape) != a.value().size()) detail::shape_fail("reshape", a.shape(), shape);
  const auto av = a.value();
  std::vector<double> out(av.begin(), av.end());
  const std::size_t ia = a.id();
  return tape.record(std::move(shape), std::move(out), {ia}, [=](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    auto s = t.grad_sink(ia);
    for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i];
  });
}

/// Concatenation of matrices along axis 0 (rows) or 1 (columns).
inline Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
  Tape& tape = *parts[0].tape();
  const Shape& s0 = parts[0].shape();
  detail::require_matrix("concat", s0);
  std::vector<std::size_t> ids;
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const Var& p : parts) {
    detail::same_tape("concat", parts[0], p);
    const Shape& sp = p.shape();
    detail::require_matrix("concat", sp);
    if (sp[1 - axis] != s0[1 - axis]) detail::shape_fail("concat", s0, sp);
    ids.push_back(p.id());
    extents.push_back(sp[axis]);
    total += sp[axis];
  }
  const std::size_t rows = axis == 0 ? total : s0[0];
  const std::size_t cols = axis == 0 ? s0[1] : total;
  std::vector<double> out(rows * cols);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].value();
    const std::size_t pr = axis == 0 ? extents[k] : rows;
    const std::size_t pc = axis == 0 ? cols : extents[k];
    for (std::size_t i = 0; i < pr; ++i)
      for (std::size_t j = 0; j < pc; ++j) {
        const std::size_t oi = axis == 0 ? i + offset : i;
        const std::size_t oj = axis == 0 ? j : j + offset;
        out[oi * cols + oj] = pv[i * pc + j];
      }
    offset += extents[k];
  }
  return tape.record({rows, cols}, std::move(out), ids,
                     [=](Tape& t, std::size_t self) {
                       const auto& g = t.node(self).grad;
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < ids.size(); ++k) {
                         const std::size_t pr = axis == 0 ? extents[k] : rows;
                         const std::size_t pc = axis == 0 ? cols : extents[k];
                         if (auto s = t.grad_sink(ids[k]); !s.empty()) {
                           for (std::size_t i = 0; i < pr; ++i)
                             for (std::size_t j = 0; j < pc; ++j) {
                               const std::size_t oi = axis == 0 ? i + off : i;
                               const std::size_t oj = axis == 0 ? j : j + off;
                               s[i * pc + j] += g[oi * cols + oj];
                             }
                         }
                         off += extents[k];
                       }
                     });
}

inline Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

/// Half-open range [begin, end) of a matrix along `axis`.
inline Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  Tape& tape = *a.tape();
  const Shape& sa = a.shape();
  detail::require_matrix("slice", sa);
  if (axis > 1 || begin >= end || end > sa[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") on axis " + std::to_string(axis) + " invalid for shape " + shape_str(sa));
  }
  const std::size_t rows = sa[0], cols = sa[1];
  const std::size_t out_rows = axis == 0 ? end - begin : rows;
  const std::size_t out_cols = axis == 0 ? cols : end - begin;
  const std::size_t r0 = axis == 0 ? begin : 0;
  const std::size_t c0 = axis == 0 ? 0 : begin;
  const auto av = a.value();
  std::vector<double> out(out_rows * out_cols);
  for (std::size_t i = 0; i < out_rows; ++i)
    for (std::size_t j = 0; j < out_cols; ++j) out[i * out_cols + j] = av[(i + r0) * cols + j + c0];
  const std::size_t ia = a.id();
  return tape.record({out_rows, out_cols}, std::move(out), {ia}, [=](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    auto s = t.grad_sink(ia);
    for (std::size_t i = 0; i < out_rows; ++i)
      for (std::size_t j = 0; j < out_cols; ++j) s[(i + r0) * cols + j + c0] += g[i * out_cols + j];
  });
}

/// Mean negative log-likelihood of `targets[i]` under softmax(logits[rows[i]]).
/// Only the designated rows contribute; at least one is required.
inline Var cross_entropy(Var logits, std::span<const std::size_t> rows,
                         std::span<const std::size_t> targets) {
  Tape& tape = *logits.tape();
  const Shape& sl = logits.shape();
  detail::require_matrix("cross_entropy", sl);
  if (rows.size() != targets.size()) {
    throw ShapeError("cross_entropy: " + std::to_string(rows.size()) + " rows but " +
                     std::to_string(targets.size()) + " targets");
  }
  if (rows.empty()) throw InvalidArgument("cross_entropy: no positions selected for the loss");
  const std::size_t n = sl[0], vocab = sl[1];
  const auto lv = logits.value();
  std::vector<double> probs(rows.size() * vocab);
  double total = 0.0;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= n || targets[k] >= vocab) {
      throw ShapeError("cross_entropy: position or target out of range for shape " + shape_str(sl));
    }
    const double* x = lv.data() + rows[k] * vocab;
    double* p = probs.data() + k * vocab;
    const double mx = *std::max_element(x, x + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      p[j] = std::exp(x[j] - mx);
      z += p[j];
    }
    for (std::size_t j = 0; j < vocab; ++j) p[j] /= z;
    total += -(x[targets[k]] - mx - std::log(z));
  }
  const double inv_count = 1.0 / static_cast<double>(rows.size());
  std::vector<std::size_t> r(rows.begin(), rows.end());
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  const std::size_t il = logits.id();
  return tape.record({}, {total * inv_count}, {il},
                     [=, probs = std::move(probs), r = std::move(r), tg = std::move(tg)](
                         Tape& t, std::size_t self) {
                       const double g = t.node(self).grad[0] * inv_count;
                       auto s = t.grad_sink(il);
                       for (std::size_t k = 0; k < r.size(); ++k) {
                         const double* p = probs.data() + k * vocab;
                         double* dst = s.data() + r[k] * vocab;
                         for (std::size_t j = 0; j < vocab; ++j) dst[j] += g * p[j];
                         dst[tg[k]] -= g;
                       }
                     });
}

}  // namespace hiprobe::ops
