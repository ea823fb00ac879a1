#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "hiprobe/autodiff/tape.hpp"
#include "hiprobe/error.hpp"

namespace hiprobe {

/// Scalar-valued function of one tensor, expressed on a tape.
using TapeFunction = std::function<Var(Tape&, Var)>;

/// Evaluates f at `point` without tracking gradients.
inline double evaluate_scalar(const TapeFunction& f, const Tensor& point) {
  Tape tape;
  Var y = f(tape, tape.constant(point));
  if (y.value().size() != 1) throw ShapeError("evaluate_scalar: function is not scalar-valued");
  return y.value()[0];
}

/// Reverse-mode gradient of f at `point`.
inline Tensor analytic_gradient(const TapeFunction& f, const Tensor& point) {
  Tape tape;
  Tensor x = point;
  x.set_requires_grad(true);
  Var y = f(tape, tape.param(x));
  tape.backward(y);
  return tape.grad_of(x);
}

/// Largest |analytic - central difference| / max(1, |analytic|) over all
/// coordinates of `point`.
inline double finite_diff_check(const TapeFunction& f, const Tensor& point, double step) {
  if (!(step > 0.0)) throw InvalidArgument("finite_diff_check: step must be positive");
  const Tensor analytic = analytic_gradient(f, point);
  Tensor probe = point;
  double worst = 0.0;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double x0 = point[i];
    probe[i] = x0 + step;
    const double up = evaluate_scalar(f, probe);
    probe[i] = x0 - step;
    const double down = evaluate_scalar(f, probe);
    probe[i] = x0;
    const double numeric = (up - down) / (2.0 * step);
    if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
      throw NumericError("finite_diff_check: non-finite value at coordinate " + std::to_string(i));
    }
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

}  // namespace hiprobe
