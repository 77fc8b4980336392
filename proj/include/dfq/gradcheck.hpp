#pragma once

#include <cmath>
#include <limits>

#include "dfq/tensor.hpp"

namespace dfq {

// Compares the tape gradient of a scalar function against central differences.
// `fn(tape, x)` must return a one-element tensor. Returns
//   max_i |analytic_i - numeric_i| / (|analytic_i| + 1e-8)
// and +inf if any evaluation produced a non-finite value.
template <typename S, typename Fn>
double finite_diff_check(Fn&& fn, const Tensor<S>& x, S eps) {
  Tensor<S> leaf = x.detach();
  leaf.set_requires_grad(true);
  Tape<S> tape;
  Tensor<S> root = fn(tape, leaf);
  if (!root.all_finite()) return std::numeric_limits<double>::infinity();
  tape.backward(root);
  Array<S> analytic = leaf.has_grad() ? leaf.grad() : Array<S>::Zero(x.numel());
  if (!analytic.allFinite()) return std::numeric_limits<double>::infinity();

  auto eval = [&](const Array<S>& values) {
    Tape<S> t;
    return static_cast<double>(fn(t, Tensor<S>(x.shape(), values)).item());
  };

  double worst = 0.0;
  Array<S> probe = x.data();
  for (Index i = 0; i < x.numel(); ++i) {
    const S orig = probe[i];
    probe[i] = orig + eps;
    const double plus = eval(probe);
    probe[i] = orig - eps;
    const double minus = eval(probe);
    probe[i] = orig;
    if (!std::isfinite(plus) || !std::isfinite(minus)) return std::numeric_limits<double>::infinity();
    const double numeric = (plus - minus) / (2.0 * static_cast<double>(eps));
    const double a = static_cast<double>(analytic[i]);
    worst = std::max(worst, std::abs(a - numeric) / (std::abs(a) + 1e-8));
  }
  return worst;
}

}  // namespace dfq
