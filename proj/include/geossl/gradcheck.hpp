#pragma once

#include <cmath>
#include <functional>

#include "geossl/tensor.hpp"

namespace geossl {

// Compares the analytic gradient of scalar f at x against central differences.
// Returns max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8).
inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                double eps) {
  if (!(eps > 0.0)) throw TensorError("finite_diff_check: eps must be positive");
  Tensor leaf = Tensor::from(x.shape(), x.data(), true);
  Tensor y = f(leaf);
  if (y.numel() != 1) throw TensorError("finite_diff_check: f must return a scalar");
  backward(y);
  std::vector<double> analytic(leaf.numel(), 0.0);
  if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());

  auto eval = [&](std::size_t i, double delta) {
    Tensor probe = Tensor::from(x.shape(), x.data(), false);
    probe.mutable_data()[i] += delta;
    const double v = f(probe).item();
    if (!std::isfinite(v)) throw TensorError("finite_diff_check: non-finite f evaluation");
    return v;
  };

  double worst = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double numeric = (eval(i, eps) - eval(i, -eps)) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace geossl
