#pragma once

// Central-difference verification harness for the autodiff engine. Runs the
// analytic backward pass once, then perturbs each coordinate of x by +/- eps
// and compares. Intended for S = double.

#include <functional>

#include "vistr/tensor.hpp"

namespace vistr {

// Returns max over coordinates of |analytic - central_difference| / max(1, |analytic|).
template <typename S>
double gradient_check(const std::function<Tensor<S>(const Tensor<S>&)>& f,
                      const Tensor<S>& x, double eps) {
  if (eps <= 0) throw std::invalid_argument("gradient_check: eps must be positive");
  Tensor<S> leaf = Tensor<S>::from_data(x.shape(), x.values(), true);
  Tensor<S> y = f(leaf);
  if (y.numel() != 1)
    throw std::invalid_argument("gradient_check: f must return a scalar");
  y.backward();
  std::vector<S> analytic = leaf.grad().values();

  double max_err = 0.0;
  NoGradGuard ng;
  for (size_t i = 0; i < analytic.size(); ++i) {
    std::vector<S> vp = x.values();
    vp[i] += static_cast<S>(eps);
    std::vector<S> vm = x.values();
    vm[i] -= static_cast<S>(eps);
    double fp = static_cast<double>(f(Tensor<S>::from_data(x.shape(), std::move(vp))).item());
    double fm = static_cast<double>(f(Tensor<S>::from_data(x.shape(), std::move(vm))).item());
    double numeric = (fp - fm) / (2.0 * eps);
    double a = static_cast<double>(analytic[i]);
    double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace vistr
