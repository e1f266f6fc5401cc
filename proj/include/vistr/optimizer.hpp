#pragma once

// AdamW with decoupled weight decay, two-group learning rates and global
// gradient-norm clipping.

#include "vistr/tensor.hpp"

namespace vistr {

template <typename S>
double global_grad_norm(std::vector<NamedTensor<S>>& params) {
  double sq = 0;
  for (auto& p : params)
    for (S g : p.tensor.grad_buffer()) sq += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(sq);
}

template <typename S>
void clip_grad_norm(std::vector<NamedTensor<S>>& params, double max_norm) {
  if (max_norm <= 0) return;
  double norm = global_grad_norm(params);
  if (norm <= max_norm || norm == 0) return;
  S scale = static_cast<S>(max_norm / norm);
  for (auto& p : params)
    for (S& g : p.tensor.grad_buffer()) g *= scale;
}

template <typename S>
class AdamW {
 public:
  struct Group {
    std::vector<Tensor<S>> params;
    double lr;
  };

  AdamW(std::vector<Group> groups, double weight_decay, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8)
      : groups_(std::move(groups)),
        weight_decay_(weight_decay),
        beta1_(beta1),
        beta2_(beta2),
        eps_(eps) {
    for (auto& g : groups_)
      for (auto& p : g.params) {
        m_.emplace_back(p.numel(), S(0));
        v_.emplace_back(p.numel(), S(0));
      }
  }

  // lr_scale implements the 10x schedule drop.
  void step(double lr_scale = 1.0) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    size_t slot = 0;
    for (auto& g : groups_) {
      double lr = g.lr * lr_scale;
      for (auto& p : g.params) {
        auto& value = p.values();
        auto& grad = p.grad_buffer();
        if (grad.empty()) {
          ++slot;
          continue;
        }
        auto& m = m_[slot];
        auto& v = v_[slot];
        for (size_t i = 0; i < value.size(); ++i) {
          double gi = static_cast<double>(grad[i]);
          double mi = beta1_ * static_cast<double>(m[i]) + (1 - beta1_) * gi;
          double vi = beta2_ * static_cast<double>(v[i]) + (1 - beta2_) * gi * gi;
          m[i] = static_cast<S>(mi);
          v[i] = static_cast<S>(vi);
          double mhat = mi / bc1;
          double vhat = vi / bc2;
          double update = mhat / (std::sqrt(vhat) + eps_) +
                          weight_decay_ * static_cast<double>(value[i]);
          value[i] = static_cast<S>(static_cast<double>(value[i]) - lr * update);
        }
        ++slot;
      }
    }
  }

  void zero_grad() {
    for (auto& g : groups_)
      for (auto& p : g.params) p.zero_grad();
  }

  int64_t steps_taken() const { return t_; }

 private:
  std::vector<Group> groups_;
  double weight_decay_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<S>> m_, v_;
};

}  // namespace vistr
