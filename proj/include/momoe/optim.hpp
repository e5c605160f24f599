#pragma once

// Outer-loop trainers. These update model parameters from their gradients
// and have nothing to do with the momentum dynamics inside a forward pass.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "momoe/tensor.hpp"

namespace momoe {

class TrainingDivergence : public std::runtime_error {
 public:
  TrainingDivergence(const std::string& what, long layer = -1, long step = -1)
      : std::runtime_error(what), layer_(layer), step_(step) {}
  long layer() const { return layer_; }
  long step() const { return step_; }

 private:
  long layer_;
  long step_;
};

namespace detail {

inline void require_finite_grads(std::vector<Tensor>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) continue;
    for (double g : params[i].grad()) {
      if (!std::isfinite(g)) {
        throw TrainingDivergence("non-finite gradient in parameter " + std::to_string(i));
      }
    }
  }
}

}  // namespace detail

// p -= lr * grad. Parameters without a populated gradient are skipped.
inline void sgd_step(std::vector<Tensor>& params, double lr) {
  detail::require_finite_grads(params);
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    auto d = p.mutable_data();
    auto g = p.grad();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= lr * g[i];
  }
}

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW style)
};

// Bias-corrected Adam. Moment buffers are allocated on first use and keyed
// by position in the parameter list, so the list must keep its order.
class Adam {
 public:
  explicit Adam(AdamOptions opt = {}) : opt_(opt) {}

  const AdamOptions& options() const { return opt_; }
  void set_lr(double lr) { opt_.lr = lr; }
  long steps() const { return t_; }

  void step(std::vector<Tensor>& params) {
    detail::require_finite_grads(params);
    if (m_.empty()) {
      for (auto& p : params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw ContractError("adam: parameter list changed size");
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto d = params[k].mutable_data();
      if (m_[k].size() != d.size()) throw ContractError("adam: parameter shape changed");
      const bool has = params[k].has_grad();
      std::span<const double> g = has ? params[k].grad() : std::span<const double>();
      for (std::size_t i = 0; i < d.size(); ++i) {
        const double gi = has ? g[i] : 0.0;
        m_[k][i] = opt_.beta1 * m_[k][i] + (1.0 - opt_.beta1) * gi;
        v_[k][i] = opt_.beta2 * v_[k][i] + (1.0 - opt_.beta2) * gi * gi;
        const double mhat = m_[k][i] / c1;
        const double vhat = v_[k][i] / c2;
        d[i] -= opt_.lr * (mhat / (std::sqrt(vhat) + opt_.eps) + opt_.weight_decay * d[i]);
      }
    }
  }

 private:
  AdamOptions opt_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

inline void zero_grads(std::vector<Tensor>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace momoe
