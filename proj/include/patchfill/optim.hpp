#pragma once

#include <cmath>
#include <vector>

#include "patchfill/nn.hpp"

namespace patchfill {

/// Piecewise learning-rate schedule: linear warmup from 0 to the peak over
/// `warmup` steps, then cosine decay to 0 at `max_steps`. Continuous at the
/// joint.
inline double lr_schedule(long step, long warmup, double peak, long max_steps) {
  if (warmup > 0 && step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (step >= max_steps) return 0.0;
  const double t = static_cast<double>(step - warmup) / static_cast<double>(max_steps - warmup);
  return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

/// Adam with optional decoupled weight decay (AdamW when decay > 0). Moment
/// buffers are keyed by parameter visitation order, which is fixed per model.
template <typename Scalar>
class AdamOptimizer {
 public:
  AdamOptimizer(double beta1, double beta2, double weight_decay = 0.0, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {}

  /// `visit_params` must call its argument as f(name, Tensor&) for every
  /// trainable tensor, in a stable order.
  template <class VisitFn>
  void step(VisitFn&& visit_params, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    std::size_t idx = 0;
    visit_params([&](const std::string&, Tensor<Scalar>& p) {
      if (idx == states_.size()) {
        states_.push_back({MatrixX<double>::Zero(p.v.rows(), p.v.cols()),
                           MatrixX<double>::Zero(p.v.rows(), p.v.cols())});
      }
      State& s = states_[idx++];
      s.m = beta1_ * s.m + (1.0 - beta1_) * p.g.template cast<double>();
      s.v = beta2_ * s.v + (1.0 - beta2_) * p.g.template cast<double>().cwiseAbs2();
      if (weight_decay_ > 0.0)
        p.v -= (lr * weight_decay_ * p.v.template cast<double>()).template cast<Scalar>();
      p.v -= (lr * (s.m / bc1).array() / ((s.v / bc2).array().sqrt() + eps_))
                 .matrix()
                 .template cast<Scalar>();
    });
  }

  long steps_taken() const { return t_; }

 private:
  struct State {
    MatrixX<double> m, v;
  };
  double beta1_, beta2_, weight_decay_, eps_;
  long t_ = 0;
  std::vector<State> states_;
};

template <typename Scalar, class VisitFn>
void zero_grads(VisitFn&& visit_params) {
  visit_params([](const std::string&, Tensor<Scalar>& p) { p.zero_grad(); });
}

}  // namespace patchfill
