// SPDX-License-Identifier: Apache-2.0
#include "sefmap/optim.hpp"

#include <cmath>

namespace sefmap {

template <typename Real>
Optimizer<Real>::Optimizer(const TrainConfig& config, std::vector<Param<Real>*> params)
    : kind_(config.optimizer),
      beta1_(config.beta1),
      beta2_(config.beta2),
      eps_(config.adam_eps),
      wd_(config.weight_decay),
      momentum_(config.momentum),
      params_(std::move(params)) {
  for (Param<Real>* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(kind_ == OptimizerKind::AdamW ? p->value.shape() : Shape{0});
  }
}

template <typename Real>
void Optimizer<Real>::step(double lr) {
  ++t_;
  const double bc1 = 1 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Param<Real>& p = *params_[k];
    if (p.grad.size() != p.value.size()) p.zero_grad();
    Tensor<double>& m = m_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double w = p.value[i];
      const double g = p.grad[i];
      double next;
      if (kind_ == OptimizerKind::AdamW) {
        Tensor<double>& v = v_[k];
        m[i] = beta1_ * m[i] + (1 - beta1_) * g;
        v[i] = beta2_ * v[i] + (1 - beta2_) * g * g;
        const double mh = m[i] / bc1, vh = v[i] / bc2;
        next = w - lr * (mh / (std::sqrt(vh) + eps_) + wd_ * w);
      } else {
        const double gd = g + wd_ * w;
        m[i] = momentum_ * m[i] + gd;
        next = w - lr * m[i];
      }
      p.value[i] = static_cast<Real>(next);
    }
  }
}

double scheduled_lr(const TrainConfig& config, std::size_t step) {
  const auto milestone = static_cast<std::size_t>(std::llround(config.lr_decay_fraction * static_cast<double>(config.steps)));
  return step >= milestone ? config.lr * config.lr_decay_factor : config.lr;
}

template class Optimizer<float>;
template class Optimizer<double>;

}  // namespace sefmap
