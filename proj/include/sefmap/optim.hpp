// SPDX-License-Identifier: Apache-2.0
//
// AdamW (decoupled weight decay) and SGD with momentum over a fixed
// parameter list.
#pragma once

#include <vector>

#include "sefmap/config.hpp"

namespace sefmap {

template <typename Real>
class Optimizer {
 public:
  Optimizer(const TrainConfig& config, std::vector<Param<Real>*> params);

  /// One update with learning rate lr from the gradients held in each Param.
  void step(double lr);

  std::size_t steps_taken() const { return t_; }
  std::vector<Tensor<double>>& first_moments() { return m_; }
  std::vector<Tensor<double>>& second_moments() { return v_; }
  void set_steps_taken(std::size_t t) { t_ = t; }

 private:
  OptimizerKind kind_;
  double beta1_, beta2_, eps_, wd_, momentum_;
  std::vector<Param<Real>*> params_;
  std::vector<Tensor<double>> m_;  // Adam first moment / SGD velocity
  std::vector<Tensor<double>> v_;  // Adam second moment (unused for SGD)
  std::size_t t_ = 0;
};

/// Step decay: lr, then lr * factor from round(fraction * steps) onwards.
double scheduled_lr(const TrainConfig& config, std::size_t step);

}  // namespace sefmap
