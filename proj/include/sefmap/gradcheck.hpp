// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "sefmap/tape.hpp"

namespace sefmap {

/// Records a scalar loss on the given tape. Must depend on parameters only
/// through Tape::parameter so that perturbing Param::value is observed.
template <typename Real>
using LossBuilder = std::function<Var<Real>(Tape<Real>&)>;

/// Max over coordinates of |analytic - central| / (|analytic| + |central| + eps),
/// comparing reverse-mode gradients of `build` w.r.t. `param` against central
/// differences with step h.
template <typename Real>
Real finite_diff_check(const LossBuilder<Real>& build, Param<Real>& param, Real h, Real eps = Real(1e-6)) {
  if (!(h > Real(0))) throw ConfigError("finite_diff_check: step must be positive");
  auto evaluate = [&] {
    Tape<Real> tape;
    return build(tape).value().item();
  };
  const Real base = evaluate();
  if (evaluate() != base) {
    throw ConfigError("finite_diff_check: loss is not deterministic across identical evaluations");
  }

  const Tensor<Real> saved_grad = param.grad;
  param.zero_grad();
  {
    Tape<Real> tape;
    Var<Real> loss = build(tape);
    tape.backward(loss);
  }
  const Tensor<Real> analytic = param.grad;
  param.grad = saved_grad;

  Real worst = 0;
  for (std::size_t i = 0; i < param.value.size(); ++i) {
    const Real orig = param.value[i];
    param.value[i] = orig + h;
    const Real up = evaluate();
    param.value[i] = orig - h;
    const Real down = evaluate();
    param.value[i] = orig;
    const Real central = (up - down) / (Real(2) * h);
    const Real err = std::abs(analytic[i] - central) / (std::abs(analytic[i]) + std::abs(central) + eps);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace sefmap
