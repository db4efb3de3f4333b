// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the unit tests.
#pragma once

#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "sefmap/gradcheck.hpp"
#include "sefmap/ops.hpp"
#include "oracles.hpp"

namespace sefmap::test {

inline Tensor<double> rows_of(const Tensor<double>& t, std::size_t begin, std::size_t count) {
  Tensor<double> out(Shape{count, t.cols()});
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t j = 0; j < t.cols(); ++j) out.at(i, j) = t.at(begin + i, j);
  }
  return out;
}

/// Contracts an arbitrary-shaped output with fixed random weights so every
/// output coordinate reaches the scalar with a distinct sensitivity.
inline Var<double> project_to_scalar(Var<double> y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tape<double>& t = *y.tape;
  Var<double> w = t.constant(random_tensor(y.shape(), rng));
  return ops::sum_all(ops::mul(y, w));
}

/// Max relative error over all params for a loss built from them.
inline double max_fd_error(const LossBuilder<double>& build, std::vector<Param<double>*> params, double h = 1e-6) {
  double worst = 0;
  for (Param<double>* p : params) worst = std::max(worst, finite_diff_check<double>(build, *p, h));
  return worst;
}

}  // namespace sefmap::test
