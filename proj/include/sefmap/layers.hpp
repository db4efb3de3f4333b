// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <string>

#include "sefmap/ops.hpp"

namespace sefmap {

/// Binds parameters onto a tape: tracked leaves for training, constants for
/// inference (no gradient closures are recorded downstream of constants).
template <typename Real>
struct Binder {
  Tape<Real>& tape;
  bool track = true;

  Var<Real> operator()(Param<Real>& p) const {
    return track ? tape.parameter(p) : tape.constant(p.value);
  }
  Var<Real> constant(Tensor<Real> t) const { return tape.constant(std::move(t)); }
};

/// Gaussian initializer N(0, scale^2), optionally added to the identity.
template <typename Real>
Tensor<Real> random_matrix(std::size_t rows, std::size_t cols, double scale, std::mt19937_64& rng,
                           bool identity = false) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor<Real> t(Shape{rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      double v = scale * normal(rng);
      if (identity && r == c) v += 1.0;
      t.at(r, c) = static_cast<Real>(v);
    }
  }
  return t;
}

/// Per-cell affine map (a 1x1 convolution over the grid).
template <typename Real>
struct LinearLayer {
  Param<Real> weight;
  std::optional<Param<Real>> bias;

  LinearLayer(const std::string& name, Tensor<Real> w, bool with_bias)
      : weight(name + ".W", std::move(w)) {
    if (with_bias) bias.emplace(name + ".b", Tensor<Real>(Shape{weight.value.shape()[0]}));
  }

  static LinearLayer random(const std::string& name, std::size_t out, std::size_t in, double scale,
                            std::mt19937_64& rng, bool with_bias = true, bool identity = false) {
    return LinearLayer(name, random_matrix<Real>(out, in, scale, rng, identity), with_bias);
  }

  std::size_t out_dim() const { return weight.value.shape()[0]; }
  std::size_t in_dim() const { return weight.value.shape()[1]; }

  Var<Real> operator()(const Binder<Real>& bind, Var<Real> x) {
    return ops::linear(x, bind(weight), bias ? std::optional<Var<Real>>(bind(*bias)) : std::nullopt);
  }

  template <typename F>
  void for_each_param(F&& f) {
    f(weight);
    if (bias) f(*bias);
  }
};

/// linear -> GELU -> linear.
template <typename Real>
struct Mlp {
  LinearLayer<Real> hidden;
  LinearLayer<Real> output;

  static Mlp random(const std::string& name, std::size_t in, std::size_t width, std::size_t out,
                    std::mt19937_64& rng) {
    return Mlp{LinearLayer<Real>::random(name + ".0", width, in, 1.0 / std::sqrt(double(in)), rng),
               LinearLayer<Real>::random(name + ".1", out, width, 1.0 / std::sqrt(double(width)), rng)};
  }

  Var<Real> operator()(const Binder<Real>& bind, Var<Real> x) {
    return output(bind, ops::gelu(hidden(bind, x)));
  }

  template <typename F>
  void for_each_param(F&& f) {
    hidden.for_each_param(f);
    output.for_each_param(f);
  }
};

}  // namespace sefmap
