// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations recorded on a Tape. All operations see their
// arguments as row-major matrices (rows = per-cell samples, cols = features).
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "sefmap/tape.hpp"

namespace sefmap::ops {

enum class ElementwiseKind { Multiply, Add, Subtract, Divide, Gelu, Exp, Log, Sqrt, Square, Relu };

// y = x W^T + b for every row of x; W is [out x in], b is [out].
template <typename Real>
Var<Real> linear(Var<Real> x, Var<Real> weight, std::optional<Var<Real>> bias = std::nullopt);

// a [n x k], b [m x k] -> a b^T [n x m]
template <typename Real>
Var<Real> matmul_nt(Var<Real> a, Var<Real> b);

// a [n x p], b [n x q] -> a^T b [p x q]
template <typename Real>
Var<Real> matmul_tn(Var<Real> a, Var<Real> b);

template <typename Real>
Var<Real> elementwise(ElementwiseKind kind, Var<Real> x, std::optional<Var<Real>> y = std::nullopt);

template <typename Real> Var<Real> add(Var<Real> a, Var<Real> b);
template <typename Real> Var<Real> sub(Var<Real> a, Var<Real> b);
template <typename Real> Var<Real> mul(Var<Real> a, Var<Real> b);
template <typename Real> Var<Real> div(Var<Real> a, Var<Real> b);
template <typename Real> Var<Real> gelu(Var<Real> x);
template <typename Real> Var<Real> exp(Var<Real> x);
template <typename Real> Var<Real> log(Var<Real> x);
template <typename Real> Var<Real> sqrt(Var<Real> x);
template <typename Real> Var<Real> square(Var<Real> x);
template <typename Real> Var<Real> relu(Var<Real> x);

// c * x + offset
template <typename Real>
Var<Real> affine(Var<Real> x, Real scale, Real offset = Real(0));

// bound * tanh(x / bound): smooth saturation into (-bound, bound).
template <typename Real>
Var<Real> soft_clamp(Var<Real> x, Real bound);

template <typename Real> Var<Real> softmax_rows(Var<Real> x);
template <typename Real> Var<Real> log_softmax_rows(Var<Real> x);

template <typename Real> Var<Real> concat_cols(std::span<const Var<Real>> parts);
template <typename Real> Var<Real> slice_cols(Var<Real> x, std::size_t start, std::size_t count);
template <typename Real> Var<Real> gather_rows(Var<Real> x, std::span<const std::size_t> index);
template <typename Real> Var<Real> reshape(Var<Real> x, Shape shape);
template <typename Real> Var<Real> stop_gradient(Var<Real> x);

template <typename Real> Var<Real> row_sum(Var<Real> x);   // [n x 1]
template <typename Real> Var<Real> row_mean(Var<Real> x);  // [n x 1]
template <typename Real> Var<Real> col_sum(Var<Real> x);   // [1 x m]
template <typename Real> Var<Real> col_mean(Var<Real> x);  // [1 x m]
template <typename Real> Var<Real> sum_all(Var<Real> x);   // [1 x 1]
template <typename Real> Var<Real> mean_all(Var<Real> x);  // [1 x 1]
template <typename Real> Var<Real> row_dot(Var<Real> a, Var<Real> b);  // [n x 1]

// Subtracts each column's mean.
template <typename Real> Var<Real> center_cols(Var<Real> x);
// H K H with H = I - 11^T/n for square K.
template <typename Real> Var<Real> double_center(Var<Real> k);
// [n x d] -> [n x n] squared euclidean distances between rows.
template <typename Real> Var<Real> pairwise_sqdist(Var<Real> x);
// Rows scaled to unit norm; eps guards the zero vector.
template <typename Real> Var<Real> normalize_rows(Var<Real> x, Real eps);

// sum_k w[:,k] * mus[k] row-wise. w is [n x K], each mu is [n x D].
template <typename Real>
Var<Real> mixture(Var<Real> weights, std::span<const Var<Real>> mus);

// Mean (optionally class-weighted) cross-entropy of softmax(logits) against
// integer labels. Weighted form: sum_i w_{y_i} CE_i / sum_i w_{y_i}.
template <typename Real>
Var<Real> softmax_cross_entropy(Var<Real> logits, std::span<const std::uint16_t> labels,
                                std::span<const Real> class_weights = {});

// Weighted sum of scalar terms.
template <typename Real>
Var<Real> weighted_sum(std::span<const Var<Real>> terms, std::span<const Real> weights);

}  // namespace sefmap::ops

namespace sefmap {

template <typename Real> Var<Real> operator+(Var<Real> a, Var<Real> b) { return ops::add(a, b); }
template <typename Real> Var<Real> operator-(Var<Real> a, Var<Real> b) { return ops::sub(a, b); }
template <typename Real> Var<Real> operator*(Var<Real> a, Var<Real> b) { return ops::mul(a, b); }

}  // namespace sefmap
