// SPDX-License-Identifier: Apache-2.0
//
// Space regularizers on the subspace decomposition: HSIC decorrelation of the
// private projections from the opposite modality, per-channel correlation of
// the shared projections, and an InfoNCE term on the interaction codes.
#pragma once

#include <random>
#include <span>
#include <vector>

#include "sefmap/model.hpp"

namespace sefmap {

enum class HsicKernel { Linear, Rbf };

struct SpaceLossConfig {
  HsicKernel hsic_kernel = HsicKernel::Linear;
  std::size_t sample_cells = 256;
  double infonce_temperature = 0.5;
  std::size_t infonce_negatives = 8;

  void validate() const;
};

/// Biased estimator (1/n^2) tr(K H L H). Linear kernel: K = X X^T / d.
/// Rbf: exp(-|xi - xj|^2 / (2 s^2)) with s^2 the median off-diagonal squared
/// distance (held constant w.r.t. the inputs).
template <typename Real>
Var<Real> hsic(Var<Real> x, Var<Real> y, HsicKernel kernel = HsicKernel::Linear);

/// -(mean over channels of the Pearson correlation across rows). Channels
/// with no variance contribute 0.
template <typename Real>
Var<Real> shared_alignment(Var<Real> r_lidar, Var<Real> r_image, Real eps = Real(1e-8));

/// mean_p -log(exp(pos_p) / (exp(pos_p) + sum_j exp(neg_pj))) from scores
/// pos [n x 1] and neg [n x M] (M may be 0).
template <typename Real>
Var<Real> infonce_from_scores(Var<Real> positive, std::optional<Var<Real>> negatives);

/// Uniform draw of `count` negatives per anchor from the other rows.
std::vector<std::size_t> sample_negatives(std::size_t anchors, std::size_t count, std::mt19937_64& rng);

/// InfoNCE with phi(Int_p, l_p', v_p') = cos(Int_p, C[(A l_p') * (B v_p')]) / tau.
/// Candidate codes of other cells are re-derived from the raw features with
/// gradients blocked; `negatives` is [n x M] row-major indices (from
/// sample_negatives).
template <typename Real>
Var<Real> interaction_infonce(Var<Real> interaction_codes, Var<Real> lidar_cells, Var<Real> image_cells,
                              SubspaceParams<Real>& params, std::span<const std::size_t> negatives,
                              std::size_t negatives_per_anchor, Real temperature);

template <typename Real>
struct SpaceLossTerms {
  std::optional<Var<Real>> uni;
  std::optional<Var<Real>> shr;
  std::optional<Var<Real>> inter;
  Var<Real> total;
};

/// Estimates the three space terms on the same random cell subset of every
/// grid in the batch and averages over grids. Terms whose subspaces are not
/// part of the active expert set are omitted.
template <typename Real>
SpaceLossTerms<Real> space_loss(const ForwardResult<Real>& pass, SubspaceParams<Real>& params,
                                std::size_t grids, const SpaceLossConfig& config, std::mt19937_64& rng);

}  // namespace sefmap
