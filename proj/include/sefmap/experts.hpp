// SPDX-License-Identifier: Apache-2.0
//
// Expert heads, uncertainty-aware gating, the expert mixture and the
// usage-balance regularizer.
#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "sefmap/bev.hpp"

namespace sefmap {

enum class ExpertId { Lidar = 0, Image = 1, Shared = 2, Interaction = 3 };

inline constexpr std::array<ExpertId, 4> kAllExperts{ExpertId::Lidar, ExpertId::Image, ExpertId::Shared,
                                                     ExpertId::Interaction};

inline const char* expert_name(ExpertId k) {
  switch (k) {
    case ExpertId::Lidar: return "L";
    case ExpertId::Image: return "I";
    case ExpertId::Shared: return "S";
    default: return "Int";
  }
}

/// Subspace feature consumed by expert k.
template <typename Real>
Var<Real> expert_input(const SubspaceBundle<Real>& bundle, ExpertId k) {
  switch (k) {
    case ExpertId::Lidar: return bundle.lidar;
    case ExpertId::Image: return bundle.image;
    case ExpertId::Shared: return bundle.shared;
    default: return bundle.interaction;
  }
}

template <typename Real>
struct ExpertHead {
  ExpertId id = ExpertId::Lidar;
  LinearLayer<Real> mean_net;    // C -> D
  LinearLayer<Real> logvar_net;  // C -> D

  /// Mean weights N(0, 1/C); log-variance starts at exactly zero (sigma^2 = 1).
  static ExpertHead initialize(ExpertId id, std::size_t channels, std::size_t classes, std::mt19937_64& rng);

  template <typename F>
  void for_each_param(F&& f) {
    mean_net.for_each_param(f);
    logvar_net.for_each_param(f);
  }
};

template <typename Real>
struct ExpertOutput {
  Var<Real> mu;        // [n x D]
  Var<Real> logvar;    // [n x D], soft-clamped
  Var<Real> mean_var;  // [n x 1], (1/D) sum_d exp(logvar)
};

/// Log-variance saturates smoothly inside (-bound, bound) before exp.
inline constexpr double kLogvarBound = 6.0;

/// with_variance == false skips the log-variance net (plain gate).
template <typename Real>
ExpertOutput<Real> run_head(const Binder<Real>& bind, ExpertHead<Real>& head, Var<Real> z,
                            bool with_variance = true, Real logvar_bound = Real(kLogvarBound));

/// Uncertainty-aware gate: one linear layer over the concatenated subspace
/// features. Plain gate (ablation): linear -> GELU -> linear, no variance term.
template <typename Real>
struct GateNet {
  bool uncertainty_aware = true;
  std::optional<LinearLayer<Real>> linear;
  std::optional<Mlp<Real>> mlp;

  static GateNet initialize(bool uncertainty_aware, std::size_t experts, std::size_t channels,
                            std::mt19937_64& rng);

  template <typename F>
  void for_each_param(F&& f) {
    if (linear) linear->for_each_param(f);
    if (mlp) mlp->for_each_param(f);
  }
};

template <typename Real>
struct GateState {
  Var<Real> alpha;    // [n x K] gate logits
  Var<Real> logits;   // [n x K] alpha - beta * mean_var (== alpha for plain gate)
  Var<Real> weights;  // [n x K], rows on the simplex
  Var<Real> usage;    // [1 x K], mean weight per expert
};

/// w_p = softmax_k(alpha_p - beta * mean_var_p) from precomputed logits and
/// per-expert mean variances ([n x K] each).
template <typename Real>
GateState<Real> gate_from_logits(Var<Real> alpha, std::optional<Var<Real>> mean_var, Real beta);

template <typename Real>
GateState<Real> gate(const Binder<Real>& bind, GateNet<Real>& net, std::span<const Var<Real>> features,
                     std::span<const ExpertOutput<Real>> outputs, Real beta);

/// Per-cell convex combination of expert means.
template <typename Real>
Var<Real> mixture(std::span<const ExpertOutput<Real>> outputs, const GateState<Real>& gate);

/// sum_k (w_bar_k - 1/K)^2
template <typename Real>
Var<Real> balance_regularizer(const GateState<Real>& gate);

}  // namespace sefmap
