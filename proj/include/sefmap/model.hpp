// SPDX-License-Identifier: Apache-2.0
//
// The fusion network: subspace decomposition (or a plain fusion layer when
// decomposition is ablated), one head per active expert, the gate, and the
// mixture prediction.
#pragma once

#include <map>
#include <optional>
#include <random>
#include <vector>

#include "sefmap/experts.hpp"

namespace sefmap {

enum class ExpertGroup { Full, PrivateOnly, CrossModalOnly, OnlyLidar, OnlyImage, OnlyShared, OnlyInteraction };

std::vector<ExpertId> experts_in_group(ExpertGroup group);

struct ModelConfig {
  std::size_t channels = 16;
  std::size_t classes = 4;
  std::size_t interaction_rank = 4;
  SubspaceWiring wiring = SubspaceWiring::AsWritten;
  bool enable_sd = true;
  bool enable_uag = true;
  ExpertGroup group = ExpertGroup::Full;
  double gate_beta = 1.0;

  std::vector<ExpertId> experts() const { return experts_in_group(group); }
  void validate() const;
};

/// Everything one forward pass produces, indexed consistently by active expert.
template <typename Real>
struct ForwardResult {
  Var<Real> lidar_in;
  Var<Real> image_in;
  std::optional<SubspaceBundle<Real>> bundle;  // absent when decomposition is ablated
  std::vector<ExpertId> experts;
  std::vector<Var<Real>> features;  // z^(k)
  std::vector<ExpertOutput<Real>> outputs;
  GateState<Real> gate;
  Var<Real> prediction;  // [n x D] class logits

  std::optional<std::size_t> slot(ExpertId k) const {
    for (std::size_t i = 0; i < experts.size(); ++i) {
      if (experts[i] == k) return i;
    }
    return std::nullopt;
  }
};

template <typename Real>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  /// lidar and image are [n x C] stacked cell features (any number of grids).
  ForwardResult<Real> forward(Tape<Real>& tape, const Tensor<Real>& lidar, const Tensor<Real>& image,
                              bool track = true);
  ForwardResult<Real> forward(const Binder<Real>& bind, Var<Real> lidar, Var<Real> image);

  SubspaceParams<Real>* subspace() { return subspace_ ? &*subspace_ : nullptr; }
  ExpertHead<Real>& head(ExpertId k);
  GateNet<Real>& gate_net() { return gate_; }

  /// Visits every parameter that can influence the forward output, in a
  /// stable order (the checkpoint and optimizer rely on it).
  template <typename F>
  void for_each_param(F&& f) {
    if (subspace_) subspace_->for_each_param(f);
    if (plain_fusion_) plain_fusion_->for_each_param(f);
    for (auto& h : heads_) {
      h.mean_net.for_each_param(f);
      if (config_.enable_uag) h.logvar_net.for_each_param(f);
    }
    gate_.for_each_param(f);
  }

  std::vector<Param<Real>*> params();
  void zero_grad();

 private:
  ModelConfig config_;
  std::optional<SubspaceParams<Real>> subspace_;
  std::optional<LinearLayer<Real>> plain_fusion_;
  std::vector<ExpertHead<Real>> heads_;
  GateNet<Real> gate_;
};

}  // namespace sefmap
