// SPDX-License-Identifier: Apache-2.0
#include "sefmap/model.hpp"

#include <array>
#include <cmath>

namespace sefmap {

std::vector<ExpertId> experts_in_group(ExpertGroup group) {
  switch (group) {
    case ExpertGroup::Full: return {kAllExperts.begin(), kAllExperts.end()};
    case ExpertGroup::PrivateOnly: return {ExpertId::Lidar, ExpertId::Image};
    case ExpertGroup::CrossModalOnly: return {ExpertId::Shared, ExpertId::Interaction};
    case ExpertGroup::OnlyLidar: return {ExpertId::Lidar};
    case ExpertGroup::OnlyImage: return {ExpertId::Image};
    case ExpertGroup::OnlyShared: return {ExpertId::Shared};
    case ExpertGroup::OnlyInteraction: return {ExpertId::Interaction};
  }
  return {};
}

void ModelConfig::validate() const {
  validate_channels(channels, interaction_rank);
  if (classes < 2) throw ConfigError("need at least two classes");
  if (enable_uag && !(gate_beta > 0)) throw ConfigError("gate_beta must be positive");
}

template <typename Real>
Model<Real>::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t c = config_.channels;
  if (config_.enable_sd) {
    subspace_ = SubspaceParams<Real>::initialize(c, config_.interaction_rank, rng);
  } else {
    plain_fusion_ = LinearLayer<Real>::random("fusion.plain", c, 2 * c, 1.0 / std::sqrt(2.0 * c), rng);
  }
  for (ExpertId k : config_.experts()) heads_.push_back(ExpertHead<Real>::initialize(k, c, config_.classes, rng));
  gate_ = GateNet<Real>::initialize(config_.enable_uag, heads_.size(), c, rng);
}

template <typename Real>
ExpertHead<Real>& Model<Real>::head(ExpertId k) {
  for (auto& h : heads_) {
    if (h.id == k) return h;
  }
  throw ConfigError(std::string("expert ") + expert_name(k) + " is not active in this model");
}

template <typename Real>
std::vector<Param<Real>*> Model<Real>::params() {
  std::vector<Param<Real>*> out;
  for_each_param([&](Param<Real>& p) { out.push_back(&p); });
  return out;
}

template <typename Real>
void Model<Real>::zero_grad() {
  for_each_param([](Param<Real>& p) { p.zero_grad(); });
}

template <typename Real>
ForwardResult<Real> Model<Real>::forward(Tape<Real>& tape, const Tensor<Real>& lidar, const Tensor<Real>& image,
                                         bool track) {
  Binder<Real> bind{tape, track};
  return forward(bind, tape.constant(lidar), tape.constant(image));
}

template <typename Real>
ForwardResult<Real> Model<Real>::forward(const Binder<Real>& bind, Var<Real> lidar, Var<Real> image) {
  if (lidar.cols() != config_.channels || image.cols() != config_.channels || lidar.rows() != image.rows()) {
    throw ConfigError("model expects two [n x " + std::to_string(config_.channels) + "] inputs, got " +
                      shape_str(lidar.shape()) + " and " + shape_str(image.shape()));
  }
  ForwardResult<Real> out;
  out.lidar_in = lidar;
  out.image_in = image;
  out.experts = config_.experts();

  if (subspace_) {
    SubspaceMask mask{false, false, false, false};
    for (ExpertId k : out.experts) {
      mask.lidar |= k == ExpertId::Lidar;
      mask.image |= k == ExpertId::Image;
      mask.shared |= k == ExpertId::Shared;
      mask.interaction |= k == ExpertId::Interaction;
    }
    const auto proj = project(bind, *subspace_, lidar, image);
    out.bundle = decompose(bind, *subspace_, lidar, image, proj, config_.wiring, mask);
    for (ExpertId k : out.experts) out.features.push_back(expert_input(*out.bundle, k));
  } else {
    std::array<Var<Real>, 2> parts{lidar, image};
    Var<Real> fused = ops::gelu((*plain_fusion_)(bind, ops::concat_cols<Real>(parts)));
    out.features.assign(out.experts.size(), fused);
  }

  for (std::size_t i = 0; i < out.experts.size(); ++i) {
    out.outputs.push_back(run_head(bind, heads_[i], out.features[i], config_.enable_uag));
  }
  out.gate = gate<Real>(bind, gate_, out.features, out.outputs, static_cast<Real>(config_.gate_beta));
  out.prediction = mixture<Real>(out.outputs, out.gate);
  return out;
}

template class Model<float>;
template class Model<double>;

}  // namespace sefmap
