// SPDX-License-Identifier: Apache-2.0
#include "sefmap/experts.hpp"

#include <cmath>

namespace sefmap {

template <typename Real>
ExpertHead<Real> ExpertHead<Real>::initialize(ExpertId id, std::size_t channels, std::size_t classes,
                                              std::mt19937_64& rng) {
  const std::string name = std::string("head.") + expert_name(id);
  return ExpertHead{id,
                    LinearLayer<Real>::random(name + ".mu", classes, channels,
                                              1.0 / std::sqrt(static_cast<double>(channels)), rng),
                    LinearLayer<Real>(name + ".logvar", Tensor<Real>(Shape{classes, channels}), true)};
}

template <typename Real>
ExpertOutput<Real> run_head(const Binder<Real>& bind, ExpertHead<Real>& head, Var<Real> z, bool with_variance,
                            Real logvar_bound) {
  if (z.cols() != head.mean_net.in_dim()) {
    throw ConfigError(std::string("expert ") + expert_name(head.id) + ": feature " + shape_str(z.shape()) +
                      " vs head input " + std::to_string(head.mean_net.in_dim()));
  }
  ExpertOutput<Real> out;
  out.mu = head.mean_net(bind, z);
  if (with_variance) {
    out.logvar = ops::soft_clamp(head.logvar_net(bind, z), logvar_bound);
    out.mean_var = ops::row_mean(ops::exp(out.logvar));
  }
  return out;
}

template <typename Real>
GateNet<Real> GateNet<Real>::initialize(bool uncertainty_aware, std::size_t experts, std::size_t channels,
                                        std::mt19937_64& rng) {
  GateNet g;
  g.uncertainty_aware = uncertainty_aware;
  const std::size_t in = experts * channels;
  if (uncertainty_aware) {
    g.linear.emplace("gate", Tensor<Real>(Shape{experts, in}), true);
  } else {
    g.mlp = Mlp<Real>::random("gate_mlp", in, channels, experts, rng);
    g.mlp->output.weight.value.fill(Real(0));
  }
  return g;
}

template <typename Real>
GateState<Real> gate_from_logits(Var<Real> alpha, std::optional<Var<Real>> mean_var, Real beta) {
  GateState<Real> g;
  g.alpha = alpha;
  if (mean_var) {
    if (!(beta > Real(0))) throw ConfigError("gate penalty beta must be positive");
    g.logits = ops::sub(alpha, ops::affine(*mean_var, beta));
  } else {
    g.logits = alpha;
  }
  g.weights = ops::softmax_rows(g.logits);
  g.usage = ops::col_mean(g.weights);
  return g;
}

template <typename Real>
GateState<Real> gate(const Binder<Real>& bind, GateNet<Real>& net, std::span<const Var<Real>> features,
                     std::span<const ExpertOutput<Real>> outputs, Real beta) {
  if (features.size() != outputs.size()) throw ConfigError("gate: feature/expert count mismatch");
  Var<Real> x = features.size() == 1 ? features[0] : ops::concat_cols<Real>(features);
  if (!net.uncertainty_aware) return gate_from_logits<Real>((*net.mlp)(bind, x), std::nullopt, beta);
  std::vector<Var<Real>> vars;
  for (const auto& o : outputs) vars.push_back(o.mean_var);
  Var<Real> mean_var = vars.size() == 1 ? vars[0] : ops::concat_cols<Real>(vars);
  return gate_from_logits<Real>((*net.linear)(bind, x), mean_var, beta);
}

template <typename Real>
Var<Real> mixture(std::span<const ExpertOutput<Real>> outputs, const GateState<Real>& gate) {
  std::vector<Var<Real>> mus;
  for (const auto& o : outputs) mus.push_back(o.mu);
  return ops::mixture<Real>(gate.weights, mus);
}

template <typename Real>
Var<Real> balance_regularizer(const GateState<Real>& gate) {
  const Real k = static_cast<Real>(gate.usage.cols());
  return ops::sum_all(ops::square(ops::affine(gate.usage, Real(1), -Real(1) / k)));
}

#define SEFMAP_INSTANTIATE_EXPERTS(R)                                                                      \
  template struct ExpertHead<R>;                                                                           \
  template struct GateNet<R>;                                                                              \
  template ExpertOutput<R> run_head(const Binder<R>&, ExpertHead<R>&, Var<R>, bool, R);                    \
  template GateState<R> gate_from_logits(Var<R>, std::optional<Var<R>>, R);                                \
  template GateState<R> gate(const Binder<R>&, GateNet<R>&, std::span<const Var<R>>,                       \
                             std::span<const ExpertOutput<R>>, R);                                          \
  template Var<R> mixture(std::span<const ExpertOutput<R>>, const GateState<R>&);                          \
  template Var<R> balance_regularizer(const GateState<R>&);

SEFMAP_INSTANTIATE_EXPERTS(float)
SEFMAP_INSTANTIATE_EXPERTS(double)

}  // namespace sefmap
