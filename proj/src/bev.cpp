// SPDX-License-Identifier: Apache-2.0
#include "sefmap/bev.hpp"

#include <array>
#include <cmath>

namespace sefmap {

template <typename Real>
BevGrid<Real>::BevGrid(std::size_t h, std::size_t w, std::size_t c, Modality m, Tensor<Real> values)
    : height(h), width(w), channels(c), modality(m), data(values.reshaped(Shape{h, w, c})) {}

void validate_channels(std::size_t channels, std::size_t rank) {
  if (channels < 4 || channels % kInteractionRankDivisor != 0) {
    throw ConfigError("channel count " + std::to_string(channels) + " must be >= 4 and divisible by " +
                      std::to_string(kInteractionRankDivisor));
  }
  if (rank == 0 || 2 * rank > channels) {
    throw ConfigError("interaction rank " + std::to_string(rank) + " must lie in [1, C/2] for C = " +
                      std::to_string(channels));
  }
}

template <typename Real>
SubspaceParams<Real> SubspaceParams<Real>::initialize(std::size_t channels, std::size_t rank,
                                                      std::mt19937_64& rng) {
  validate_channels(channels, rank);
  const double factor_scale = 1.0 / std::sqrt(static_cast<double>(channels));
  auto near_identity = [&](const char* name) {
    return LinearLayer<Real>::random(name, channels, channels, 0.01, rng, true, true);
  };
  SubspaceParams p{
      near_identity("proj.P_L"),
      near_identity("proj.P_I"),
      near_identity("proj.S_L"),
      near_identity("proj.S_I"),
      Param<Real>("inter.A", random_matrix<Real>(rank, channels, factor_scale, rng)),
      Param<Real>("inter.B", random_matrix<Real>(rank, channels, factor_scale, rng)),
      Param<Real>("inter.C", random_matrix<Real>(channels, rank, factor_scale, rng)),
      Mlp<Real>::random("fusion.L", 2 * channels, channels, channels, rng),
      Mlp<Real>::random("fusion.I", 2 * channels, channels, channels, rng),
      Mlp<Real>::random("fusion.S", 2 * channels, channels, channels, rng),
  };
  return p;
}

template <typename Real>
Projections<Real> project(const Binder<Real>& bind, SubspaceParams<Real>& params, Var<Real> lidar,
                          Var<Real> image) {
  if (lidar.rows() != image.rows() || lidar.cols() != image.cols()) {
    throw ConfigError("project: lidar " + shape_str(lidar.shape()) + " vs image " + shape_str(image.shape()));
  }
  return {params.private_lidar(bind, lidar), params.private_image(bind, image),
          params.shared_lidar(bind, lidar), params.shared_image(bind, image)};
}

template <typename Real>
Var<Real> interaction(const Binder<Real>& bind, SubspaceParams<Real>& params, Var<Real> lidar, Var<Real> image) {
  Var<Real> a = ops::linear(lidar, bind(params.lidar_factor));
  Var<Real> b = ops::linear(image, bind(params.image_factor));
  return ops::linear(ops::mul(a, b), bind(params.interaction_out));
}

template <typename Real>
SubspaceBundle<Real> decompose(const Binder<Real>& bind, SubspaceParams<Real>& params, Var<Real> lidar,
                               Var<Real> image, const Projections<Real>& proj, SubspaceWiring wiring,
                               SubspaceMask mask) {
  SubspaceBundle<Real> out;
  out.proj = proj;
  const bool as_written = wiring == SubspaceWiring::AsWritten;
  if (mask.lidar) {
    std::array<Var<Real>, 2> parts{proj.u_lidar, as_written ? proj.r_image : proj.r_lidar};
    out.lidar = params.fusion_lidar(bind, ops::concat_cols<Real>(parts));
  }
  if (mask.image) {
    std::array<Var<Real>, 2> parts{as_written ? proj.r_lidar : proj.r_image, proj.u_image};
    out.image = params.fusion_image(bind, ops::concat_cols<Real>(parts));
  }
  if (mask.shared) {
    std::array<Var<Real>, 2> parts{proj.r_lidar, proj.r_image};
    out.shared = params.fusion_shared(bind, ops::concat_cols<Real>(parts));
  }
  if (mask.interaction) out.interaction = interaction(bind, params, lidar, image);
  return out;
}

template <typename Real>
SubspaceTensors<Real> decompose_grids(SubspaceParams<Real>& params, const BevGrid<Real>& lidar,
                                      const BevGrid<Real>& image, SubspaceWiring wiring) {
  if (lidar.height != image.height || lidar.width != image.width || lidar.channels != image.channels) {
    throw ConfigError("grid shape mismatch: lidar " + shape_str(lidar.data.shape()) + " vs image " +
                      shape_str(image.data.shape()));
  }
  if (lidar.channels != params.channels()) {
    throw ConfigError("grid has " + std::to_string(lidar.channels) + " channels, parameters expect " +
                      std::to_string(params.channels()));
  }
  Tape<Real> tape;
  Binder<Real> bind{tape, false};
  Var<Real> l = tape.constant(lidar.as_cells());
  Var<Real> v = tape.constant(image.as_cells());
  const auto proj = project(bind, params, l, v);
  const auto b = decompose(bind, params, l, v, proj, wiring);
  const Shape grid = lidar.data.shape();
  auto g = [&](Var<Real> x) { return x.value().reshaped(grid); };
  return {g(proj.u_lidar), g(proj.u_image), g(proj.r_lidar), g(proj.r_image),
          g(b.lidar),      g(b.image),      g(b.shared),     g(b.interaction)};
}

#define SEFMAP_INSTANTIATE_BEV(R)                                                                       \
  template struct BevGrid<R>;                                                                           \
  template struct SubspaceParams<R>;                                                                    \
  template Projections<R> project(const Binder<R>&, SubspaceParams<R>&, Var<R>, Var<R>);                \
  template Var<R> interaction(const Binder<R>&, SubspaceParams<R>&, Var<R>, Var<R>);                    \
  template SubspaceBundle<R> decompose(const Binder<R>&, SubspaceParams<R>&, Var<R>, Var<R>,            \
                                       const Projections<R>&, SubspaceWiring, SubspaceMask);            \
  template SubspaceTensors<R> decompose_grids(SubspaceParams<R>&, const BevGrid<R>&, const BevGrid<R>&, \
                                              SubspaceWiring);

SEFMAP_INSTANTIATE_BEV(float)
SEFMAP_INSTANTIATE_BEV(double)

}  // namespace sefmap
