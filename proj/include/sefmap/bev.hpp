// SPDX-License-Identifier: Apache-2.0
//
// BEV grids and the four-way subspace decomposition of paired LiDAR/image
// features. Every map is per-cell (1x1), so a grid is handled as an
// (H*W) x C matrix and several grids can be stacked into one batch.
#pragma once

#include <cstddef>
#include <random>
#include <string>

#include "sefmap/layers.hpp"

namespace sefmap {

enum class Modality { Lidar, Image };

inline const char* modality_name(Modality m) { return m == Modality::Lidar ? "lidar" : "image"; }

template <typename Real>
struct BevGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  Modality modality = Modality::Lidar;
  Tensor<Real> data;  // [H, W, C]

  BevGrid() = default;
  BevGrid(std::size_t h, std::size_t w, std::size_t c, Modality m)
      : height(h), width(w), channels(c), modality(m), data(Shape{h, w, c}) {}
  BevGrid(std::size_t h, std::size_t w, std::size_t c, Modality m, Tensor<Real> values);

  std::size_t cells() const { return height * width; }
  std::span<Real> cell(std::size_t row, std::size_t col) { return data.row(row * width + col); }
  std::span<const Real> cell(std::size_t row, std::size_t col) const { return data.row(row * width + col); }

  /// Rows = cells, cols = channels.
  Tensor<Real> as_cells() const { return data.reshaped(Shape{cells(), channels}); }
};

/// How the lidar/image subspaces pair private and shared projections.
/// AsWritten: L <- [u_L || r_I], I <- [r_L || u_I].
/// SameModality: L <- [u_L || r_L], I <- [r_I || u_I].
enum class SubspaceWiring { AsWritten, SameModality };

/// Smallest valid rank divisor: interaction rank R defaults to C / 4.
inline constexpr std::size_t kInteractionRankDivisor = 4;

template <typename Real>
struct SubspaceParams {
  LinearLayer<Real> private_lidar;  // P_L
  LinearLayer<Real> private_image;  // P_I
  LinearLayer<Real> shared_lidar;   // S_L
  LinearLayer<Real> shared_image;   // S_I
  Param<Real> lidar_factor;         // A  [R x C]
  Param<Real> image_factor;         // B  [R x C]
  Param<Real> interaction_out;      // C  [C x R]
  Mlp<Real> fusion_lidar;
  Mlp<Real> fusion_image;
  Mlp<Real> fusion_shared;

  /// Near-identity projections (noise 0.01), zero biases, N(0, 1/C) bilinear
  /// factors, and 2C -> C -> C fusion networks.
  static SubspaceParams initialize(std::size_t channels, std::size_t rank, std::mt19937_64& rng);

  std::size_t channels() const { return private_lidar.out_dim(); }
  std::size_t rank() const { return lidar_factor.value.shape()[0]; }

  template <typename F>
  void for_each_param(F&& f) {
    private_lidar.for_each_param(f);
    private_image.for_each_param(f);
    shared_lidar.for_each_param(f);
    shared_image.for_each_param(f);
    f(lidar_factor);
    f(image_factor);
    f(interaction_out);
    fusion_lidar.for_each_param(f);
    fusion_image.for_each_param(f);
    fusion_shared.for_each_param(f);
  }
};

template <typename Real>
struct Projections {
  Var<Real> u_lidar;  // P_L l
  Var<Real> u_image;  // P_I v
  Var<Real> r_lidar;  // S_L l
  Var<Real> r_image;  // S_I v
};

/// Which subspaces a decomposition should materialize.
struct SubspaceMask {
  bool lidar = true;
  bool image = true;
  bool shared = true;
  bool interaction = true;
};

template <typename Real>
struct SubspaceBundle {
  Projections<Real> proj;
  Var<Real> lidar;        // L
  Var<Real> image;        // I
  Var<Real> shared;       // S
  Var<Real> interaction;  // Int
};

template <typename Real>
Projections<Real> project(const Binder<Real>& bind, SubspaceParams<Real>& params, Var<Real> lidar,
                          Var<Real> image);

/// C[(A l) * (B v)] per cell.
template <typename Real>
Var<Real> interaction(const Binder<Real>& bind, SubspaceParams<Real>& params, Var<Real> lidar, Var<Real> image);

template <typename Real>
SubspaceBundle<Real> decompose(const Binder<Real>& bind, SubspaceParams<Real>& params, Var<Real> lidar,
                               Var<Real> image, const Projections<Real>& proj,
                               SubspaceWiring wiring = SubspaceWiring::AsWritten, SubspaceMask mask = {});

/// Plain tensors of a decomposition, evaluated without gradient tracking.
template <typename Real>
struct SubspaceTensors {
  Tensor<Real> u_lidar, u_image, r_lidar, r_image;
  Tensor<Real> lidar, image, shared, interaction;
};

/// Grid-level convenience: checks both grids share H, W, C and returns all
/// eight per-cell fields as [H, W, C] tensors.
template <typename Real>
SubspaceTensors<Real> decompose_grids(SubspaceParams<Real>& params, const BevGrid<Real>& lidar,
                                      const BevGrid<Real>& image,
                                      SubspaceWiring wiring = SubspaceWiring::AsWritten);

/// Throws ConfigError unless the channel count suits the decomposition.
void validate_channels(std::size_t channels, std::size_t rank);

}  // namespace sefmap
