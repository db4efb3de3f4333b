// SPDX-License-Identifier: Apache-2.0
//
// Running per-channel feature statistics, Gaussian surrogate features, and the
// intact / image-masked / lidar-masked forward passes of one training step.
#pragma once

#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "sefmap/model.hpp"

namespace sefmap {

struct ChannelStats {
  std::vector<double> mu;
  std::vector<double> var;
  bool initialized = false;
};

struct EmaStats {
  double decay = 0.99;
  double var_floor = 1e-6;
  ChannelStats lidar;
  ChannelStats image;

  ChannelStats& slot(Modality m) { return m == Modality::Lidar ? lidar : image; }
  const ChannelStats& slot(Modality m) const { return m == Modality::Lidar ? lidar : image; }
  bool ready() const { return lidar.initialized && image.initialized; }
  void validate() const;
};

/// Folds the per-channel mean and (population) variance of `cells` [n x C]
/// into the slot for `modality`. The first update copies them directly.
template <typename Real>
void ema_update(EmaStats& stats, Modality modality, const Tensor<Real>& cells);

template <typename Real>
void ema_update(EmaStats& stats, const BevGrid<Real>& grid) {
  ema_update(stats, grid.modality, grid.as_cells());
}

/// n independent cells from N(mu, diag(var)): [n x C].
template <typename Real>
Tensor<Real> sample_surrogate_cells(const EmaStats& stats, Modality modality, std::size_t cells,
                                    std::mt19937_64& rng);

template <typename Real>
BevGrid<Real> sample_surrogate(const EmaStats& stats, Modality modality, std::size_t height, std::size_t width,
                               std::mt19937_64& rng);

template <typename Real>
struct PassOutputs {
  ForwardResult<Real> intact;
  std::optional<ForwardResult<Real>> image_masked;  // (l, surrogate v)
  std::optional<ForwardResult<Real>> lidar_masked;  // (surrogate l, v)

  bool complete() const { return image_masked && lidar_masked; }
};

/// Test hook: replaces the surrogate drawn for a modality. Receives the real
/// features and the freshly drawn surrogate.
template <typename Real>
using SurrogateOverride = std::function<Tensor<Real>(Modality, const Tensor<Real>& actual, Tensor<Real> drawn)>;

/// Runs the three passes on one tape with shared parameters. Until both
/// statistics slots are initialized only the intact pass is produced.
template <typename Real>
PassOutputs<Real> tri_pass(Model<Real>& model, Tape<Real>& tape, const Tensor<Real>& lidar,
                           const Tensor<Real>& image, const EmaStats& stats, std::mt19937_64& rng,
                           const SurrogateOverride<Real>& override_surrogate = {});

}  // namespace sefmap
