// SPDX-License-Identifier: Apache-2.0
#include "sefmap/masking.hpp"

#include <cmath>

namespace sefmap {

void EmaStats::validate() const {
  if (!(decay > 0 && decay < 1)) throw ConfigError("ema decay must lie in (0, 1)");
  if (!(var_floor > 0)) throw ConfigError("ema variance floor must be positive");
}

template <typename Real>
void ema_update(EmaStats& stats, Modality modality, const Tensor<Real>& cells) {
  stats.validate();
  const std::size_t n = cells.rows(), c = cells.cols();
  if (n == 0) throw ConfigError("ema_update on an empty batch");
  ChannelStats& s = stats.slot(modality);
  if (s.initialized && s.mu.size() != c) {
    throw ConfigError(std::string("ema_update: ") + modality_name(modality) + " stats have " +
                      std::to_string(s.mu.size()) + " channels, batch has " + std::to_string(c));
  }
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) mean[j] += cells.at(i, j);
  }
  for (double& m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const double d = cells.at(i, j) - mean[j];
      var[j] += d * d;
    }
  }
  for (double& v : var) v /= static_cast<double>(n);

  if (!s.initialized) {
    s.mu = mean;
    s.var = var;
    s.initialized = true;
  } else {
    const double r = stats.decay;
    for (std::size_t j = 0; j < c; ++j) {
      s.mu[j] = r * s.mu[j] + (1 - r) * mean[j];
      s.var[j] = r * s.var[j] + (1 - r) * var[j];
    }
  }
  for (double& v : s.var) v = std::max(v, stats.var_floor);
}

template <typename Real>
Tensor<Real> sample_surrogate_cells(const EmaStats& stats, Modality modality, std::size_t cells,
                                    std::mt19937_64& rng) {
  const ChannelStats& s = stats.slot(modality);
  if (!s.initialized) {
    throw ConfigError(std::string("no ") + modality_name(modality) +
                      " feature statistics yet; run warm-up steps before sampling surrogates");
  }
  const std::size_t c = s.mu.size();
  std::vector<double> sd(c);
  for (std::size_t j = 0; j < c; ++j) sd[j] = std::sqrt(s.var[j]);
  Tensor<Real> out(Shape{cells, c});
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < cells; ++i) {
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = static_cast<Real>(s.mu[j] + sd[j] * normal(rng));
  }
  return out;
}

template <typename Real>
BevGrid<Real> sample_surrogate(const EmaStats& stats, Modality modality, std::size_t height, std::size_t width,
                               std::mt19937_64& rng) {
  Tensor<Real> cells = sample_surrogate_cells<Real>(stats, modality, height * width, rng);
  const std::size_t c = cells.cols();
  return BevGrid<Real>(height, width, c, modality, cells.reshaped(Shape{height, width, c}));
}

template <typename Real>
PassOutputs<Real> tri_pass(Model<Real>& model, Tape<Real>& tape, const Tensor<Real>& lidar,
                           const Tensor<Real>& image, const EmaStats& stats, std::mt19937_64& rng,
                           const SurrogateOverride<Real>& override_surrogate) {
  Binder<Real> bind{tape, true};
  Var<Real> l = tape.constant(lidar);
  Var<Real> v = tape.constant(image);
  PassOutputs<Real> out{model.forward(bind, l, v), std::nullopt, std::nullopt};
  if (!stats.ready()) return out;

  auto draw = [&](Modality m, const Tensor<Real>& actual) {
    Tensor<Real> s = sample_surrogate_cells<Real>(stats, m, actual.rows(), rng);
    return override_surrogate ? override_surrogate(m, actual, std::move(s)) : s;
  };
  Tensor<Real> fake_image = draw(Modality::Image, image);
  Tensor<Real> fake_lidar = draw(Modality::Lidar, lidar);
  out.image_masked = model.forward(bind, l, tape.constant(std::move(fake_image)));
  out.lidar_masked = model.forward(bind, tape.constant(std::move(fake_lidar)), v);
  return out;
}

#define SEFMAP_INSTANTIATE_MASKING(R)                                                                      \
  template void ema_update(EmaStats&, Modality, const Tensor<R>&);                                         \
  template Tensor<R> sample_surrogate_cells(const EmaStats&, Modality, std::size_t, std::mt19937_64&);     \
  template BevGrid<R> sample_surrogate(const EmaStats&, Modality, std::size_t, std::size_t,                \
                                       std::mt19937_64&);                                                  \
  template PassOutputs<R> tri_pass(Model<R>&, Tape<R>&, const Tensor<R>&, const Tensor<R>&, const EmaStats&, \
                                   std::mt19937_64&, const SurrogateOverride<R>&);

SEFMAP_INSTANTIATE_MASKING(float)
SEFMAP_INSTANTIATE_MASKING(double)

}  // namespace sefmap
