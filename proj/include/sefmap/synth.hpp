// SPDX-License-Identifier: Apache-2.0
//
// Synthetic BEV scenarios: a straight road segment with two boundaries, a
// centre divider and a pedestrian crossing, rasterized per cell and rendered
// into paired lidar / image feature grids following a fixed channel plan.
//
// Channel plan for C channels, g = C / 4:
//   [0, g)      shared: divider -> e0, boundary and crossing -> e1 (both grids)
//   [g, 2g)     image only: crossing -> e0
//   [2g, 3g)    lidar only: boundary -> e0
//   [3g, C)     interaction: lidar a*s, image a*s*t with s = +-1 per cell and
//               channel, t = +1 on dividers near the crossing, -1 elsewhere
// Dividers near the crossing carry no other signal, so they are only visible
// through the cross-modal product. Every channel of both grids gets
// N(0, sigma_obs^2) noise before degradations are applied.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sefmap/bev.hpp"

namespace sefmap {

enum class MapClass : std::uint16_t { Background = 0, Divider = 1, Boundary = 2, Crossing = 3 };

inline constexpr std::size_t kNumClasses = 4;
inline constexpr std::array<const char*, kNumClasses> kClassNames{"background", "divider", "boundary", "crossing"};

struct DegradationSpec {
  double image_gain = 1.0;
  double image_noise_sigma = 0.0;
  double lidar_keep_prob = 1.0;
  std::size_t image_occlusion_blocks = 0;
  std::size_t lidar_occlusion_blocks = 0;
  std::size_t occlusion_size = 6;

  void validate() const;
  bool intact() const;

  static DegradationSpec image_gain_only(double gain);
  static DegradationSpec lidar_keep_only(double keep);
};

void to_json(nlohmann::json& j, const DegradationSpec& d);
void from_json(const nlohmann::json& j, DegradationSpec& d);

struct SynthConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 16;
  double sigma_obs = 0.3;
  double interaction_amplitude = 1.0;
  std::size_t crossing_radius = 3;  // Chebyshev reach of the interaction-only dividers
  DegradationSpec degradation;

  void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

struct ClassRaster {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint16_t> labels;  // row-major

  ClassRaster() = default;
  ClassRaster(std::size_t h, std::size_t w) : height(h), width(w), labels(h * w, 0) {}

  std::uint16_t& at(std::size_t r, std::size_t c) { return labels[r * width + c]; }
  std::uint16_t at(std::size_t r, std::size_t c) const { return labels[r * width + c]; }
  std::size_t cells() const { return labels.size(); }
  std::size_t count(MapClass k) const;
  void validate(std::size_t classes = kNumClasses) const;
};

struct Scenario {
  ClassRaster gt;
  BevGrid<float> lidar;
  BevGrid<float> image;
  DegradationSpec degradation;
  std::uint64_t seed = 0;
};

/// Divider cells within `radius` (Chebyshev) of a crossing cell.
std::vector<bool> near_crossing_dividers(const ClassRaster& gt, std::size_t radius);

/// Noise-free value of the non-interaction channels for a cell of class k
/// (interaction channels are left at zero).
std::vector<float> planted_signal(const SynthConfig& config, MapClass k, Modality modality, bool near_crossing);

Scenario generate(const SynthConfig& config, std::uint64_t seed);

/// Re-renders the scenario's features under a different degradation.
Scenario generate(const SynthConfig& config, std::uint64_t seed, const DegradationSpec& degradation);

/// Applies a degradation to the scenario's features in place, drawing from a
/// stream keyed on the scenario seed. Stacks on any degradation already applied.
void degrade(Scenario& s, const DegradationSpec& degradation);

struct ClassScores {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0, recall = 0, f1 = 0, accuracy = 0;
};

struct MetricReport {
  std::array<ClassScores, kNumClasses> per_class{};
  double mean_f1 = 0;   // over the non-background classes
  double accuracy = 0;  // overall cell accuracy
  std::size_t cells = 0;
};

/// Confusion counts accumulated over any number of grids.
class ConfusionMatrix {
 public:
  void add(std::uint16_t predicted, std::uint16_t truth);
  template <typename Real>
  void add(const Tensor<Real>& logits, const ClassRaster& gt);
  MetricReport report() const;
  std::size_t total() const { return total_; }

 private:
  std::array<std::array<std::size_t, kNumClasses>, kNumClasses> counts_{};  // [truth][predicted]
  std::size_t total_ = 0;
};

/// Argmax decoding of [cells x D] (or [H, W, D]) logits against gt.
/// A class with no predictions and no support scores F1 = 1.
template <typename Real>
MetricReport metrics(const Tensor<Real>& logits, const ClassRaster& gt);

inline constexpr std::uint32_t kScenarioVersion = 1;

void save_scenario(const std::filesystem::path& path, const Scenario& s);
Scenario load_scenario(const std::filesystem::path& path);

}  // namespace sefmap
