// SPDX-License-Identifier: Apache-2.0
#include "sefmap/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "sefmap/binio.hpp"
#include "sefmap/json_util.hpp"

namespace sefmap {

void DegradationSpec::validate() const {
  if (!(image_gain > 0 && image_gain <= 1)) throw ConfigError("image_gain must lie in (0, 1]");
  if (!(image_noise_sigma >= 0)) throw ConfigError("image_noise_sigma must be nonnegative");
  if (!(lidar_keep_prob > 0 && lidar_keep_prob <= 1)) throw ConfigError("lidar_keep_prob must lie in (0, 1]");
  if ((image_occlusion_blocks > 0 || lidar_occlusion_blocks > 0) && occlusion_size == 0) {
    throw ConfigError("occlusion_size must be positive when occlusion blocks are requested");
  }
}

bool DegradationSpec::intact() const {
  return image_gain == 1.0 && image_noise_sigma == 0.0 && lidar_keep_prob == 1.0 && image_occlusion_blocks == 0 &&
         lidar_occlusion_blocks == 0;
}

DegradationSpec DegradationSpec::image_gain_only(double gain) {
  DegradationSpec d;
  d.image_gain = gain;
  return d;
}

DegradationSpec DegradationSpec::lidar_keep_only(double keep) {
  DegradationSpec d;
  d.lidar_keep_prob = keep;
  return d;
}

using jsonutil::read_opt;
using jsonutil::reject_unknown;

void to_json(nlohmann::json& j, const DegradationSpec& d) {
  j = nlohmann::json{{"image_gain", d.image_gain},
                     {"image_noise_sigma", d.image_noise_sigma},
                     {"lidar_keep_prob", d.lidar_keep_prob},
                     {"image_occlusion_blocks", d.image_occlusion_blocks},
                     {"lidar_occlusion_blocks", d.lidar_occlusion_blocks},
                     {"occlusion_size", d.occlusion_size}};
}

void from_json(const nlohmann::json& j, DegradationSpec& d) {
  reject_unknown(j,
                 {"image_gain", "image_noise_sigma", "lidar_keep_prob", "image_occlusion_blocks",
                  "lidar_occlusion_blocks", "occlusion_size"},
                 "degradation");
  read_opt(j, "image_gain", d.image_gain);
  read_opt(j, "image_noise_sigma", d.image_noise_sigma);
  read_opt(j, "lidar_keep_prob", d.lidar_keep_prob);
  read_opt(j, "image_occlusion_blocks", d.image_occlusion_blocks);
  read_opt(j, "lidar_occlusion_blocks", d.lidar_occlusion_blocks);
  read_opt(j, "occlusion_size", d.occlusion_size);
  d.validate();
}

void SynthConfig::validate() const {
  if (height < 16 || width < 16) throw ConfigError("synth grids must be at least 16x16");
  if (channels < 8 || channels % 4 != 0) throw ConfigError("synth channels must be a multiple of 4 and at least 8");
  if (!(sigma_obs >= 0)) throw ConfigError("sigma_obs must be nonnegative");
  if (!(interaction_amplitude > 0)) throw ConfigError("interaction_amplitude must be positive");
  degradation.validate();
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"height", c.height},
                     {"width", c.width},
                     {"channels", c.channels},
                     {"sigma_obs", c.sigma_obs},
                     {"interaction_amplitude", c.interaction_amplitude},
                     {"crossing_radius", c.crossing_radius},
                     {"degradation", c.degradation}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  reject_unknown(j,
                 {"height", "width", "channels", "sigma_obs", "interaction_amplitude", "crossing_radius",
                  "degradation"},
                 "synth config");
  read_opt(j, "height", c.height);
  read_opt(j, "width", c.width);
  read_opt(j, "channels", c.channels);
  read_opt(j, "sigma_obs", c.sigma_obs);
  read_opt(j, "interaction_amplitude", c.interaction_amplitude);
  read_opt(j, "crossing_radius", c.crossing_radius);
  if (j.contains("degradation")) c.degradation = j.at("degradation").get<DegradationSpec>();
  c.validate();
}

std::size_t ClassRaster::count(MapClass k) const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), static_cast<std::uint16_t>(k)));
}

void ClassRaster::validate(std::size_t classes) const {
  if (labels.size() != height * width) throw ConfigError("class raster size does not match its extent");
  for (auto v : labels) {
    if (v >= classes) throw ConfigError("class id " + std::to_string(v) + " out of range");
  }
}

std::vector<bool> near_crossing_dividers(const ClassRaster& gt, std::size_t radius) {
  std::vector<bool> out(gt.cells(), false);
  const auto r = static_cast<std::ptrdiff_t>(radius);
  const auto h = static_cast<std::ptrdiff_t>(gt.height), w = static_cast<std::ptrdiff_t>(gt.width);
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      if (gt.at(y, x) != static_cast<std::uint16_t>(MapClass::Divider)) continue;
      bool hit = false;
      for (std::ptrdiff_t dy = -r; dy <= r && !hit; ++dy) {
        for (std::ptrdiff_t dx = -r; dx <= r && !hit; ++dx) {
          const auto yy = y + dy, xx = x + dx;
          hit = yy >= 0 && yy < h && xx >= 0 && xx < w &&
                gt.at(yy, xx) == static_cast<std::uint16_t>(MapClass::Crossing);
        }
      }
      out[y * w + x] = hit;
    }
  }
  return out;
}

std::vector<float> planted_signal(const SynthConfig& config, MapClass k, Modality modality, bool near_crossing) {
  const std::size_t g = config.channels / 4;
  std::vector<float> v(config.channels, 0.0f);
  switch (k) {
    case MapClass::Divider:
      if (!near_crossing) v[0] = 1.0f;
      break;
    case MapClass::Boundary:
      v[1] = 1.0f;
      if (modality == Modality::Lidar) v[2 * g] = 1.0f;
      break;
    case MapClass::Crossing:
      v[1] = 1.0f;
      if (modality == Modality::Image) v[g] = 1.0f;
      break;
    case MapClass::Background: break;
  }
  return v;
}

namespace {

ClassRaster draw_layout(const SynthConfig& config, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const double cx = static_cast<double>(config.width) / 2, cy = static_cast<double>(config.height) / 2;
  const double extent = static_cast<double>(std::min(config.width, config.height));
  for (int attempt = 0; attempt < 1000; ++attempt) {
    double theta = uniform(-std::numbers::pi / 6, std::numbers::pi / 6);
    if (unit(rng) < 0.5) theta += std::numbers::pi / 2;
    const double ux = std::cos(theta), uy = std::sin(theta);
    const double nx = -uy, ny = ux;
    const double ox = cx + uniform(-0.1, 0.1) * extent, oy = cy + uniform(-0.1, 0.1) * extent;
    const double half_width = uniform(0.16, 0.28) * extent;
    const double cross_at = uniform(-0.25, 0.25) * extent;
    constexpr double line = 0.6, band = 1.5;

    ClassRaster gt(config.height, config.width);
    for (std::size_t y = 0; y < config.height; ++y) {
      for (std::size_t x = 0; x < config.width; ++x) {
        const double px = static_cast<double>(x) + 0.5 - ox, py = static_cast<double>(y) + 0.5 - oy;
        const double d = px * nx + py * ny, s = px * ux + py * uy;
        MapClass k = MapClass::Background;
        if (std::abs(std::abs(d) - half_width) <= line) {
          k = MapClass::Boundary;
        } else if (std::abs(d) < half_width - line && std::abs(s - cross_at) <= band) {
          k = MapClass::Crossing;
        } else if (std::abs(d) <= line) {
          k = MapClass::Divider;
        }
        gt.at(y, x) = static_cast<std::uint16_t>(k);
      }
    }
    if (gt.count(MapClass::Divider) > 0 && gt.count(MapClass::Boundary) > 0 && gt.count(MapClass::Crossing) > 0) {
      return gt;
    }
  }
  throw ConfigError("could not draw a scenario containing every class");
}

void occlude(BevGrid<float>& grid, std::size_t blocks, std::size_t size, std::mt19937_64& rng) {
  if (blocks == 0) return;
  const std::size_t bh = std::min(size, grid.height), bw = std::min(size, grid.width);
  std::uniform_int_distribution<std::size_t> top(0, grid.height - bh), left(0, grid.width - bw);
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t y0 = top(rng), x0 = left(rng);
    for (std::size_t y = y0; y < y0 + bh; ++y) {
      for (std::size_t x = x0; x < x0 + bw; ++x) std::fill_n(grid.cell(y, x).data(), grid.channels, 0.0f);
    }
  }
}

// Independent stream for degradations so a seed keeps its layout and clean
// features under every degradation spec.
constexpr std::uint64_t kDegradationStream = 0x9E3779B97F4A7C15ull;

}  // namespace

void degrade(Scenario& s, const DegradationSpec& degradation) {
  degradation.validate();
  const std::size_t h = s.lidar.height, w = s.lidar.width, c = s.lidar.channels;
  if (s.degradation.intact()) s.degradation = degradation;
  if (degradation.intact()) return;
  std::normal_distribution<double> noise(0.0, 1.0);
  std::mt19937_64 drng(s.seed ^ kDegradationStream);
  for (auto& v : s.image.data.storage()) {
    v = static_cast<float>(degradation.image_gain * v);
    if (degradation.image_noise_sigma > 0) v += static_cast<float>(degradation.image_noise_sigma * noise(drng));
  }
  occlude(s.image, degradation.image_occlusion_blocks, degradation.occlusion_size, drng);
  if (degradation.lidar_keep_prob < 1.0) {
    std::bernoulli_distribution keep(degradation.lidar_keep_prob);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        if (!keep(drng)) std::fill_n(s.lidar.cell(y, x).data(), c, 0.0f);
      }
    }
  }
  occlude(s.lidar, degradation.lidar_occlusion_blocks, degradation.occlusion_size, drng);
}

Scenario generate(const SynthConfig& config, std::uint64_t seed) { return generate(config, seed, config.degradation); }

Scenario generate(const SynthConfig& config, std::uint64_t seed, const DegradationSpec& degradation) {
  config.validate();
  degradation.validate();
  std::mt19937_64 rng(seed);
  Scenario s;
  s.seed = seed;
  s.gt = draw_layout(config, rng);

  const std::size_t h = config.height, w = config.width, c = config.channels, g = c / 4;
  s.lidar = BevGrid<float>(h, w, c, Modality::Lidar);
  s.image = BevGrid<float>(h, w, c, Modality::Image);
  const auto near = near_crossing_dividers(s.gt, config.crossing_radius);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::bernoulli_distribution sign(0.5);
  const double a = config.interaction_amplitude;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t p = y * w + x;
      const auto k = static_cast<MapClass>(s.gt.labels[p]);
      const auto sl = planted_signal(config, k, Modality::Lidar, near[p]);
      const auto si = planted_signal(config, k, Modality::Image, near[p]);
      auto lc = s.lidar.cell(y, x);
      auto ic = s.image.cell(y, x);
      for (std::size_t j = 0; j < 3 * g; ++j) {
        lc[j] = sl[j];
        ic[j] = si[j];
      }
      const double t = near[p] ? 1.0 : -1.0;
      for (std::size_t j = 3 * g; j < c; ++j) {
        const double sv = sign(rng) ? 1.0 : -1.0;
        lc[j] = static_cast<float>(a * sv);
        ic[j] = static_cast<float>(a * sv * t);
      }
    }
  }
  if (config.sigma_obs > 0) {
    for (auto& v : s.lidar.data.storage()) v += static_cast<float>(config.sigma_obs * noise(rng));
    for (auto& v : s.image.data.storage()) v += static_cast<float>(config.sigma_obs * noise(rng));
  }

  degrade(s, degradation);
  return s;
}

void ConfusionMatrix::add(std::uint16_t predicted, std::uint16_t truth) {
  if (predicted >= kNumClasses || truth >= kNumClasses) throw ConfigError("class id out of range in metrics");
  ++counts_[truth][predicted];
  ++total_;
}

template <typename Real>
void ConfusionMatrix::add(const Tensor<Real>& logits, const ClassRaster& gt) {
  if (logits.cols() != kNumClasses || logits.rows() != gt.cells()) {
    throw ConfigError("metrics: logits " + shape_str(logits.shape()) + " do not match a " +
                      std::to_string(gt.height) + "x" + std::to_string(gt.width) + " raster");
  }
  for (std::size_t p = 0; p < gt.cells(); ++p) {
    const auto row = logits.row(p);
    const auto best = static_cast<std::uint16_t>(std::max_element(row.begin(), row.end()) - row.begin());
    add(best, gt.labels[p]);
  }
}

MetricReport ConfusionMatrix::report() const {
  MetricReport r;
  r.cells = total_;
  std::size_t correct = 0;
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    ClassScores& s = r.per_class[k];
    s.tp = counts_[k][k];
    for (std::size_t j = 0; j < kNumClasses; ++j) {
      if (j == k) continue;
      s.fn += counts_[k][j];
      s.fp += counts_[j][k];
    }
    s.tn = total_ - s.tp - s.fn - s.fp;
    correct += s.tp;
    const double tp = static_cast<double>(s.tp);
    if (s.tp + s.fp + s.fn == 0) {
      s.precision = s.recall = s.f1 = 1.0;
    } else {
      s.precision = s.tp + s.fp > 0 ? tp / static_cast<double>(s.tp + s.fp) : 0.0;
      s.recall = s.tp + s.fn > 0 ? tp / static_cast<double>(s.tp + s.fn) : 0.0;
      s.f1 = 2 * tp / static_cast<double>(2 * s.tp + s.fp + s.fn);
    }
    s.accuracy = total_ > 0 ? static_cast<double>(s.tp + s.tn) / static_cast<double>(total_) : 0.0;
  }
  double sum = 0;
  for (std::size_t k = 1; k < kNumClasses; ++k) sum += r.per_class[k].f1;
  r.mean_f1 = sum / static_cast<double>(kNumClasses - 1);
  r.accuracy = total_ > 0 ? static_cast<double>(correct) / static_cast<double>(total_) : 0.0;
  return r;
}

template <typename Real>
MetricReport metrics(const Tensor<Real>& logits, const ClassRaster& gt) {
  ConfusionMatrix cm;
  cm.add(logits, gt);
  return cm.report();
}

template void ConfusionMatrix::add(const Tensor<float>&, const ClassRaster&);
template void ConfusionMatrix::add(const Tensor<double>&, const ClassRaster&);
template MetricReport metrics(const Tensor<float>&, const ClassRaster&);
template MetricReport metrics(const Tensor<double>&, const ClassRaster&);

void save_scenario(const std::filesystem::path& path, const Scenario& s) {
  const BevGrid<float>& l = s.lidar;
  if (s.image.height != l.height || s.image.width != l.width || s.image.channels != l.channels ||
      s.gt.height != l.height || s.gt.width != l.width) {
    throw ConfigError("save_scenario: grids and raster disagree in extent");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.write("SEFS", 4);
  binio::put<std::uint32_t>(out, kScenarioVersion);
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(l.height));
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(l.width));
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(l.channels));
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(kNumClasses));
  for (auto v : s.gt.labels) binio::put<std::uint16_t>(out, v);
  for (float v : s.lidar.data.values()) binio::put<float>(out, v);
  for (float v : s.image.data.values()) binio::put<float>(out, v);
  const nlohmann::json trailer{{"degradation", s.degradation}, {"seed", s.seed}};
  binio::put_bytes(out, trailer.dump());
  if (!out) throw ConfigError("write failed for " + path.string());
}

Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  binio::expect_magic(in, "SEFS", path.string());
  const auto version = binio::get<std::uint32_t>(in, "version");
  if (version != kScenarioVersion) {
    throw ConfigError(path.string() + ": scenario version " + std::to_string(version) + ", expected " +
                      std::to_string(kScenarioVersion));
  }
  const std::size_t h = binio::get<std::uint32_t>(in, "height");
  const std::size_t w = binio::get<std::uint32_t>(in, "width");
  const std::size_t c = binio::get<std::uint32_t>(in, "channels");
  const std::size_t d = binio::get<std::uint32_t>(in, "classes");
  if (d != kNumClasses) throw ConfigError(path.string() + ": expected " + std::to_string(kNumClasses) + " classes");
  if (h == 0 || w == 0 || c == 0 || h * w * c > (std::size_t(1) << 28)) {
    throw ConfigError(path.string() + ": implausible grid extent");
  }
  Scenario s;
  s.gt = ClassRaster(h, w);
  for (auto& v : s.gt.labels) v = binio::get<std::uint16_t>(in, "labels");
  s.gt.validate();
  s.lidar = BevGrid<float>(h, w, c, Modality::Lidar);
  s.image = BevGrid<float>(h, w, c, Modality::Image);
  for (auto& v : s.lidar.data.storage()) v = binio::get<float>(in, "lidar grid");
  for (auto& v : s.image.data.storage()) v = binio::get<float>(in, "image grid");
  nlohmann::json trailer;
  try {
    trailer = nlohmann::json::parse(binio::get_bytes(in, "trailer"));
    s.degradation = trailer.at("degradation").get<DegradationSpec>();
    s.seed = trailer.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": bad scenario trailer: " + e.what());
  }
  return s;
}

}  // namespace sefmap
