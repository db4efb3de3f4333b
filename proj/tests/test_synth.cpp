// SPDX-License-Identifier: Apache-2.0
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "sefmap/synth.hpp"
#include "support.hpp"

using namespace sefmap;

namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("sefmap_test_synth_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Tensor<double> one_hot(const ClassRaster& gt) {
  Tensor<double> t(Shape{gt.cells(), kNumClasses});
  for (std::size_t p = 0; p < gt.cells(); ++p) t.at(p, gt.labels[p]) = 5.0;
  return t;
}

// Multinomial logistic regression fitted by full-batch gradient descent.
struct Probe {
  Eigen::MatrixXd w;  // (features + 1) x classes

  static Probe fit(const Eigen::MatrixXd& x, const std::vector<int>& y, int classes, bool balanced = true,
                   int iters = 400) {
    const Eigen::Index n = x.rows(), f = x.cols();
    Eigen::MatrixXd xb(n, f + 1);
    xb << x, Eigen::VectorXd::Ones(n);
    Eigen::MatrixXd target = Eigen::MatrixXd::Zero(n, classes);
    std::vector<double> count(classes, 0.0);
    for (Eigen::Index i = 0; i < n; ++i) count[y[i]] += 1;
    Eigen::VectorXd weight(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      target(i, y[i]) = 1;
      weight[i] = balanced ? static_cast<double>(n) / (classes * count[y[i]]) : 1.0;
    }
    Probe p{Eigen::MatrixXd::Zero(f + 1, classes)};
    for (int it = 0; it < iters; ++it) {
      Eigen::MatrixXd z = xb * p.w;
      for (Eigen::Index i = 0; i < n; ++i) {
        z.row(i).array() -= z.row(i).maxCoeff();
        z.row(i) = z.row(i).array().exp().matrix();
        z.row(i) /= z.row(i).sum();
      }
      const Eigen::MatrixXd g = xb.transpose() * ((z - target).array().colwise() * weight.array()).matrix() /
                                static_cast<double>(n);
      p.w -= 1.0 * g;
    }
    return p;
  }

  std::vector<int> predict(const Eigen::MatrixXd& x) const {
    Eigen::MatrixXd xb(x.rows(), x.cols() + 1);
    xb << x, Eigen::VectorXd::Ones(x.rows());
    const Eigen::MatrixXd z = xb * w;
    std::vector<int> out(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) z.row(i).maxCoeff(&out[i]);
    return out;
  }
};

struct Cells {
  Eigen::MatrixXd lidar, image;
  std::vector<int> label;
  std::vector<bool> near;
};

Cells collect(const SynthConfig& cfg, std::uint64_t first, int count) {
  std::vector<Scenario> ss;
  std::size_t n = 0;
  for (int i = 0; i < count; ++i) {
    ss.push_back(generate(cfg, first + i));
    n += ss.back().gt.cells();
  }
  Cells c{Eigen::MatrixXd(n, cfg.channels), Eigen::MatrixXd(n, cfg.channels), {}, {}};
  Eigen::Index r = 0;
  for (const Scenario& s : ss) {
    const auto near = near_crossing_dividers(s.gt, cfg.crossing_radius);
    for (std::size_t p = 0; p < s.gt.cells(); ++p, ++r) {
      for (std::size_t j = 0; j < cfg.channels; ++j) {
        c.lidar(r, j) = s.lidar.data[p * cfg.channels + j];
        c.image(r, j) = s.image.data[p * cfg.channels + j];
      }
      c.label.push_back(s.gt.labels[p]);
      c.near.push_back(near[p]);
    }
  }
  return c;
}

// Rows where `relabel` is nonnegative, labelled by it.
std::pair<Eigen::MatrixXd, std::vector<int>> select(const Eigen::MatrixXd& x, const Cells& c,
                                                     const std::function<int(std::size_t)>& relabel) {
  std::vector<Eigen::Index> rows;
  std::vector<int> y;
  for (std::size_t i = 0; i < c.label.size(); ++i) {
    const int k = relabel(i);
    if (k < 0) continue;
    rows.push_back(static_cast<Eigen::Index>(i));
    y.push_back(k);
  }
  Eigen::MatrixXd out(rows.size(), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(i) = x.row(rows[i]);
  return {out, y};
}

double balanced_accuracy(const std::vector<int>& pred, const std::vector<int>& y) {
  double hit[2] = {0, 0}, tot[2] = {0, 0};
  for (std::size_t i = 0; i < y.size(); ++i) {
    tot[y[i]] += 1;
    hit[y[i]] += pred[i] == y[i];
  }
  return 0.5 * (hit[0] / tot[0] + hit[1] / tot[1]);
}

// Four standard errors of the balanced accuracy of a coin flip.
double chance_band(const std::vector<int>& y) {
  const double pos = static_cast<double>(std::count(y.begin(), y.end(), 1));
  const double neg = static_cast<double>(y.size()) - pos;
  return 4.0 * 0.5 * std::sqrt(0.25 / pos + 0.25 / neg);
}

double f1_of(const std::vector<int>& pred, const std::vector<int>& y, int k) {
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    tp += pred[i] == k && y[i] == k;
    fp += pred[i] == k && y[i] != k;
    fn += pred[i] != k && y[i] == k;
  }
  return 2 * tp / (2 * tp + fp + fn);
}

Eigen::MatrixXd block(const Eigen::MatrixXd& x, std::size_t from, std::size_t to) {
  return x.middleCols(static_cast<Eigen::Index>(from), static_cast<Eigen::Index>(to - from));
}

}  // namespace

TEST_CASE("generation is deterministic in the seed") {
  SynthConfig cfg;
  const Scenario a = generate(cfg, 17), b = generate(cfg, 17), c = generate(cfg, 18);
  CHECK(a.gt.labels == b.gt.labels);
  CHECK(a.lidar.data == b.lidar.data);
  CHECK(a.image.data == b.image.data);
  CHECK(a.seed == 17);
  CHECK(a.lidar.data != c.lidar.data);
  DegradationSpec d;
  d.image_noise_sigma = 0.5;
  d.lidar_keep_prob = 0.6;
  d.image_occlusion_blocks = 2;
  CHECK(generate(cfg, 3, d).image.data == generate(cfg, 3, d).image.data);
  CHECK(generate(cfg, 3, d).lidar.data == generate(cfg, 3, d).lidar.data);
}

TEST_CASE("every foreground class is present") {
  SynthConfig cfg;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const Scenario s = generate(cfg, seed);
    for (MapClass k : {MapClass::Divider, MapClass::Boundary, MapClass::Crossing}) CHECK(s.gt.count(k) >= 1);
    CHECK(s.lidar.height == cfg.height);
    CHECK(s.image.channels == cfg.channels);
  }
}

TEST_CASE("noiseless features equal the planted embeddings") {
  SynthConfig cfg;
  cfg.sigma_obs = 0;
  const std::size_t c = cfg.channels, g = c / 4;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Scenario s = generate(cfg, seed);
    const auto near = near_crossing_dividers(s.gt, cfg.crossing_radius);
    for (std::size_t p = 0; p < s.gt.cells(); ++p) {
      const auto k = static_cast<MapClass>(s.gt.labels[p]);
      std::vector<float> el(c, 0), ei(c, 0);
      if (k == MapClass::Divider && !near[p]) el[0] = ei[0] = 1;
      if (k == MapClass::Boundary) el[1] = ei[1] = el[2 * g] = 1;
      if (k == MapClass::Crossing) el[1] = ei[1] = ei[g] = 1;
      for (std::size_t j = 0; j < 3 * g; ++j) {
        CHECK(s.lidar.data[p * c + j] == el[j]);
        CHECK(s.image.data[p * c + j] == ei[j]);
      }
      for (std::size_t j = 3 * g; j < c; ++j) {
        const float l = s.lidar.data[p * c + j], v = s.image.data[p * c + j];
        CHECK(std::abs(l) == 1.0f);
        CHECK(l * v == (near[p] ? 1.0f : -1.0f));
      }
    }
  }
}

TEST_CASE("image gain scales the image grid only") {
  SynthConfig cfg;
  const Scenario base = generate(cfg, 5);
  const Scenario dim = generate(cfg, 5, DegradationSpec::image_gain_only(0.01));
  CHECK(dim.lidar.data == base.lidar.data);
  for (std::size_t i = 0; i < base.image.data.size(); ++i) {
    CHECK(dim.image.data[i] == doctest::Approx(0.01 * base.image.data[i]).epsilon(1e-6));
  }
  CHECK(dim.degradation.image_gain == 0.01);
}

TEST_CASE("lidar dropout and occlusion zero whole cells") {
  SynthConfig cfg;
  const Scenario s = generate(cfg, 6, DegradationSpec::lidar_keep_only(0.3));
  const std::size_t c = cfg.channels;
  std::size_t zero = 0;
  for (std::size_t p = 0; p < s.gt.cells(); ++p) {
    bool all = true;
    for (std::size_t j = 0; j < c; ++j) all = all && s.lidar.data[p * c + j] == 0.0f;
    zero += all;
  }
  const double frac = static_cast<double>(zero) / static_cast<double>(s.gt.cells());
  CHECK(frac > 0.6);
  CHECK(frac < 0.8);
  CHECK(s.image.data == generate(cfg, 6).image.data);

  DegradationSpec occ;
  occ.image_occlusion_blocks = 1;
  occ.occlusion_size = 32;
  const Scenario o = generate(cfg, 6, occ);
  for (float v : o.image.data.storage()) CHECK(v == 0.0f);
}

TEST_CASE("degradation specs are validated") {
  DegradationSpec d;
  CHECK(d.intact());
  d.image_gain = 0;
  CHECK_THROWS_AS(d.validate(), ConfigError);
  d.image_gain = 1.2;
  CHECK_THROWS_AS(d.validate(), ConfigError);
  d = {};
  d.lidar_keep_prob = 0;
  CHECK_THROWS_AS(d.validate(), ConfigError);
  d = {};
  d.image_noise_sigma = -1;
  CHECK_THROWS_AS(d.validate(), ConfigError);
  SynthConfig cfg;
  cfg.channels = 10;
  CHECK_THROWS_AS(generate(cfg, 0), ConfigError);
  cfg.channels = 16;
  cfg.height = 8;
  CHECK_THROWS_AS(generate(cfg, 0), ConfigError);
}

TEST_CASE("metrics hand examples") {
  const Scenario s = generate(SynthConfig{}, 7);
  const MetricReport perfect = metrics(one_hot(s.gt), s.gt);
  for (const auto& c : perfect.per_class) CHECK(c.f1 == 1.0);
  CHECK(perfect.mean_f1 == 1.0);
  CHECK(perfect.accuracy == 1.0);

  Tensor<double> bg(Shape{s.gt.cells(), kNumClasses});
  for (std::size_t p = 0; p < s.gt.cells(); ++p) bg.at(p, 0) = 1;
  const MetricReport none = metrics(bg, s.gt);
  for (std::size_t k = 1; k < kNumClasses; ++k) CHECK(none.per_class[k].f1 == 0.0);
  CHECK(none.mean_f1 == 0.0);

  // truth        predicted
  // 0 1 1        0 1 0
  // 0 2 3        1 2 3
  // 0 0 3        0 0 3
  ClassRaster gt(3, 3);
  gt.labels = {0, 1, 1, 0, 2, 3, 0, 0, 3};
  const std::vector<std::uint16_t> pred{0, 1, 0, 1, 2, 3, 0, 0, 3};
  Tensor<double> logits(Shape{3, 3, kNumClasses});
  for (std::size_t p = 0; p < 9; ++p) logits[p * kNumClasses + pred[p]] = 1;
  const MetricReport r = metrics(logits, gt);
  const ClassScores& d = r.per_class[1];
  CHECK(d.tp == 1);
  CHECK(d.fp == 1);
  CHECK(d.fn == 1);
  CHECK(d.tn == 6);
  CHECK(d.precision == doctest::Approx(0.5));
  CHECK(d.recall == doctest::Approx(0.5));
  CHECK(d.f1 == doctest::Approx(0.5));
  CHECK(d.accuracy == doctest::Approx(7.0 / 9));
  CHECK(r.per_class[2].f1 == 1.0);
  CHECK(r.per_class[3].f1 == 1.0);
  CHECK(r.mean_f1 == doctest::Approx(2.5 / 3));
  CHECK(r.accuracy == doctest::Approx(7.0 / 9));
  CHECK_THROWS_AS(metrics(Tensor<double>(Shape{8, kNumClasses}), gt), ConfigError);
}

TEST_CASE("confusion counts accumulate across grids") {
  const SynthConfig cfg;
  ConfusionMatrix m;
  const Scenario a = generate(cfg, 1), b = generate(cfg, 2);
  m.add(one_hot(a.gt), a.gt);
  m.add(one_hot(b.gt), b.gt);
  CHECK(m.total() == a.gt.cells() + b.gt.cells());
  const MetricReport r = m.report();
  CHECK(r.per_class[1].tp == a.gt.count(MapClass::Divider) + b.gt.count(MapClass::Divider));
  CHECK(r.mean_f1 == 1.0);
}

TEST_CASE("scenario files round-trip exactly") {
  const fs::path dir = scratch_dir("roundtrip");
  DegradationSpec d;
  d.image_noise_sigma = 0.25;
  d.lidar_occlusion_blocks = 3;
  const Scenario s = generate(SynthConfig{}, 99, d);
  save_scenario(dir / "a.sefs", s);
  const Scenario t = load_scenario(dir / "a.sefs");
  CHECK(t.gt.labels == s.gt.labels);
  CHECK(t.lidar.data == s.lidar.data);
  CHECK(t.image.data == s.image.data);
  CHECK(t.seed == 99);
  CHECK(t.degradation.image_noise_sigma == 0.25);
  CHECK(t.degradation.lidar_occlusion_blocks == 3);

  std::ifstream in(dir / "a.sefs", std::ios::binary);
  char magic[4];
  in.read(magic, 4);
  CHECK(std::string(magic, 4) == "SEFS");
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  CHECK(version == kScenarioVersion);
}

TEST_CASE("scenario files with a foreign version or magic are refused") {
  const fs::path dir = scratch_dir("version");
  save_scenario(dir / "a.sefs", generate(SynthConfig{}, 1));
  std::string bytes;
  {
    std::ifstream in(dir / "a.sefs", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) {
    std::ofstream out(dir / "b.sefs", std::ios::binary);
    out << b;
  };
  std::string v = bytes;
  v[4] = static_cast<char>(kScenarioVersion + 1);
  write(v);
  CHECK_THROWS_WITH_AS(load_scenario(dir / "b.sefs"), doctest::Contains("version"), ConfigError);
  std::string m = bytes;
  m[0] = 'X';
  write(m);
  CHECK_THROWS_AS(load_scenario(dir / "b.sefs"), ConfigError);
  write(bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(load_scenario(dir / "b.sefs"), ConfigError);
  CHECK_THROWS_AS(load_scenario(dir / "missing.sefs"), ConfigError);
}

TEST_CASE("a linear probe on intact features decodes the map") {
  const SynthConfig cfg;
  const Cells train = collect(cfg, 0, 8), test = collect(cfg, 1000, 4);
  Eigen::MatrixXd xtr(train.lidar.rows(), 2 * cfg.channels), xte(test.lidar.rows(), 2 * cfg.channels);
  xtr << train.lidar, train.image;
  xte << test.lidar, test.image;
  const Probe p = Probe::fit(xtr, train.label, kNumClasses, false, 1500);
  const auto pred = p.predict(xte);
  double mean = 0;
  for (int k = 1; k < 4; ++k) mean += f1_of(pred, test.label, k) / 3;
  MESSAGE("probe meanF1 " << mean);
  CHECK(mean > 0.9);
}

TEST_CASE("private channels carry no cue for the other modality's class") {
  const SynthConfig cfg;
  const std::size_t g = cfg.channels / 4;
  const Cells train = collect(cfg, 0, 8), test = collect(cfg, 1000, 20);
  auto versus_background = [](const Cells& c, int k) {
    return [&c, k](std::size_t i) { return c.label[i] == k ? 1 : c.label[i] == 0 ? 0 : -1; };
  };

  SUBCASE("image-only channels and boundary") {
    auto [xtr, ytr] = select(block(train.image, g, 2 * g), train, versus_background(train, 2));
    auto [xte, yte] = select(block(test.image, g, 2 * g), test, versus_background(test, 2));
    const double acc = balanced_accuracy(Probe::fit(xtr, ytr, 2).predict(xte), yte);
    MESSAGE("boundary from image-only channels " << acc << " band " << chance_band(yte));
    CHECK(std::abs(acc - 0.5) < chance_band(yte));
    auto [ltr, lytr] = select(block(train.lidar, 2 * g, 3 * g), train, versus_background(train, 2));
    auto [lte, lyte] = select(block(test.lidar, 2 * g, 3 * g), test, versus_background(test, 2));
    CHECK(balanced_accuracy(Probe::fit(ltr, lytr, 2).predict(lte), lyte) > 0.9);
  }

  SUBCASE("lidar-only channels and crossing") {
    auto [xtr, ytr] = select(block(train.lidar, 2 * g, 3 * g), train, versus_background(train, 3));
    auto [xte, yte] = select(block(test.lidar, 2 * g, 3 * g), test, versus_background(test, 3));
    const double acc = balanced_accuracy(Probe::fit(xtr, ytr, 2).predict(xte), yte);
    MESSAGE("crossing from lidar-only channels " << acc << " band " << chance_band(yte));
    CHECK(std::abs(acc - 0.5) < chance_band(yte));
    auto [itr, iytr] = select(block(train.image, g, 2 * g), train, versus_background(train, 3));
    auto [ite, iyte] = select(block(test.image, g, 2 * g), test, versus_background(test, 3));
    CHECK(balanced_accuracy(Probe::fit(itr, iytr, 2).predict(ite), iyte) > 0.9);
  }
}

TEST_CASE("interaction-only dividers need cross-modal products") {
  const SynthConfig cfg;
  const std::size_t g = cfg.channels / 4, c = cfg.channels;
  const Cells train = collect(cfg, 0, 40), test = collect(cfg, 1000, 20);
  auto near_vs_rest = [](const Cells& cells) {
    return [&cells](std::size_t i) { return cells.near[i] ? 1 : cells.label[i] == 0 ? 0 : -1; };
  };
  auto additive = [&](const Cells& cells) {
    Eigen::MatrixXd x(cells.lidar.rows(), 2 * g);
    x << block(cells.lidar, 3 * g, c), block(cells.image, 3 * g, c);
    return x;
  };
  auto products = [&](const Cells& cells) {
    return Eigen::MatrixXd(block(cells.lidar, 3 * g, c).array() * block(cells.image, 3 * g, c).array());
  };
  auto [atr, ytr] = select(additive(train), train, near_vs_rest(train));
  auto [ate, yte] = select(additive(test), test, near_vs_rest(test));
  REQUIRE(std::count(yte.begin(), yte.end(), 1) > 20);
  const double additive_acc = balanced_accuracy(Probe::fit(atr, ytr, 2).predict(ate), yte);
  MESSAGE("additive probe balanced accuracy " << additive_acc << " band " << chance_band(yte));
  CHECK(std::abs(additive_acc - 0.5) < chance_band(yte));

  auto [ptr, pytr] = select(products(train), train, near_vs_rest(train));
  auto [pte, pyte] = select(products(test), test, near_vs_rest(test));
  const double f1 = f1_of(Probe::fit(ptr, pytr, 2).predict(pte), pyte, 1);
  MESSAGE("product probe F1 " << f1);
  CHECK(f1 > 0.8);
}
