// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "sefmap/losses_spec.hpp"
#include "support.hpp"

using namespace sefmap;
using sefmap::test::random_tensor;

namespace {

using Row = std::vector<double>;

Tensor<double> rows(std::size_t n, std::vector<double> v) {
  Tensor<double> t(Shape{n, v.size() / n});
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = v[i];
  return t;
}

double scalar(Var<double> v) { return v.value()[0]; }

double d_of(const Tensor<double>& a, const Tensor<double>& b, Dissimilarity kind) {
  Tape<double> t;
  return scalar(dissimilarity(t.constant(a), t.constant(b), kind));
}

Row softmax(const Row& x) {
  double m = x[0];
  for (double v : x) m = std::max(m, v);
  Row p(x.size());
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += p[i] = std::exp(x[i] - m);
  for (double& v : p) v /= s;
  return p;
}

double d_ref(const Row& a, const Row& b, Dissimilarity kind) {
  double out = 0;
  if (kind == Dissimilarity::SquaredL2OnLogits) {
    for (std::size_t i = 0; i < a.size(); ++i) out += (a[i] - b[i]) * (a[i] - b[i]) / static_cast<double>(a.size());
    return out;
  }
  const Row p = softmax(a), q = softmax(b);
  for (std::size_t i = 0; i < a.size(); ++i) {
    out += kind == Dissimilarity::SquaredL2OnProbs ? (p[i] - q[i]) * (p[i] - q[i])
                                                   : p[i] * std::log(p[i] / q[i]) + q[i] * std::log(q[i] / p[i]);
  }
  return out;
}

Row row_of(const Tensor<double>& t, std::size_t r) {
  Row out(t.cols());
  for (std::size_t c = 0; c < t.cols(); ++c) out[c] = t.at(r, c);
  return out;
}

ForwardResult<double> pass_with(Tape<double>& t, const std::vector<Tensor<double>>& mus) {
  ForwardResult<double> f;
  for (std::size_t k = 0; k < mus.size(); ++k) {
    f.experts.push_back(kAllExperts[k]);
    ExpertOutput<double> o;
    o.mu = t.constant(mus[k]);
    f.outputs.push_back(o);
  }
  return f;
}

PassOutputs<double> passes_with(Tape<double>& t, const std::vector<Tensor<double>>& intact,
                                const std::vector<Tensor<double>>& img, const std::vector<Tensor<double>>& lid) {
  return PassOutputs<double>{pass_with(t, intact), pass_with(t, img), pass_with(t, lid)};
}

ModelConfig small_model() {
  ModelConfig mc;
  mc.channels = 4;
  mc.interaction_rank = 2;
  return mc;
}

}  // namespace

TEST_CASE("dissimilarity hand values") {
  for (Dissimilarity k : {Dissimilarity::SquaredL2OnProbs, Dissimilarity::SquaredL2OnLogits, Dissimilarity::SymmetricKL}) {
    const auto a = rows(1, {0.3, -1.2, 2.0});
    CHECK(d_of(a, a, k) == doctest::Approx(0.0));
  }
  CHECK(d_of(rows(1, {1, 0}), rows(1, {0, 1}), Dissimilarity::SquaredL2OnLogits) == doctest::Approx(1.0).epsilon(1e-12));
  const double p = 1.0 / (1.0 + std::exp(-1.0));
  CHECK(d_of(rows(1, {1, 0}), rows(1, {0, 1}), Dissimilarity::SquaredL2OnProbs) ==
        doctest::Approx(2 * (2 * p - 1) * (2 * p - 1)).epsilon(1e-12));
  CHECK(d_of(rows(1, {1, 0}), rows(1, {0, 1}), Dissimilarity::SymmetricKL) ==
        doctest::Approx(2 * (2 * p - 1) * std::log(p / (1 - p))).epsilon(1e-12));
  CHECK(d_of(rows(1, {60, 0}), rows(1, {0, 60}), Dissimilarity::SquaredL2OnProbs) == doctest::Approx(2.0));
  CHECK(d_of(rows(1, {1, 2}), rows(1, {4, 5}), Dissimilarity::SquaredL2OnProbs) == doctest::Approx(0.0));
  CHECK(d_of(rows(1, {1, 2}), rows(1, {4, 5}), Dissimilarity::SymmetricKL) == doctest::Approx(0.0));
}

TEST_CASE("dissimilarity is symmetric, nonnegative and matches a per-row oracle") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_tensor(Shape{3, 4}, rng, 2.0), b = random_tensor(Shape{3, 4}, rng, 2.0);
    for (Dissimilarity k : {Dissimilarity::SquaredL2OnProbs, Dissimilarity::SquaredL2OnLogits, Dissimilarity::SymmetricKL}) {
      Tape<double> t;
      const auto ab = dissimilarity(t.constant(a), t.constant(b), k).value();
      const auto ba = dissimilarity(t.constant(b), t.constant(a), k).value();
      REQUIRE((ab.shape() == Shape{3, 1}));
      for (std::size_t r = 0; r < 3; ++r) {
        CHECK(ab[r] >= 0);
        CHECK(ab[r] == doctest::Approx(ba[r]).epsilon(1e-12));
        CHECK(ab[r] == doctest::Approx(d_ref(row_of(a, r), row_of(b, r), k)).epsilon(1e-10));
      }
      if (k == Dissimilarity::SquaredL2OnProbs) {
        for (std::size_t r = 0; r < 3; ++r) CHECK(ab[r] <= 2.0);
      }
    }
  }
  Tape<double> t;
  CHECK_THROWS_AS(dissimilarity(t.constant(rows(1, {1, 2})), t.constant(rows(1, {1, 2, 3}))), ConfigError);
}

TEST_CASE("per-expert specialization hand values") {
  SpecConfig cfg;
  cfg.kind = Dissimilarity::SquaredL2OnLogits;
  Tape<double> t;
  const auto z = rows(1, {0.0}), half = rows(1, {std::sqrt(0.2)}), one = rows(1, {1.0});
  const auto p = passes_with(t, {z, z}, {half, one}, {one, half});
  CHECK(scalar(spec_loss_per_expert(p, ExpertId::Lidar, cfg)) == doctest::Approx(-0.3).epsilon(1e-12));
  CHECK(scalar(spec_loss_per_expert(p, ExpertId::Image, cfg)) == doctest::Approx(-0.3).epsilon(1e-12));

  std::mt19937_64 rng(2);
  const auto mu = random_tensor(Shape{5, 4}, rng);
  const std::vector<Tensor<double>> same(4, mu);
  const auto flat = passes_with(t, same, same, same);
  for (Dissimilarity k : {Dissimilarity::SquaredL2OnProbs, Dissimilarity::SquaredL2OnLogits, Dissimilarity::SymmetricKL}) {
    cfg.kind = k;
    cfg.margin = 1.0;
    for (double v : spec_loss_per_expert(flat, ExpertId::Shared, cfg).value().storage()) CHECK(v == 0.0);
    for (double v : spec_loss_per_expert(flat, ExpertId::Interaction, cfg).value().storage()) CHECK(v == 2.0);
    CHECK(scalar(spec_loss(flat, cfg)) == doctest::Approx(2.0));
  }
}

TEST_CASE("specialization needs all passes and active experts") {
  Tape<double> t;
  const auto z = rows(1, {0.0, 1.0});
  PassOutputs<double> partial{pass_with(t, {z, z}), std::nullopt, std::nullopt};
  SpecConfig cfg;
  CHECK_THROWS_AS(spec_loss_per_expert(partial, ExpertId::Lidar, cfg), ConfigError);
  const auto two = passes_with(t, {z, z}, {z, z}, {z, z});
  CHECK_THROWS_AS(spec_loss_per_expert(two, ExpertId::Shared, cfg), ConfigError);
  cfg.gamma = 0;
  CHECK_THROWS_AS(spec_loss_per_expert(two, ExpertId::Lidar, cfg), ConfigError);
  cfg.gamma = 1.5;
  CHECK_THROWS_AS(spec_loss_per_expert(two, ExpertId::Lidar, cfg), ConfigError);
  cfg.gamma = 0.5;
  cfg.margin = 0;
  CHECK_THROWS_AS(spec_loss_per_expert(two, ExpertId::Lidar, cfg), ConfigError);
}

TEST_CASE("specialization bounds on random passes") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> gamma(0.05, 1.0), margin(0.1, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Tensor<double>> a, b, c;
    for (int k = 0; k < 4; ++k) {
      a.push_back(random_tensor(Shape{4, 4}, rng, 2.0));
      b.push_back(random_tensor(Shape{4, 4}, rng, 2.0));
      c.push_back(random_tensor(Shape{4, 4}, rng, 2.0));
    }
    Tape<double> t;
    const auto p = passes_with(t, a, b, c);
    SpecConfig cfg;
    cfg.gamma = gamma(rng);
    cfg.margin = margin(rng);
    cfg.kind = trial % 2 ? Dissimilarity::SquaredL2OnProbs : Dissimilarity::SymmetricKL;
    const auto ls = spec_loss_per_expert(p, ExpertId::Shared, cfg).value();
    const auto li = spec_loss_per_expert(p, ExpertId::Interaction, cfg).value();
    const auto ll = spec_loss_per_expert(p, ExpertId::Lidar, cfg).value();
    const auto lidar_masked_d = dissimilarity(p.intact.outputs[0].mu, p.lidar_masked->outputs[0].mu, cfg.kind).value();
    for (std::size_t r = 0; r < 4; ++r) {
      CHECK(ls[r] >= 0);
      CHECK(li[r] >= 0);
      CHECK(li[r] <= 2 * cfg.margin + 1e-12);
      CHECK(ll[r] >= -cfg.gamma * lidar_masked_d[r] - 1e-12);
      if (cfg.kind == Dissimilarity::SquaredL2OnProbs) CHECK(ll[r] >= -2 * cfg.gamma - 1e-12);
    }
  }
}

TEST_CASE("interaction hinge is inactive past the margin") {
  Tape<double> t;
  SpecConfig cfg;
  cfg.kind = Dissimilarity::SquaredL2OnLogits;
  cfg.margin = 0.5;
  Param<double> mu("mu", rows(1, {0.0, 0.0}));
  auto p = passes_with(t, {rows(1, {0, 0}), rows(1, {0, 0}), rows(1, {0, 0}), rows(1, {0, 0})},
                       {rows(1, {0, 0}), rows(1, {0, 0}), rows(1, {0, 0}), rows(1, {1, -1})},
                       {rows(1, {0, 0}), rows(1, {0, 0}), rows(1, {0, 0}), rows(1, {-1, 1})});
  p.intact.outputs[3].mu = t.parameter(mu);
  const auto l = spec_loss_per_expert(p, ExpertId::Interaction, cfg);
  CHECK(scalar(l) == 0.0);
  t.backward(ops::sum_all(l));
  CHECK(mu.grad == Tensor<double>(Shape{1, 2}));
}

TEST_CASE("specialization loss equals a per-cell recomputation") {
  std::mt19937_64 rng(4);
  Model<double> model(small_model(), 5);
  const auto l = random_tensor(Shape{9, 4}, rng), v = random_tensor(Shape{9, 4}, rng);
  EmaStats stats;
  ema_update(stats, Modality::Lidar, l);
  ema_update(stats, Modality::Image, v);
  for (Dissimilarity kind : {Dissimilarity::SquaredL2OnProbs, Dissimilarity::SquaredL2OnLogits, Dissimilarity::SymmetricKL}) {
    SpecConfig cfg;
    cfg.kind = kind;
    cfg.gamma = 0.7;
    cfg.margin = 0.4;
    Tape<double> t;
    std::mt19937_64 r(1);
    const auto p = tri_pass(model, t, l, v, stats, r);
    double ref = 0;
    for (std::size_t c = 0; c < 9; ++c) {
      Row dm(4), dl(4);
      for (std::size_t k = 0; k < 4; ++k) {
        const Row in = row_of(p.intact.outputs[k].mu.value(), c);
        dm[k] = d_ref(in, row_of(p.image_masked->outputs[k].mu.value(), c), kind);
        dl[k] = d_ref(in, row_of(p.lidar_masked->outputs[k].mu.value(), c), kind);
      }
      ref += (dm[0] - 0.7 * dl[0]) + (dl[1] - 0.7 * dm[1]) + (dm[2] + dl[2]) +
             (std::max(0.0, 0.4 - dm[3]) + std::max(0.0, 0.4 - dl[3]));
    }
    CHECK(scalar(spec_loss(p, cfg)) == doctest::Approx(ref / 9).epsilon(1e-10));
  }
}

TEST_CASE("task loss") {
  Tape<double> t;
  const std::vector<std::uint16_t> labels{2, 0, 3};
  Tensor<double> flat(Shape{3, 4});
  CHECK(scalar(task_loss<double>(t.constant(flat), labels)) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  Tensor<double> sharp(Shape{3, 4});
  for (std::size_t r = 0; r < 3; ++r) sharp.at(r, labels[r]) = 20;
  CHECK(scalar(task_loss<double>(t.constant(sharp), labels)) < 1e-8);

  const auto two = rows(2, {1, 0, 0, 0, 0, 2, 0, -1});
  const std::vector<std::uint16_t> y{0, 3};
  const double ce0 = -1 + std::log(std::exp(1.0) + 3), ce1 = 1 + std::log(2 + std::exp(2.0) + std::exp(-1.0));
  CHECK(scalar(task_loss<double>(t.constant(two), y)) == doctest::Approx((ce0 + ce1) / 2).epsilon(1e-12));
  const std::vector<double> w{2.0, 1.0, 1.0, 0.5};
  CHECK(scalar(task_loss<double>(t.constant(two), y, w)) ==
        doctest::Approx((2 * ce0 + 0.5 * ce1) / 2.5).epsilon(1e-12));
  const std::vector<std::uint16_t> bad{0, 4};
  CHECK_THROWS_AS(task_loss<double>(t.constant(two), bad), ConfigError);
}

TEST_CASE("total loss") {
  Tape<double> t;
  auto c = [&](double v) { return t.constant(Tensor<double>::scalar(v)); };
  const LossWeights paper;
  CHECK(scalar(total_loss<double>({c(1), c(0), c(0), c(0)}, paper)) == doctest::Approx(1.0));
  CHECK(scalar(total_loss<double>({c(1), c(1), c(1), c(1)}, paper)) == doctest::Approx(1.65).epsilon(1e-12));
  CHECK(scalar(total_loss<double>({c(0.7), std::nullopt, std::nullopt, std::nullopt}, paper)) == doctest::Approx(0.7));
  LossWeights only_task{1.0, 0.0, 0.0, 0.0};
  CHECK(scalar(total_loss<double>({c(1.3), c(4), c(5), c(6)}, only_task)) == doctest::Approx(1.3));

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int trial = 0; trial < 100; ++trial) {
    const double a = u(rng), b = u(rng), s = u(rng), o = u(rng), d = u(rng);
    const double base = scalar(total_loss<double>({c(a), c(b), c(s), c(o)}, paper));
    const double moved = scalar(total_loss<double>({c(a), c(b), c(s + d), c(o)}, paper));
    CHECK(moved - base == doctest::Approx(paper.spec * d).epsilon(1e-9));
  }

  CHECK_THROWS_WITH_AS(total_loss<double>({c(1), c(std::nan("")), c(0), c(0)}, paper), doctest::Contains("space"),
                       NumericalError);
  CHECK_THROWS_WITH_AS(total_loss<double>({c(1), c(0), c(INFINITY), c(0)}, paper), doctest::Contains("spec"),
                       NumericalError);
  LossWeights negative;
  negative.bal = -1;
  CHECK_THROWS_AS(total_loss<double>({c(1), c(0), c(0), c(0)}, negative), ConfigError);
}

TEST_CASE("specialization gradients pass central differences through all three passes") {
  std::mt19937_64 rng(6);
  Model<double> model(small_model(), 7);
  const auto l = random_tensor(Shape{6, 4}, rng), v = random_tensor(Shape{6, 4}, rng);
  EmaStats stats;
  ema_update(stats, Modality::Lidar, l);
  ema_update(stats, Modality::Image, v);
  for (Dissimilarity kind : {Dissimilarity::SquaredL2OnProbs, Dissimilarity::SquaredL2OnLogits, Dissimilarity::SymmetricKL}) {
    SpecConfig cfg;
    cfg.kind = kind;
    cfg.margin = 5.0;
    LossBuilder<double> build = [&](Tape<double>& t) {
      std::mt19937_64 r(2);
      const auto p = tri_pass(model, t, l, v, stats, r);
      const std::vector<std::uint16_t> y{0, 1, 2, 3, 0, 1};
      return ops::add(spec_loss(p, cfg), task_loss<double>(p.intact.prediction, y));
    };
    CHECK(test::max_fd_error(build, model.params(), 1e-5) < 1e-5);
  }
}

TEST_CASE("variance likelihood") {
  Tape<double> t;
  ForwardResult<double> f = pass_with(t, {rows(2, {0, 0, 2, 0}), rows(2, {1, -1, 0, 0})});
  f.outputs[0].logvar = t.constant(rows(2, {0, 0, 1, -1}));
  f.outputs[1].logvar = t.constant(rows(2, {0.5, 0.5, 0.5, 0.5}));
  const std::vector<std::uint16_t> y{0, 1};
  double expect = 0;
  for (std::size_t k = 0; k < 2; ++k) {
    double e = 0;
    for (std::size_t i = 0; i < 2; ++i) {
      const Row p = softmax(row_of(f.outputs[k].mu.value(), i));
      const Row s = row_of(f.outputs[k].logvar.value(), i);
      for (std::size_t d = 0; d < 2; ++d) {
        const double r = (d == y[i] ? 1.0 : 0.0) - p[d];
        e += 0.5 * (s[d] + r * r * std::exp(-s[d])) / 4;
      }
    }
    expect += e / 2;
  }
  CHECK(scalar(variance_nll(f, y)) == doctest::Approx(expect).epsilon(1e-12));
  CHECK_THROWS_AS(variance_nll(f, std::vector<std::uint16_t>{0}), ConfigError);
  CHECK_THROWS_AS(variance_nll(f, std::vector<std::uint16_t>{0, 2}), ConfigError);

  std::mt19937_64 rng(9);
  Model<double> model(small_model(), 3);
  const auto l = random_tensor(Shape{6, 4}, rng), v = random_tensor(Shape{6, 4}, rng);
  LossBuilder<double> build = [&](Tape<double>& tape) {
    const auto pass = model.forward(tape, l, v, true);
    return variance_nll(pass, std::vector<std::uint16_t>{0, 1, 2, 3, 0, 1});
  };
  CHECK(test::max_fd_error(build, model.params(), 1e-5) < 1e-5);

  LossWeights w;
  CHECK(w.nll == 0.0);
  w.nll = 2.0;
  auto c = [&](double x) { return t.constant(Tensor<double>::scalar(x)); };
  CHECK(scalar(total_loss<double>({c(1), std::nullopt, std::nullopt, std::nullopt, c(0.25)}, w)) ==
        doctest::Approx(1.5));
}
