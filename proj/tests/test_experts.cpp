// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "sefmap/experts.hpp"
#include "support.hpp"

using namespace sefmap;
using sefmap::test::random_tensor;

namespace {

Tensor<double> rows(std::size_t n, std::vector<double> v) {
  Tensor<double> t(Shape{n, v.size() / n});
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = v[i];
  return t;
}

GateState<double> gate_of(Tape<double>& t, const Tensor<double>& alpha, const Tensor<double>& var, double beta) {
  return gate_from_logits<double>(t.constant(alpha), t.constant(var), beta);
}

ExpertOutput<double> output_with(Tape<double>& t, const Tensor<double>& mu) {
  ExpertOutput<double> o;
  o.mu = t.constant(mu);
  return o;
}

}  // namespace

TEST_CASE("zero heads predict zero mean and unit variance") {
  std::mt19937_64 rng(1);
  auto h = ExpertHead<double>::initialize(ExpertId::Shared, 6, 4, rng);
  h.mean_net.weight.value.fill(0);
  Tape<double> t;
  Binder<double> bind{t, false};
  const auto o = run_head(bind, h, t.constant(random_tensor(Shape{5, 6}, rng)));
  for (double v : o.mu.value().storage()) CHECK(v == 0.0);
  for (double v : o.logvar.value().storage()) CHECK(v == 0.0);
  for (double v : o.mean_var.value().storage()) CHECK(v == 1.0);
}

TEST_CASE("identical cells give identical head outputs") {
  std::mt19937_64 rng(2);
  auto h = ExpertHead<double>::initialize(ExpertId::Lidar, 3, 4, rng);
  h.logvar_net.weight.value = random_tensor(Shape{4, 3}, rng);
  auto z = random_tensor(Shape{4, 3}, rng);
  for (std::size_t c = 0; c < 3; ++c) z.at(3, c) = z.at(1, c);
  Tape<double> t;
  Binder<double> bind{t, false};
  const auto o = run_head(bind, h, t.constant(z));
  for (std::size_t d = 0; d < 4; ++d) {
    CHECK(o.mu.value().at(1, d) == o.mu.value().at(3, d));
    CHECK(o.logvar.value().at(1, d) == o.logvar.value().at(3, d));
  }
}

TEST_CASE("one-layer heads on a single cell match hand arithmetic") {
  std::mt19937_64 rng(3);
  auto h = ExpertHead<double>::initialize(ExpertId::Image, 2, 2, rng);
  h.mean_net.weight.value = rows(2, {1, 2, -1, 0.5});
  (*h.mean_net.bias).value = rows(1, {0.5, -0.5}).reshaped(Shape{2});
  h.logvar_net.weight.value = rows(2, {0.1, 0, 0, -0.2});
  Tape<double> t;
  Binder<double> bind{t, false};
  const auto o = run_head(bind, h, t.constant(rows(1, {3, -2})));
  CHECK(o.mu.value()[0] == doctest::Approx(3 - 4 + 0.5));
  CHECK(o.mu.value()[1] == doctest::Approx(-3 - 1 - 0.5));
  const double b = kLogvarBound;
  const double lv0 = b * std::tanh(0.3 / b), lv1 = b * std::tanh(0.4 / b);
  CHECK(o.logvar.value()[0] == doctest::Approx(lv0).epsilon(1e-12));
  CHECK(o.mean_var.value()[0] == doctest::Approx(0.5 * (std::exp(lv0) + std::exp(lv1))).epsilon(1e-12));
}

TEST_CASE("head input width is checked") {
  std::mt19937_64 rng(4);
  auto h = ExpertHead<double>::initialize(ExpertId::Lidar, 3, 4, rng);
  Tape<double> t;
  Binder<double> bind{t, false};
  CHECK_THROWS_AS(run_head(bind, h, t.constant(random_tensor(Shape{2, 5}, rng))), ConfigError);
}

TEST_CASE("gate hand examples") {
  Tape<double> t;
  const auto uniform = gate_of(t, rows(2, {0.3, 0.3, 0.3, 0.3, -1, -1, -1, -1}), rows(2, std::vector<double>(8, 0.7)), 1.0);
  for (double v : uniform.weights.value().storage()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

  const auto cancel = gate_of(t, rows(1, {1, 0, 0, 0}), rows(1, {1, 0, 0, 0}), 1.0);
  for (double v : cancel.weights.value().storage()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

  const auto pen = gate_of(t, rows(1, {0, 0, 0, 0}), rows(1, {1, 0, 0, 0}), 2.0);
  const long double w1 = std::exp(-2.0L) / (std::exp(-2.0L) + 3.0L);
  CHECK(std::abs(pen.weights.value()[0] - static_cast<double>(w1)) < 1e-9);
  CHECK(pen.weights.value()[0] == doctest::Approx(0.0432).epsilon(1e-3));
  for (std::size_t k = 1; k < 4; ++k) {
    CHECK(std::abs(pen.weights.value()[k] - static_cast<double>((1.0L - w1) / 3.0L)) < 1e-9);
    CHECK(pen.weights.value()[k] == doctest::Approx(0.3189).epsilon(1e-3));
  }
}

TEST_CASE("gate matches a high-precision softmax on random inputs") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> beta_draw(0.01, 5.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto alpha = random_tensor(Shape{3, 4}, rng, 3.0);
    const auto var = test::positive_tensor(Shape{3, 4}, rng);
    const double beta = beta_draw(rng);
    Tape<double> t;
    const auto g = gate_of(t, alpha, var, beta);
    double usage_sum = 0;
    for (std::size_t p = 0; p < 3; ++p) {
      std::vector<long double> z(4);
      for (std::size_t k = 0; k < 4; ++k) z[k] = static_cast<long double>(alpha.at(p, k)) - beta * var.at(p, k);
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) {
        const double w = g.weights.value().at(p, k);
        CHECK(w >= 0);
        CHECK(std::abs(w - static_cast<double>(test::softmax_ld(z, k))) < 1e-9);
        s += w;
      }
      CHECK(std::abs(s - 1) < 1e-9);
    }
    for (std::size_t k = 0; k < 4; ++k) {
      double mean = 0;
      for (std::size_t p = 0; p < 3; ++p) mean += g.weights.value().at(p, k) / 3;
      CHECK(g.usage.value()[k] == doctest::Approx(mean).epsilon(1e-12));
      usage_sum += g.usage.value()[k];
    }
    CHECK(std::abs(usage_sum - 1) < 1e-9);
  }
}

TEST_CASE("raising one expert's variance strictly lowers its weight") {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::size_t> pick(0, 3);
  std::uniform_real_distribution<double> bump(0.01, 2.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto alpha = random_tensor(Shape{1, 4}, rng, 2.0);
    auto var = test::positive_tensor(Shape{1, 4}, rng);
    const std::size_t k = pick(rng);
    Tape<double> t;
    const double before = gate_of(t, alpha, var, 1.0).weights.value()[k];
    var[k] += bump(rng);
    const double after = gate_of(t, alpha, var, 1.0).weights.value()[k];
    CHECK(after < before);
  }
}

TEST_CASE("equal variances keep the argmax of the logits") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto alpha = random_tensor(Shape{1, 4}, rng, 2.0);
    Tensor<double> var(Shape{1, 4});
    var.fill(test::positive_tensor(Shape{1}, rng)[0]);
    Tape<double> t;
    const auto w = gate_of(t, alpha, var, 1.5).weights.value();
    std::size_t a = 0, b = 0;
    for (std::size_t k = 1; k < 4; ++k) {
      if (alpha[k] > alpha[a]) a = k;
      if (w[k] > w[b]) b = k;
    }
    CHECK(a == b);
  }
}

TEST_CASE("gate is invariant to a common logit shift") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const auto alpha = random_tensor(Shape{2, 4}, rng, 2.0);
    const auto var = test::positive_tensor(Shape{2, 4}, rng);
    auto shifted = alpha;
    for (std::size_t k = 0; k < 4; ++k) {
      shifted.at(0, k) += 7.5;
      shifted.at(1, k) -= 3.0;
    }
    Tape<double> t;
    const auto a = gate_of(t, alpha, var, 1.0).weights.value(), b = gate_of(t, shifted, var, 1.0).weights.value();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-12);
  }
}

TEST_CASE("gate network reads the concatenated subspace features") {
  std::mt19937_64 rng(9);
  auto net = GateNet<double>::initialize(true, 4, 3, rng);
  net.linear->weight.value = random_tensor(Shape{4, 12}, rng);
  (*net.linear->bias).value = random_tensor(Shape{4}, rng);
  Tape<double> t;
  Binder<double> bind{t, false};
  std::vector<Var<double>> feats;
  std::vector<ExpertOutput<double>> outs;
  for (std::size_t k = 0; k < 4; ++k) {
    feats.push_back(t.constant(random_tensor(Shape{2, 3}, rng)));
    ExpertOutput<double> o;
    o.mean_var = t.constant(test::positive_tensor(Shape{2, 1}, rng));
    outs.push_back(o);
  }
  const double beta = 0.8;
  const auto g = gate<double>(bind, net, feats, outs, beta);
  for (std::size_t p = 0; p < 2; ++p) {
    std::vector<long double> z(4);
    for (std::size_t k = 0; k < 4; ++k) {
      long double a = (*net.linear->bias).value[k];
      for (std::size_t j = 0; j < 4; ++j) {
        for (std::size_t c = 0; c < 3; ++c) a += net.linear->weight.value.at(k, j * 3 + c) * feats[j].value().at(p, c);
      }
      CHECK(g.alpha.value().at(p, k) == doctest::Approx(static_cast<double>(a)).epsilon(1e-12));
      z[k] = a - beta * outs[k].mean_var.value()[p];
    }
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(std::abs(g.weights.value().at(p, k) - static_cast<double>(test::softmax_ld(z, k))) < 1e-9);
    }
  }
}

TEST_CASE("plain gate has no variance term") {
  std::mt19937_64 rng(10);
  auto net = GateNet<double>::initialize(false, 4, 3, rng);
  CHECK(net.mlp);
  CHECK_FALSE(net.linear);
  Tape<double> t;
  Binder<double> bind{t, false};
  std::vector<Var<double>> feats;
  std::vector<ExpertOutput<double>> outs(4);
  for (std::size_t k = 0; k < 4; ++k) feats.push_back(t.constant(random_tensor(Shape{2, 3}, rng)));
  const auto g = gate<double>(bind, net, feats, outs, 1.0);
  CHECK(g.logits.value() == g.alpha.value());
}

TEST_CASE("mixture examples") {
  std::mt19937_64 rng(11);
  Tape<double> t;
  std::vector<ExpertOutput<double>> outs;
  for (int k = 0; k < 4; ++k) outs.push_back(output_with(t, random_tensor(Shape{2, 3}, rng)));
  Tensor<double> var(Shape{2, 4});
  const auto onehot = gate_of(t, rows(2, {0, 0, 60, 0, 0, 0, 60, 0}), var, 1.0);
  const auto y = mixture<double>(outs, onehot).value();
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(outs[2].mu.value()[i]).epsilon(1e-12));

  std::vector<ExpertOutput<double>> same(4, output_with(t, rows(1, {1.5, -2})));
  const auto any = gate_of(t, rows(1, {0.3, -1, 2, 0.1}), Tensor<double>(Shape{1, 4}), 1.0);
  const auto ys = mixture<double>(same, any).value();
  CHECK(ys[0] == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(ys[1] == doctest::Approx(-2.0).epsilon(1e-12));

  std::vector<ExpertOutput<double>> scal;
  for (double m : {1.0, 2.0, 3.0, 4.0}) scal.push_back(output_with(t, rows(1, {m})));
  GateState<double> hand;
  hand.weights = t.constant(rows(1, {0.1, 0.2, 0.3, 0.4}));
  CHECK(mixture<double>(scal, hand).value()[0] == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("mixture stays inside the expert range") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    Tape<double> t;
    std::vector<ExpertOutput<double>> outs;
    for (int k = 0; k < 4; ++k) outs.push_back(output_with(t, random_tensor(Shape{3, 2}, rng, 2.0)));
    const auto g = gate_of(t, random_tensor(Shape{3, 4}, rng, 3.0), test::positive_tensor(Shape{3, 4}, rng), 1.0);
    const auto y = mixture<double>(outs, g).value();
    for (std::size_t i = 0; i < y.size(); ++i) {
      double lo = 1e300, hi = -1e300;
      for (const auto& o : outs) {
        lo = std::min(lo, o.mu.value()[i]);
        hi = std::max(hi, o.mu.value()[i]);
      }
      CHECK(y[i] >= lo - 1e-12);
      CHECK(y[i] <= hi + 1e-12);
    }
  }
}

TEST_CASE("balance regularizer") {
  Tape<double> t;
  auto omega = [&](std::vector<double> usage) {
    GateState<double> g;
    g.usage = t.constant(rows(1, std::move(usage)));
    return balance_regularizer<double>(g).value()[0];
  };
  CHECK(omega({0.25, 0.25, 0.25, 0.25}) == 0.0);
  CHECK(std::abs(omega({1, 0, 0, 0}) - 0.75) < 1e-15);
  CHECK(std::abs(omega({0.5, 0.5, 0, 0}) - 0.25) < 1e-15);

  std::mt19937_64 rng(13);
  const double bound = 0.75 * 0.75 + 3.0 / 16.0;
  for (int trial = 0; trial < 500; ++trial) {
    const auto g = gate_of(t, random_tensor(Shape{5, 4}, rng, 4.0), test::positive_tensor(Shape{5, 4}, rng), 1.0);
    const double v = balance_regularizer<double>(g).value()[0];
    CHECK(v >= 0);
    CHECK(v <= bound + 1e-12);
  }
}

TEST_CASE("head, gate and mixture gradients match central differences") {
  std::mt19937_64 rng(14);
  std::vector<ExpertHead<double>> heads;
  for (ExpertId k : kAllExperts) {
    heads.push_back(ExpertHead<double>::initialize(k, 3, 2, rng));
    heads.back().logvar_net.weight.value = random_tensor(Shape{2, 3}, rng, 0.5);
  }
  auto net = GateNet<double>::initialize(true, 4, 3, rng);
  net.linear->weight.value = random_tensor(Shape{4, 12}, rng, 0.5);
  std::vector<Tensor<double>> z;
  for (int k = 0; k < 4; ++k) z.push_back(random_tensor(Shape{5, 3}, rng));
  LossBuilder<double> build = [&](Tape<double>& t) {
    Binder<double> bind{t, true};
    std::vector<Var<double>> feats;
    std::vector<ExpertOutput<double>> outs;
    for (int k = 0; k < 4; ++k) {
      feats.push_back(t.constant(z[k]));
      outs.push_back(run_head(bind, heads[k], feats.back()));
    }
    const auto g = gate<double>(bind, net, feats, outs, 1.0);
    return ops::add(test::project_to_scalar(mixture<double>(outs, g), 5), balance_regularizer<double>(g));
  };
  std::vector<Param<double>*> params;
  for (auto& h : heads) h.for_each_param([&](Param<double>& p) { params.push_back(&p); });
  net.for_each_param([&](Param<double>& p) { params.push_back(&p); });
  CHECK(test::max_fd_error(build, params) < 1e-6);
}
