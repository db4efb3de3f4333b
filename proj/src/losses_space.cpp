// SPDX-License-Identifier: Apache-2.0
#include "sefmap/losses_space.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iostream>
#include <numeric>

#include "sefmap/ops.hpp"

namespace sefmap {

void SpaceLossConfig::validate() const {
  if (sample_cells < 2) throw ConfigError("space loss: sample_cells must be at least 2");
  if (!(infonce_temperature > 0)) throw ConfigError("space loss: infonce_temperature must be positive");
}

namespace {

template <typename Real>
Real median_offdiag(const Tensor<Real>& d) {
  const std::size_t n = d.rows();
  std::vector<Real> v;
  v.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) v.push_back(d.at(i, j));
  }
  if (v.empty()) return Real(1);
  auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid > Real(0) ? *mid : Real(1);
}

template <typename Real>
Var<Real> rbf_gram(Var<Real> x) {
  Var<Real> d = ops::pairwise_sqdist(x);
  const Real s2 = median_offdiag(d.value());
  return ops::exp(ops::affine(d, Real(-0.5) / s2));
}

}  // namespace

template <typename Real>
Var<Real> hsic(Var<Real> x, Var<Real> y, HsicKernel kernel) {
  const std::size_t n = x.rows();
  if (y.rows() != n) {
    throw ConfigError("hsic: sample counts differ (" + shape_str(x.shape()) + " vs " + shape_str(y.shape()) + ")");
  }
  if (n < 2) throw ConfigError("hsic needs at least two samples");
  const Real nn = static_cast<Real>(n) * static_cast<Real>(n);
  if (kernel == HsicKernel::Linear) {
    // tr(K H L H) = |Xc^T Yc|_F^2 / (d1 d2) for K = X X^T / d1, L = Y Y^T / d2.
    Var<Real> cross = ops::matmul_tn(ops::center_cols(x), ops::center_cols(y));
    const Real scale = Real(1) / (nn * static_cast<Real>(x.cols()) * static_cast<Real>(y.cols()));
    return ops::affine(ops::sum_all(ops::square(cross)), scale);
  }
  Var<Real> kc = ops::double_center(rbf_gram(x));
  Var<Real> l = rbf_gram(y);
  return ops::affine(ops::sum_all(ops::mul(kc, l)), Real(1) / nn);
}

template <typename Real>
Var<Real> shared_alignment(Var<Real> r_lidar, Var<Real> r_image, Real eps) {
  if (r_lidar.rows() != r_image.rows() || r_lidar.cols() != r_image.cols()) {
    throw ConfigError("shared_alignment: shape mismatch " + shape_str(r_lidar.shape()) + " vs " +
                      shape_str(r_image.shape()));
  }
  if (r_lidar.rows() < 2) throw ConfigError("shared_alignment needs at least two samples");
  Var<Real> a = ops::center_cols(r_lidar);
  Var<Real> b = ops::center_cols(r_image);
  Var<Real> cov = ops::col_sum(ops::mul(a, b));
  Var<Real> var = ops::mul(ops::col_sum(ops::square(a)), ops::col_sum(ops::square(b)));
  Var<Real> corr = ops::div(cov, ops::sqrt(ops::affine(var, Real(1), eps)));
  return ops::affine(ops::mean_all(corr), Real(-1));
}

template <typename Real>
Var<Real> infonce_from_scores(Var<Real> positive, std::optional<Var<Real>> negatives) {
  if (positive.cols() != 1) throw ConfigError("infonce: positive scores must be [n x 1]");
  if (!negatives || negatives->cols() == 0) {
    // A lone positive has log-softmax exactly zero.
    return ops::affine(ops::mean_all(ops::log_softmax_rows(positive)), Real(-1));
  }
  if (negatives->rows() != positive.rows()) throw ConfigError("infonce: score row counts differ");
  std::array<Var<Real>, 2> parts{positive, *negatives};
  Var<Real> lsm = ops::log_softmax_rows(ops::concat_cols<Real>(parts));
  return ops::affine(ops::mean_all(ops::slice_cols(lsm, 0, 1)), Real(-1));
}

std::vector<std::size_t> sample_negatives(std::size_t anchors, std::size_t count, std::mt19937_64& rng) {
  if (anchors < 2 || count == 0) return {};
  std::vector<std::size_t> out(anchors * count);
  std::uniform_int_distribution<std::size_t> pick(0, anchors - 2);
  for (std::size_t p = 0; p < anchors; ++p) {
    for (std::size_t j = 0; j < count; ++j) {
      const std::size_t q = pick(rng);
      out[p * count + j] = q >= p ? q + 1 : q;
    }
  }
  return out;
}

template <typename Real>
Var<Real> interaction_infonce(Var<Real> interaction_codes, Var<Real> lidar_cells, Var<Real> image_cells,
                              SubspaceParams<Real>& params, std::span<const std::size_t> negatives,
                              std::size_t negatives_per_anchor, Real temperature) {
  if (!(temperature > Real(0))) throw ConfigError("infonce temperature must be positive");
  const std::size_t n = interaction_codes.rows();
  if (n < 1) throw ConfigError("infonce needs at least one cell");
  const Real eps = Real(1e-8);
  const Real inv_tau = Real(1) / temperature;
  Var<Real> anchor = ops::normalize_rows(interaction_codes, eps);
  Var<Real> positive = ops::affine(ops::row_dot(anchor, anchor), inv_tau);
  if (negatives_per_anchor == 0) return infonce_from_scores<Real>(positive, std::nullopt);
  if (negatives.empty()) {
    std::clog << "warning: infonce with " << n << " cell(s) has no negatives; loss is 0\n";
    return infonce_from_scores<Real>(positive, std::nullopt);
  }
  if (negatives.size() != n * negatives_per_anchor) throw ConfigError("infonce: negative index table size");

  Tape<Real>& tape = *interaction_codes.tape;
  Binder<Real> frozen{tape, false};
  Var<Real> codes = ops::stop_gradient(ops::normalize_rows(
      interaction(frozen, params, frozen.constant(lidar_cells.value()), frozen.constant(image_cells.value())), eps));

  std::vector<std::size_t> repeat(n * negatives_per_anchor);
  for (std::size_t i = 0; i < repeat.size(); ++i) repeat[i] = i / negatives_per_anchor;
  Var<Real> lhs = ops::gather_rows<Real>(anchor, repeat);
  Var<Real> rhs = ops::gather_rows<Real>(codes, negatives);
  Var<Real> neg = ops::reshape(ops::affine(ops::row_dot(lhs, rhs), inv_tau), Shape{n, negatives_per_anchor});
  return infonce_from_scores<Real>(positive, neg);
}

template <typename Real>
SpaceLossTerms<Real> space_loss(const ForwardResult<Real>& pass, SubspaceParams<Real>& params,
                                std::size_t grids, const SpaceLossConfig& config, std::mt19937_64& rng) {
  config.validate();
  if (!pass.bundle) throw ConfigError("space loss needs a subspace decomposition");
  const SubspaceBundle<Real>& b = *pass.bundle;
  const std::size_t total = pass.lidar_in.rows();
  if (grids == 0 || total % grids != 0) throw ConfigError("space loss: cells do not split evenly into grids");
  const std::size_t per_grid = total / grids;
  const std::size_t take = std::min(config.sample_cells, per_grid);
  if (take < 2) throw ConfigError("space loss: grids need at least two cells");

  const bool uni = b.lidar.valid() || b.image.valid();
  const bool shr = b.lidar.valid() || b.image.valid() || b.shared.valid();
  const bool inter = b.interaction.valid();

  std::vector<Var<Real>> uni_terms, shr_terms, int_terms;
  std::vector<std::size_t> order(per_grid);
  for (std::size_t g = 0; g < grids; ++g) {
    std::iota(order.begin(), order.end(), g * per_grid);
    std::vector<std::size_t> idx;
    if (take == per_grid) {
      idx = order;
    } else {
      idx.resize(take);
      std::sample(order.begin(), order.end(), idx.begin(), take, rng);
    }
    Var<Real> lid = ops::gather_rows<Real>(pass.lidar_in, idx);
    Var<Real> img = ops::gather_rows<Real>(pass.image_in, idx);
    if (uni) {
      uni_terms.push_back(ops::add(hsic(ops::gather_rows<Real>(b.proj.u_lidar, idx), img, config.hsic_kernel),
                                   hsic(ops::gather_rows<Real>(b.proj.u_image, idx), lid, config.hsic_kernel)));
    }
    if (shr) {
      shr_terms.push_back(shared_alignment(ops::gather_rows<Real>(b.proj.r_lidar, idx),
                                           ops::gather_rows<Real>(b.proj.r_image, idx)));
    }
    if (inter) {
      const auto neg = sample_negatives(take, config.infonce_negatives, rng);
      int_terms.push_back(interaction_infonce(ops::gather_rows<Real>(b.interaction, idx), lid, img, params, neg,
                                              config.infonce_negatives,
                                              static_cast<Real>(config.infonce_temperature)));
    }
  }

  auto average = [](const std::vector<Var<Real>>& terms) -> std::optional<Var<Real>> {
    if (terms.empty()) return std::nullopt;
    std::vector<Real> w(terms.size(), Real(1) / static_cast<Real>(terms.size()));
    return ops::weighted_sum<Real>(terms, w);
  };
  SpaceLossTerms<Real> out;
  out.uni = average(uni_terms);
  out.shr = average(shr_terms);
  out.inter = average(int_terms);
  std::vector<Var<Real>> parts;
  for (const auto& t : {out.uni, out.shr, out.inter}) {
    if (t) parts.push_back(*t);
  }
  if (parts.empty()) {
    out.total = pass.lidar_in.tape->constant(Tensor<Real>::scalar(Real(0)));
  } else {
    std::vector<Real> ones(parts.size(), Real(1));
    out.total = ops::weighted_sum<Real>(parts, ones);
  }
  return out;
}

#define SEFMAP_INSTANTIATE_SPACE(R)                                                                       \
  template Var<R> hsic(Var<R>, Var<R>, HsicKernel);                                                       \
  template Var<R> shared_alignment(Var<R>, Var<R>, R);                                                    \
  template Var<R> infonce_from_scores(Var<R>, std::optional<Var<R>>);                                     \
  template Var<R> interaction_infonce(Var<R>, Var<R>, Var<R>, SubspaceParams<R>&,                         \
                                      std::span<const std::size_t>, std::size_t, R);                      \
  template SpaceLossTerms<R> space_loss(const ForwardResult<R>&, SubspaceParams<R>&, std::size_t,         \
                                        const SpaceLossConfig&, std::mt19937_64&);

SEFMAP_INSTANTIATE_SPACE(float)
SEFMAP_INSTANTIATE_SPACE(double)

}  // namespace sefmap
