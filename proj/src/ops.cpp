// SPDX-License-Identifier: Apache-2.0
#include "sefmap/ops.hpp"

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <string>

namespace sefmap::ops {
namespace {

template <typename Real>
using MatMap = Eigen::Map<Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename Real>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename Real>
MatMap<Real> mat(Tensor<Real>& t) {
  return MatMap<Real>(t.data(), static_cast<Eigen::Index>(t.rows()),
                      static_cast<Eigen::Index>(t.cols()));
}

template <typename Real>
ConstMatMap<Real> mat(const Tensor<Real>& t) {
  return ConstMatMap<Real>(t.data(), static_cast<Eigen::Index>(t.rows()),
                           static_cast<Eigen::Index>(t.cols()));
}

template <typename Real>
Tape<Real>& tape_of(Var<Real> a) {
  if (!a.valid()) throw TapeError("operation on an unbound variable");
  return *a.tape;
}

template <typename Real>
Tape<Real>& tape_of(Var<Real> a, Var<Real> b) {
  if (a.tape != b.tape || !a.valid()) throw TapeError("operands recorded on different tapes");
  return *a.tape;
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <typename Real>
void require_same(const char* op, Var<Real> a, Var<Real> b) {
  if (a.value().size() != b.value().size() || a.cols() != b.cols()) {
    shape_error(op, a.shape(), b.shape());
  }
}

Shape with_last(const Shape& s, std::size_t last) {
  Shape out = s.empty() ? Shape{1} : s;
  out.back() = last;
  return out;
}

template <typename Real>
void accumulate(Tensor<Real>& dst, const Tensor<Real>& src) {
  Real* d = dst.data();
  const Real* s = src.data();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += s[i];
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

}  // namespace

template <typename Real>
Var<Real> linear(Var<Real> x, Var<Real> weight, std::optional<Var<Real>> bias) {
  Tape<Real>& t = tape_of(x, weight);
  const auto& xv = x.value();
  const auto& wv = weight.value();
  if (wv.shape().size() != 2 || xv.cols() != wv.shape()[1]) {
    shape_error("linear_map", xv.shape(), wv.shape());
  }
  const std::size_t out = wv.shape()[0];
  if (bias && bias->value().size() != out) shape_error("linear_map bias", wv.shape(), bias->shape());
  Tensor<Real> y(with_last(xv.shape(), out));
  auto ym = mat(y);
  ym.noalias() = mat(xv) * mat(wv).transpose();
  if (bias) {
    const Real* b = bias->value().data();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      Real* row = y.data() + r * out;
      for (std::size_t c = 0; c < out; ++c) row[c] += b[c];
    }
  }
  const bool rg = t.requires_grad(x) || t.requires_grad(weight) || (bias && t.requires_grad(*bias));
  const std::size_t xi = x.id, wi = weight.id;
  const std::optional<std::size_t> bi = bias ? std::optional<std::size_t>(bias->id) : std::nullopt;
  return t.record("linear_map", std::move(y), rg, [xi, wi, bi](Tape<Real>& tp, std::size_t self) {
    const auto& g = tp.out_grad(self);
    if (tp.requires_grad(xi)) mat(tp.grad_buffer(xi)).noalias() += mat(g) * mat(tp.value(wi));
    if (tp.requires_grad(wi)) mat(tp.grad_buffer(wi)).noalias() += mat(g).transpose() * mat(tp.value(xi));
    if (bi && tp.requires_grad(*bi)) {
      auto& db = tp.grad_buffer(*bi);
      const std::size_t m = g.cols();
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < m; ++c) db[c] += g[r * m + c];
      }
    }
  });
}

template <typename Real>
Var<Real> matmul_nt(Var<Real> a, Var<Real> b) {
  Tape<Real>& t = tape_of(a, b);
  if (a.cols() != b.cols()) shape_error("matmul_nt", a.shape(), b.shape());
  Tensor<Real> y(Shape{a.rows(), b.rows()});
  mat(y).noalias() = mat(a.value()) * mat(b.value()).transpose();
  const std::size_t ai = a.id, bi = b.id;
  return t.record("matmul_nt", std::move(y), t.requires_grad(a) || t.requires_grad(b),
                  [ai, bi](Tape<Real>& tp, std::size_t self) {
                    const auto& g = tp.out_grad(self);
                    if (tp.requires_grad(ai)) mat(tp.grad_buffer(ai)).noalias() += mat(g) * mat(tp.value(bi));
                    if (tp.requires_grad(bi)) {
                      mat(tp.grad_buffer(bi)).noalias() += mat(g).transpose() * mat(tp.value(ai));
                    }
                  });
}

template <typename Real>
Var<Real> matmul_tn(Var<Real> a, Var<Real> b) {
  Tape<Real>& t = tape_of(a, b);
  if (a.rows() != b.rows()) shape_error("matmul_tn", a.shape(), b.shape());
  Tensor<Real> y(Shape{a.cols(), b.cols()});
  mat(y).noalias() = mat(a.value()).transpose() * mat(b.value());
  const std::size_t ai = a.id, bi = b.id;
  return t.record("matmul_tn", std::move(y), t.requires_grad(a) || t.requires_grad(b),
                  [ai, bi](Tape<Real>& tp, std::size_t self) {
                    const auto& g = tp.out_grad(self);
                    if (tp.requires_grad(ai)) {
                      mat(tp.grad_buffer(ai)).noalias() += mat(tp.value(bi)) * mat(g).transpose();
                    }
                    if (tp.requires_grad(bi)) mat(tp.grad_buffer(bi)).noalias() += mat(tp.value(ai)) * mat(g);
                  });
}

template <typename Real>
Var<Real> elementwise(ElementwiseKind kind, Var<Real> x, std::optional<Var<Real>> y) {
  const bool binary = kind == ElementwiseKind::Multiply || kind == ElementwiseKind::Add ||
                      kind == ElementwiseKind::Subtract || kind == ElementwiseKind::Divide;
  if (binary != y.has_value()) throw ConfigError("elementwise: wrong operand count");
  if (binary) {
    switch (kind) {
      case ElementwiseKind::Multiply: return mul(x, *y);
      case ElementwiseKind::Add: return add(x, *y);
      case ElementwiseKind::Subtract: return sub(x, *y);
      default: return div(x, *y);
    }
  }
  switch (kind) {
    case ElementwiseKind::Gelu: return gelu(x);
    case ElementwiseKind::Exp: return exp(x);
    case ElementwiseKind::Log: return log(x);
    case ElementwiseKind::Sqrt: return sqrt(x);
    case ElementwiseKind::Square: return square(x);
    default: return relu(x);
  }
}

template <typename Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
  Tape<Real>& t = tape_of(a, b);
  require_same("add", a, b);
  Tensor<Real> y = a.value();
  accumulate(y, b.value());
  const std::size_t ai = a.id, bi = b.id;
  return t.record("add", std::move(y), t.requires_grad(a) || t.requires_grad(b),
                  [ai, bi](Tape<Real>& tp, std::size_t self) {
                    const auto& g = tp.out_grad(self);
                    if (tp.requires_grad(ai)) accumulate(tp.grad_buffer(ai), g);
                    if (tp.requires_grad(bi)) accumulate(tp.grad_buffer(bi), g);
                  });
}

template <typename Real>
Var<Real> sub(Var<Real> a, Var<Real> b) {
  Tape<Real>& t = tape_of(a, b);
  require_same("subtract", a, b);
  Tensor<Real> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  const std::size_t ai = a.id, bi = b.id;
  return t.record("subtract", std::move(y), t.requires_grad(a) || t.requires_grad(b),
                  [ai, bi](Tape<Real>& tp, std::size_t self) {
                    const auto& g = tp.out_grad(self);
                    if (tp.requires_grad(ai)) accumulate(tp.grad_buffer(ai), g);
                    if (tp.requires_grad(bi)) {
                      auto& d = tp.grad_buffer(bi);
                      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
                    }
                  });
}

template <typename Real>
Var<Real> mul(Var<Real> a, Var<Real> b) {
  Tape<Real>& t = tape_of(a, b);
  require_same("multiply", a, b);
  Tensor<Real> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  const std::size_t ai = a.id, bi = b.id;
  return t.record("multiply", std::move(y), t.requires_grad(a) || t.requires_grad(b),
                  [ai, bi](Tape<Real>& tp, std::size_t self) {
                    const auto& g = tp.out_grad(self);
                    if (tp.requires_grad(ai)) {
                      auto& d = tp.grad_buffer(ai);
                      const auto& other = tp.value(bi);
                      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * other[i];
                    }
                    if (tp.requires_grad(bi)) {
                      auto& d = tp.grad_buffer(bi);
                      const auto& other = tp.value(ai);
                      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * other[i];
                    }
                  });
}

template <typename Real>
Var<Real> div(Var<Real> a, Var<Real> b) {
  Tape<Real>& t = tape_of(a, b);
  require_same("divide", a, b);
  Tensor<Real> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (bv[i] == Real(0)) throw DomainError("divide: zero denominator");
    y[i] /= bv[i];
  }
  const std::size_t ai = a.id, bi = b.id;
  return t.record("divide", std::move(y), t.requires_grad(a) || t.requires_grad(b),
                  [ai, bi](Tape<Real>& tp, std::size_t self) {
                    const auto& g = tp.out_grad(self);
                    const auto& av = tp.value(ai);
                    const auto& bv2 = tp.value(bi);
                    if (tp.requires_grad(ai)) {
                      auto& d = tp.grad_buffer(ai);
                      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] / bv2[i];
                    }
                    if (tp.requires_grad(bi)) {
                      auto& d = tp.grad_buffer(bi);
                      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i] * av[i] / (bv2[i] * bv2[i]);
                    }
                  });
}

namespace {

// Unary op whose derivative is a function of (input, output).
template <typename Real, typename Fwd, typename Deriv>
Var<Real> unary(const char* name, Var<Real> x, Fwd fwd, Deriv deriv) {
  Tape<Real>& t = tape_of(x);
  Tensor<Real> y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(y[i]);
  const std::size_t xi = x.id;
  return t.record(name, std::move(y), t.requires_grad(x), [xi, deriv](Tape<Real>& tp, std::size_t self) {
    const auto& g = tp.out_grad(self);
    const auto& in = tp.value(xi);
    const auto& out = tp.value(self);
    auto& d = tp.grad_buffer(xi);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * deriv(in[i], out[i]);
  });
}

}  // namespace

template <typename Real>
Var<Real> gelu(Var<Real> x) {
  using Arr = Eigen::Array<Real, Eigen::Dynamic, 1>;
  using ArrMap = Eigen::Map<Arr>;
  using ConstArrMap = Eigen::Map<const Arr>;
  const Real c = Real(kGeluC), a = Real(kGeluA);
  Tape<Real>& t = tape_of(x);
  const auto n = static_cast<Eigen::Index>(x.value().size());
  Tensor<Real> y(x.shape());
  ConstArrMap xv(x.value().data(), n);
  ArrMap(y.data(), n) = Real(0.5) * xv * (Real(1) + (c * (xv + a * xv.cube())).tanh());
  const std::size_t xi = x.id;
  return t.record("gelu", std::move(y), t.requires_grad(x), [xi, c, a, n](Tape<Real>& tp, std::size_t self) {
    ConstArrMap g(tp.out_grad(self).data(), n);
    ConstArrMap v(tp.value(xi).data(), n);
    ArrMap d(tp.grad_buffer(xi).data(), n);
    const Arr th = (c * (v + a * v.cube())).tanh();
    d += g * (Real(0.5) * (Real(1) + th) + Real(0.5) * c * v * (Real(1) - th.square()) * (Real(1) + Real(3) * a * v.square()));
  });
}

template <typename Real>
Var<Real> exp(Var<Real> x) {
  using Arr = Eigen::Array<Real, Eigen::Dynamic, 1>;
  Tape<Real>& t = tape_of(x);
  const auto n = static_cast<Eigen::Index>(x.value().size());
  Tensor<Real> y(x.shape());
  Eigen::Map<Arr>(y.data(), n) = Eigen::Map<const Arr>(x.value().data(), n).exp();
  const std::size_t xi = x.id;
  return t.record("exp", std::move(y), t.requires_grad(x), [xi, n](Tape<Real>& tp, std::size_t self) {
    Eigen::Map<Arr>(tp.grad_buffer(xi).data(), n) +=
        Eigen::Map<const Arr>(tp.out_grad(self).data(), n) * Eigen::Map<const Arr>(tp.value(self).data(), n);
  });
}

template <typename Real>
Var<Real> log(Var<Real> x) {
  for (Real v : x.value().values()) {
    if (!(v > Real(0))) throw DomainError("log of non-positive value " + std::to_string(v));
  }
  return unary<Real>("log", x, [](Real v) { return std::log(v); }, [](Real in, Real) { return Real(1) / in; });
}

template <typename Real>
Var<Real> sqrt(Var<Real> x) {
  for (Real v : x.value().values()) {
    if (!(v > Real(0))) throw DomainError("sqrt of non-positive value " + std::to_string(v));
  }
  return unary<Real>("sqrt", x, [](Real v) { return std::sqrt(v); },
                     [](Real, Real out) { return Real(0.5) / out; });
}

template <typename Real>
Var<Real> square(Var<Real> x) {
  return unary<Real>("square", x, [](Real v) { return v * v; }, [](Real in, Real) { return Real(2) * in; });
}

template <typename Real>
Var<Real> relu(Var<Real> x) {
  return unary<Real>("relu", x, [](Real v) { return v > Real(0) ? v : Real(0); },
                     [](Real in, Real) { return in > Real(0) ? Real(1) : Real(0); });
}

template <typename Real>
Var<Real> affine(Var<Real> x, Real scale, Real offset) {
  return unary<Real>("affine", x, [scale, offset](Real v) { return scale * v + offset; },
                     [scale](Real, Real) { return scale; });
}

template <typename Real>
Var<Real> soft_clamp(Var<Real> x, Real bound) {
  if (!(bound > Real(0))) throw ConfigError("soft_clamp bound must be positive");
  using Arr = Eigen::Array<Real, Eigen::Dynamic, 1>;
  Tape<Real>& t = tape_of(x);
  const auto n = static_cast<Eigen::Index>(x.value().size());
  Tensor<Real> y(x.shape());
  Eigen::Map<Arr>(y.data(), n) = bound * (Eigen::Map<const Arr>(x.value().data(), n) / bound).tanh();
  const std::size_t xi = x.id;
  return t.record("soft_clamp", std::move(y), t.requires_grad(x), [xi, bound, n](Tape<Real>& tp, std::size_t self) {
    Eigen::Map<const Arr> g(tp.out_grad(self).data(), n);
    Eigen::Map<const Arr> out(tp.value(self).data(), n);
    Eigen::Map<Arr>(tp.grad_buffer(xi).data(), n) += g * (Real(1) - (out / bound).square());
  });
}

template <typename Real>
Var<Real> softmax_rows(Var<Real> x) {
  Tape<Real>& t = tape_of(x);
  Tensor<Real> y = x.value();
  const std::size_t n = y.rows(), k = y.cols();
  for (std::size_t r = 0; r < n; ++r) {
    Real* row = y.data() + r * k;
    Real mx = row[0];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, row[c]);
    Real s = 0;
    for (std::size_t c = 0; c < k; ++c) {
      row[c] = std::exp(row[c] - mx);
      s += row[c];
    }
    for (std::size_t c = 0; c < k; ++c) row[c] /= s;
  }
  const std::size_t xi = x.id;
  return t.record("softmax", std::move(y), t.requires_grad(x), [xi](Tape<Real>& tp, std::size_t self) {
    const auto& g = tp.out_grad(self);
    const auto& p = tp.value(self);
    auto& d = tp.grad_buffer(xi);
    const std::size_t n2 = p.rows(), k2 = p.cols();
    for (std::size_t r = 0; r < n2; ++r) {
      const std::size_t o = r * k2;
      Real dot = 0;
      for (std::size_t c = 0; c < k2; ++c) dot += g[o + c] * p[o + c];
      for (std::size_t c = 0; c < k2; ++c) d[o + c] += p[o + c] * (g[o + c] - dot);
    }
  });
}

template <typename Real>
Var<Real> log_softmax_rows(Var<Real> x) {
  Tape<Real>& t = tape_of(x);
  Tensor<Real> y = x.value();
  const std::size_t n = y.rows(), k = y.cols();
  for (std::size_t r = 0; r < n; ++r) {
    Real* row = y.data() + r * k;
    Real mx = row[0];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, row[c]);
    Real s = 0;
    for (std::size_t c = 0; c < k; ++c) s += std::exp(row[c] - mx);
    const Real lse = mx + std::log(s);
    for (std::size_t c = 0; c < k; ++c) row[c] -= lse;
  }
  const std::size_t xi = x.id;
  return t.record("log_softmax", std::move(y), t.requires_grad(x), [xi](Tape<Real>& tp, std::size_t self) {
    const auto& g = tp.out_grad(self);
    const auto& ly = tp.value(self);
    auto& d = tp.grad_buffer(xi);
    const std::size_t n2 = ly.rows(), k2 = ly.cols();
    for (std::size_t r = 0; r < n2; ++r) {
      const std::size_t o = r * k2;
      Real gs = 0;
      for (std::size_t c = 0; c < k2; ++c) gs += g[o + c];
      for (std::size_t c = 0; c < k2; ++c) d[o + c] += g[o + c] - std::exp(ly[o + c]) * gs;
    }
  });
}

template <typename Real>
Var<Real> concat_cols(std::span<const Var<Real>> parts) {
  if (parts.empty()) throw ConfigError("concat_cols: no operands");
  Tape<Real>& t = tape_of(parts[0]);
  const std::size_t n = parts[0].rows();
  std::size_t total = 0;
  bool rg = false;
  std::vector<std::size_t> ids, widths;
  for (const auto& p : parts) {
    if (p.tape != &t) throw TapeError("operands recorded on different tapes");
    if (p.rows() != n) shape_error("concat_cols", parts[0].shape(), p.shape());
    total += p.cols();
    rg = rg || t.requires_grad(p);
    ids.push_back(p.id);
    widths.push_back(p.cols());
  }
  Tensor<Real> y(with_last(parts[0].shape(), total));
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    const std::size_t w = v.cols();
    for (std::size_t r = 0; r < n; ++r) {
      std::copy_n(v.data() + r * w, w, y.data() + r * total + off);
    }
    off += w;
  }
  return t.record("concat", std::move(y), rg, [ids, widths, total](Tape<Real>& tp, std::size_t self) {
    const auto& g = tp.out_grad(self);
    const std::size_t n2 = g.rows();
    std::size_t o = 0;
    for (std::size_t j = 0; j < ids.size(); ++j) {
      const std::size_t w = widths[j];
      if (tp.requires_grad(ids[j])) {
        auto& d = tp.grad_buffer(ids[j]);
        for (std::size_t r = 0; r < n2; ++r) {
          for (std::size_t c = 0; c < w; ++c) d[r * w + c] += g[r * total + o + c];
        }
      }
      o += w;
    }
  });
}

template <typename Real>
Var<Real> slice_cols(Var<Real> x, std::size_t start, std::size_t count) {
  Tape<Real>& t = tape_of(x);
  const std::size_t m = x.cols(), n = x.rows();
  if (start + count > m) throw ConfigError("slice_cols: range exceeds " + std::to_string(m) + " columns");
  Tensor<Real> y(with_last(x.shape(), count));
  for (std::size_t r = 0; r < n; ++r) std::copy_n(x.value().data() + r * m + start, count, y.data() + r * count);
  const std::size_t xi = x.id;
  return t.record("slice_cols", std::move(y), t.requires_grad(x), [xi, start, count, m](Tape<Real>& tp, std::size_t self) {
    const auto& g = tp.out_grad(self);
    auto& d = tp.grad_buffer(xi);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t c = 0; c < count; ++c) d[r * m + start + c] += g[r * count + c];
    }
  });
}

template <typename Real>
Var<Real> gather_rows(Var<Real> x, std::span<const std::size_t> index) {
  Tape<Real>& t = tape_of(x);
  const std::size_t m = x.cols(), n = x.rows();
  Tensor<Real> y(Shape{index.size(), m});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n) throw ConfigError("gather_rows: index out of range");
    std::copy_n(x.value().data() + index[i] * m, m, y.data() + i * m);
  }
  const std::size_t xi = x.id;
  std::vector<std::size_t> idx(index.begin(), index.end());
  return t.record("gather_rows", std::move(y), t.requires_grad(x), [xi, idx, m](Tape<Real>& tp, std::size_t self) {
    const auto& g = tp.out_grad(self);
    auto& d = tp.grad_buffer(xi);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t c = 0; c < m; ++c) d[idx[i] * m + c] += g[i * m + c];
    }
  });
}

template <typename Real>
Var<Real> reshape(Var<Real> x, Shape shape) {
  Tape<Real>& t = tape_of(x);
  Tensor<Real> y = x.value().reshaped(std::move(shape));
  const std::size_t xi = x.id;
  return t.record("reshape", std::move(y), t.requires_grad(x), [xi](Tape<Real>& tp, std::size_t self) {
    accumulate(tp.grad_buffer(xi), tp.out_grad(self));
  });
}

template <typename Real>
Var<Real> stop_gradient(Var<Real> x) {
  return tape_of(x).detached(x.value());
}

template <typename Real>
Var<Real> row_sum(Var<Real> x) {
  Tape<Real>& t = tape_of(x);
  const std::size_t n = x.rows(), m = x.cols();
  Tensor<Real> y(Shape{n, 1});
  const Real* v = x.value().data();
  for (std::size_t r = 0; r < n; ++r) {
    Real s = 0;
    for (std::size_t c = 0; c < m; ++c) s += v[r * m + c];
    y[r] = s;
  }
  const std::size_t xi = x.id;
  return t.record("row_sum", std::move(y), t.requires_grad(x), [xi, m](Tape<Real>& tp, std::size_t self) {
    const auto& g = tp.out_grad(self);
    auto& d = tp.grad_buffer(xi);
    for (std::size_t r = 0; r < g.size(); ++r) {
      for (std::size_t c = 0; c < m; ++c) d[r * m + c] += g[r];
    }
  });
}

template <typename Real>
Var<Real> row_mean(Var<Real> x) {
  return affine(row_sum(x), Real(1) / static_cast<Real>(x.cols()));
}

template <typename Real>
Var<Real> col_sum(Var<Real> x) {
  Tape<Real>& t = tape_of(x);
  const std::size_t n = x.rows(), m = x.cols();
  Tensor<Real> y(Shape{1, m});
  const Real* v = x.value().data();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < m; ++c) y[c] += v[r * m + c];
  }
  const std::size_t xi = x.id;
  return t.record("col_sum", std::move(y), t.requires_grad(x), [xi, n, m](Tape<Real>& tp, std::size_t self) {
    const auto& g = tp.out_grad(self);
    auto& d = tp.grad_buffer(xi);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < m; ++c) d[r * m + c] += g[c];
    }
  });
}

template <typename Real>
Var<Real> col_mean(Var<Real> x) {
  return affine(col_sum(x), Real(1) / static_cast<Real>(x.rows()));
}

template <typename Real>
Var<Real> sum_all(Var<Real> x) {
  Tape<Real>& t = tape_of(x);
  Real s = 0;
  for (Real v : x.value().values()) s += v;
  const std::size_t xi = x.id;
  return t.record("sum", Tensor<Real>::scalar(s), t.requires_grad(x), [xi](Tape<Real>& tp, std::size_t self) {
    const Real g = tp.out_grad(self)[0];
    auto& d = tp.grad_buffer(xi);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g;
  });
}

template <typename Real>
Var<Real> mean_all(Var<Real> x) {
  return affine(sum_all(x), Real(1) / static_cast<Real>(x.value().size()));
}

template <typename Real>
Var<Real> row_dot(Var<Real> a, Var<Real> b) {
  Tape<Real>& t = tape_of(a, b);
  require_same("row_dot", a, b);
  const std::size_t n = a.rows(), m = a.cols();
  Tensor<Real> y(Shape{n, 1});
  const Real* av = a.value().data();
  const Real* bv = b.value().data();
  for (std::size_t r = 0; r < n; ++r) {
    Real s = 0;
    for (std::size_t c = 0; c < m; ++c) s += av[r * m + c] * bv[r * m + c];
    y[r] = s;
  }
  const std::size_t ai = a.id, bi = b.id;
  return t.record("row_dot", std::move(y), t.requires_grad(a) || t.requires_grad(b),
                  [ai, bi, m](Tape<Real>& tp, std::size_t self) {
                    const auto& g = tp.out_grad(self);
                    // a and b may alias the same node; read values before accumulating.
                    const Tensor<Real> av2 = tp.value(ai);
                    const Tensor<Real> bv2 = tp.value(bi);
                    if (tp.requires_grad(ai)) {
                      auto& d = tp.grad_buffer(ai);
                      for (std::size_t r = 0; r < g.size(); ++r) {
                        for (std::size_t c = 0; c < m; ++c) d[r * m + c] += g[r] * bv2[r * m + c];
                      }
                    }
                    if (tp.requires_grad(bi)) {
                      auto& d = tp.grad_buffer(bi);
                      for (std::size_t r = 0; r < g.size(); ++r) {
                        for (std::size_t c = 0; c < m; ++c) d[r * m + c] += g[r] * av2[r * m + c];
                      }
                    }
                  });
}

template <typename Real>
Var<Real> center_cols(Var<Real> x) {
  Tape<Real>& t = tape_of(x);
  Tensor<Real> y = x.value();
  mat(y).rowwise() -= mat(x.value()).colwise().mean();
  const std::size_t xi = x.id;
  return t.record("center_cols", std::move(y), t.requires_grad(x), [xi](Tape<Real>& tp, std::size_t self) {
    const auto& g = tp.out_grad(self);
    auto gm = mat(g);
    mat(tp.grad_buffer(xi)).rowwise() += Eigen::Matrix<Real, 1, Eigen::Dynamic>(-gm.colwise().mean());
    mat(tp.grad_buffer(xi)) += gm;
  });
}

template <typename Real>
Var<Real> double_center(Var<Real> k) {
  Tape<Real>& t = tape_of(k);
  if (k.rows() != k.cols()) shape_error("double_center", k.shape(), k.shape());
  auto center = [](const Tensor<Real>& in) {
    Tensor<Real> out = in;
    auto m = mat(out);
    const Eigen::Matrix<Real, 1, Eigen::Dynamic> colmean = m.colwise().mean();
    m.rowwise() -= colmean;
    const Eigen::Matrix<Real, Eigen::Dynamic, 1> rowmean = m.rowwise().mean();
    m.colwise() -= rowmean;
    return out;
  };
  Tensor<Real> y = center(k.value());
  const std::size_t ki = k.id;
  return t.record("double_center", std::move(y), t.requires_grad(k), [ki, center](Tape<Real>& tp, std::size_t self) {
    accumulate(tp.grad_buffer(ki), center(tp.out_grad(self)));
  });
}

template <typename Real>
Var<Real> pairwise_sqdist(Var<Real> x) {
  Tape<Real>& t = tape_of(x);
  const std::size_t n = x.rows(), m = x.cols();
  Tensor<Real> y(Shape{n, n});
  const Real* v = x.value().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      Real s = 0;
      for (std::size_t c = 0; c < m; ++c) {
        const Real dlt = v[i * m + c] - v[j * m + c];
        s += dlt * dlt;
      }
      y.at(i, j) = s;
      y.at(j, i) = s;
    }
  }
  const std::size_t xi = x.id;
  return t.record("pairwise_sqdist", std::move(y), t.requires_grad(x), [xi, n, m](Tape<Real>& tp, std::size_t self) {
    const auto& g = tp.out_grad(self);
    const auto& xv = tp.value(xi);
    auto& d = tp.grad_buffer(xi);
    // dx_i = 2 sum_j (G_ij + G_ji)(x_i - x_j)
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const Real s = Real(2) * (g.at(i, j) + g.at(j, i));
        for (std::size_t c = 0; c < m; ++c) d[i * m + c] += s * (xv[i * m + c] - xv[j * m + c]);
      }
    }
  });
}

template <typename Real>
Var<Real> normalize_rows(Var<Real> x, Real eps) {
  Tape<Real>& t = tape_of(x);
  const std::size_t n = x.rows(), m = x.cols();
  Tensor<Real> y = x.value();
  Tensor<Real> norms(Shape{n, 1});
  for (std::size_t r = 0; r < n; ++r) {
    Real s = 0;
    for (std::size_t c = 0; c < m; ++c) s += y[r * m + c] * y[r * m + c];
    norms[r] = std::sqrt(s + eps * eps);
    for (std::size_t c = 0; c < m; ++c) y[r * m + c] /= norms[r];
  }
  const std::size_t xi = x.id;
  return t.record("normalize_rows", std::move(y), t.requires_grad(x),
                  [xi, norms = std::move(norms), m](Tape<Real>& tp, std::size_t self) {
                    const auto& g = tp.out_grad(self);
                    const auto& z = tp.value(self);
                    auto& d = tp.grad_buffer(xi);
                    for (std::size_t r = 0; r < norms.size(); ++r) {
                      Real dot = 0;
                      for (std::size_t c = 0; c < m; ++c) dot += g[r * m + c] * z[r * m + c];
                      for (std::size_t c = 0; c < m; ++c) {
                        d[r * m + c] += (g[r * m + c] - z[r * m + c] * dot) / norms[r];
                      }
                    }
                  });
}

template <typename Real>
Var<Real> mixture(Var<Real> weights, std::span<const Var<Real>> mus) {
  Tape<Real>& t = tape_of(weights);
  const std::size_t n = weights.rows(), k = weights.cols();
  if (mus.size() != k) throw ConfigError("mixture: " + std::to_string(k) + " weights, " +
                                         std::to_string(mus.size()) + " experts");
  const std::size_t dim = mus[0].cols();
  bool rg = t.requires_grad(weights);
  std::vector<std::size_t> ids;
  for (const auto& mu : mus) {
    if (mu.rows() != n || mu.cols() != dim) shape_error("mixture", mus[0].shape(), mu.shape());
    rg = rg || t.requires_grad(mu);
    ids.push_back(mu.id);
  }
  Tensor<Real> y(mus[0].shape());
  const Real* w = weights.value().data();
  for (std::size_t e = 0; e < k; ++e) {
    const Real* mv = mus[e].value().data();
    for (std::size_t r = 0; r < n; ++r) {
      const Real we = w[r * k + e];
      for (std::size_t c = 0; c < dim; ++c) y[r * dim + c] += we * mv[r * dim + c];
    }
  }
  const std::size_t wi = weights.id;
  return t.record("mixture", std::move(y), rg, [wi, ids, n, k, dim](Tape<Real>& tp, std::size_t self) {
    const auto& g = tp.out_grad(self);
    const auto& wv = tp.value(wi);
    for (std::size_t e = 0; e < k; ++e) {
      const auto& mv = tp.value(ids[e]);
      if (tp.requires_grad(wi)) {
        auto& dw = tp.grad_buffer(wi);
        for (std::size_t r = 0; r < n; ++r) {
          Real s = 0;
          for (std::size_t c = 0; c < dim; ++c) s += g[r * dim + c] * mv[r * dim + c];
          dw[r * k + e] += s;
        }
      }
      if (tp.requires_grad(ids[e])) {
        auto& dm = tp.grad_buffer(ids[e]);
        for (std::size_t r = 0; r < n; ++r) {
          const Real we = wv[r * k + e];
          for (std::size_t c = 0; c < dim; ++c) dm[r * dim + c] += we * g[r * dim + c];
        }
      }
    }
  });
}

template <typename Real>
Var<Real> softmax_cross_entropy(Var<Real> logits, std::span<const std::uint16_t> labels,
                                std::span<const Real> class_weights) {
  Tape<Real>& t = tape_of(logits);
  const std::size_t n = logits.rows(), k = logits.cols();
  if (labels.size() != n) {
    throw ConfigError("cross_entropy: " + std::to_string(n) + " rows vs " + std::to_string(labels.size()) +
                      " labels");
  }
  if (!class_weights.empty() && class_weights.size() != k) {
    throw ConfigError("cross_entropy: class weight count differs from class count");
  }
  Tensor<Real> probs(logits.shape());
  const Real* z = logits.value().data();
  Real total = 0, wsum = 0;
  std::vector<Real> row_w(n);
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] >= k) {
      throw ConfigError("class index " + std::to_string(labels[r]) + " out of range [0, " + std::to_string(k) + ")");
    }
    const Real* row = z + r * k;
    Real mx = row[0];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, row[c]);
    Real s = 0;
    for (std::size_t c = 0; c < k; ++c) {
      probs[r * k + c] = std::exp(row[c] - mx);
      s += probs[r * k + c];
    }
    for (std::size_t c = 0; c < k; ++c) probs[r * k + c] /= s;
    const Real w = class_weights.empty() ? Real(1) : class_weights[labels[r]];
    row_w[r] = w;
    wsum += w;
    total += w * (mx + std::log(s) - row[labels[r]]);
  }
  if (!(wsum > Real(0))) throw ConfigError("cross_entropy: zero total class weight");
  const std::size_t li = logits.id;
  std::vector<std::uint16_t> lab(labels.begin(), labels.end());
  for (auto& w : row_w) w /= wsum;
  return t.record("cross_entropy", Tensor<Real>::scalar(total / wsum), t.requires_grad(logits),
                  [li, lab = std::move(lab), row_w = std::move(row_w), probs = std::move(probs), k](
                      Tape<Real>& tp, std::size_t self) {
                    const Real g = tp.out_grad(self)[0];
                    auto& d = tp.grad_buffer(li);
                    for (std::size_t r = 0; r < lab.size(); ++r) {
                      const Real s = g * row_w[r];
                      for (std::size_t c = 0; c < k; ++c) d[r * k + c] += s * probs[r * k + c];
                      d[r * k + lab[r]] -= s;
                    }
                  });
}

template <typename Real>
Var<Real> weighted_sum(std::span<const Var<Real>> terms, std::span<const Real> weights) {
  if (terms.empty() || terms.size() != weights.size()) throw ConfigError("weighted_sum: term/weight count mismatch");
  Tape<Real>& t = tape_of(terms[0]);
  Real s = 0;
  bool rg = false;
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].tape != &t || terms[i].value().size() != 1) throw ConfigError("weighted_sum: terms must be scalars");
    s += weights[i] * terms[i].value()[0];
    rg = rg || t.requires_grad(terms[i]);
    ids.push_back(terms[i].id);
  }
  std::vector<Real> w(weights.begin(), weights.end());
  return t.record("weighted_sum", Tensor<Real>::scalar(s), rg, [ids, w](Tape<Real>& tp, std::size_t self) {
    const Real g = tp.out_grad(self)[0];
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (tp.requires_grad(ids[i])) tp.grad_buffer(ids[i])[0] += g * w[i];
    }
  });
}

#define SEFMAP_INSTANTIATE_OPS(R)                                                                  \
  template Var<R> linear(Var<R>, Var<R>, std::optional<Var<R>>);                                  \
  template Var<R> matmul_nt(Var<R>, Var<R>);                                                      \
  template Var<R> matmul_tn(Var<R>, Var<R>);                                                      \
  template Var<R> elementwise(ElementwiseKind, Var<R>, std::optional<Var<R>>);                    \
  template Var<R> add(Var<R>, Var<R>);                                                            \
  template Var<R> sub(Var<R>, Var<R>);                                                            \
  template Var<R> mul(Var<R>, Var<R>);                                                            \
  template Var<R> div(Var<R>, Var<R>);                                                            \
  template Var<R> gelu(Var<R>);                                                                   \
  template Var<R> exp(Var<R>);                                                                    \
  template Var<R> log(Var<R>);                                                                    \
  template Var<R> sqrt(Var<R>);                                                                   \
  template Var<R> square(Var<R>);                                                                 \
  template Var<R> relu(Var<R>);                                                                   \
  template Var<R> affine(Var<R>, R, R);                                                           \
  template Var<R> soft_clamp(Var<R>, R);                                                          \
  template Var<R> softmax_rows(Var<R>);                                                           \
  template Var<R> log_softmax_rows(Var<R>);                                                       \
  template Var<R> concat_cols(std::span<const Var<R>>);                                           \
  template Var<R> slice_cols(Var<R>, std::size_t, std::size_t);                                   \
  template Var<R> gather_rows(Var<R>, std::span<const std::size_t>);                              \
  template Var<R> reshape(Var<R>, Shape);                                                         \
  template Var<R> stop_gradient(Var<R>);                                                          \
  template Var<R> row_sum(Var<R>);                                                                \
  template Var<R> row_mean(Var<R>);                                                               \
  template Var<R> col_sum(Var<R>);                                                                \
  template Var<R> col_mean(Var<R>);                                                               \
  template Var<R> sum_all(Var<R>);                                                                \
  template Var<R> mean_all(Var<R>);                                                               \
  template Var<R> row_dot(Var<R>, Var<R>);                                                        \
  template Var<R> center_cols(Var<R>);                                                            \
  template Var<R> double_center(Var<R>);                                                          \
  template Var<R> pairwise_sqdist(Var<R>);                                                        \
  template Var<R> normalize_rows(Var<R>, R);                                                      \
  template Var<R> mixture(Var<R>, std::span<const Var<R>>);                                       \
  template Var<R> softmax_cross_entropy(Var<R>, std::span<const std::uint16_t>, std::span<const R>); \
  template Var<R> weighted_sum(std::span<const Var<R>>, std::span<const R>);

SEFMAP_INSTANTIATE_OPS(float)
SEFMAP_INSTANTIATE_OPS(double)

#undef SEFMAP_INSTANTIATE_OPS

}  // namespace sefmap::ops
