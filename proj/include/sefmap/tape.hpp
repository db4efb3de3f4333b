// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "sefmap/errors.hpp"
#include "sefmap/tensor.hpp"

namespace sefmap {

template <typename Real>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// tape it came from is alive and has not been reset.
template <typename Real>
struct Var {
  Tape<Real>* tape = nullptr;
  std::size_t id = 0;

  bool valid() const noexcept { return tape != nullptr; }
  const Tensor<Real>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Reverse-mode recording of one forward computation. Each op appends a node
/// holding its output and a closure that pushes the output gradient back to
/// the node's inputs. A tape supports exactly one backward pass; call reset()
/// to record the next step.
template <typename Real>
class Tape {
 public:
  using TensorT = Tensor<Real>;
  using Backward = std::function<void(Tape&, std::size_t)>;

  struct Node {
    TensorT value;
    TensorT grad;
    Backward backward;
    Param<Real>* param = nullptr;
    bool requires_grad = false;
    const char* op = "";
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Real> constant(TensorT value) { return push("constant", std::move(value), false, {}); }

  /// Leaf whose gradient is kept, for differentiating w.r.t. raw inputs.
  Var<Real> variable(TensorT value) { return push("variable", std::move(value), true, {}); }

  /// Leaf bound to a Param; backward() accumulates into param.grad. With
  /// track == false the value is recorded as a constant (inference path).
  Var<Real> parameter(Param<Real>& param, bool track = true) {
    auto it = bound_.find(&param);
    if (it != bound_.end()) return {this, it->second};
    Var<Real> v = push("parameter", param.value, track, {});
    if (track) nodes_[v.id].param = &param;
    bound_.emplace(&param, v.id);
    return v;
  }

  /// Appends an op output. The backward closure is dropped when no input
  /// requires a gradient.
  Var<Real> record(const char* op, TensorT value, bool requires_grad, Backward backward) {
    if (!value.all_finite()) {
      throw NumericalError(std::string("non-finite value produced by op '") + op + "'");
    }
    return push(op, std::move(value), requires_grad, requires_grad ? std::move(backward) : Backward{});
  }

  const TensorT& value(Var<Real> v) const { return node(v).value; }
  bool requires_grad(Var<Real> v) const { return node(v).requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const TensorT& value(std::size_t id) const { return nodes_[id].value; }
  const TensorT& out_grad(std::size_t id) const { return nodes_[id].grad; }

  /// Gradient buffer of node `id`, zero-allocated on first use.
  TensorT& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad = TensorT(n.value.shape());
    return n.grad;
  }

  /// Gradient of the last backward() loss w.r.t. v (zeros when unreachable).
  TensorT grad(Var<Real> v) const {
    const Node& n = node(v);
    if (n.grad.size() == n.value.size()) return n.grad;
    return TensorT(n.value.shape());
  }

  void backward(Var<Real> loss) {
    const Node& root = node(loss);
    if (root.value.size() != 1) {
      throw TapeError("backward() needs a scalar loss, got shape " + shape_str(root.value.shape()));
    }
    if (backward_done_) throw TapeError("backward() already ran on this tape; reset() first");
    backward_done_ = true;
    if (!root.requires_grad) return;
    grad_buffer(loss.id)[0] = Real(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() != n.value.size()) continue;
      if (n.backward) {
        n.backward(*this, i);
      } else if (n.param != nullptr) {
        auto& dst = n.param->grad;
        if (dst.shape() != n.value.shape()) dst = TensorT(n.value.shape());
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += n.grad[j];
      }
    }
    for (std::size_t i = 0; i <= loss.id; ++i) {
      const Node& n = nodes_[i];
      if (n.grad.size() == n.value.size() && !n.grad.all_finite()) {
        throw NumericalError(std::string("non-finite gradient reaching op '") + n.op + "'");
      }
    }
  }

  /// Values standing in for detached (stop-gradient) outputs, in call order.
  /// Recording once and replaying lets a finite-difference oracle hold the
  /// detached branches fixed, which is what backward assumes.
  struct DetachLog {
    std::vector<TensorT> values;
    bool replay = false;
    std::size_t next = 0;
  };
  void set_detach_log(DetachLog* log) noexcept { detach_log_ = log; }

  /// Constant copy of `value`, routed through the detach log when one is set.
  Var<Real> detached(const TensorT& value) {
    if (!detach_log_) return constant(value);
    DetachLog& log = *detach_log_;
    if (!log.replay) {
      log.values.push_back(value);
      return constant(value);
    }
    if (log.next >= log.values.size() || log.values[log.next].shape() != value.shape()) {
      throw TapeError("detach log does not match this computation");
    }
    return constant(log.values[log.next++]);
  }

  bool backward_done() const noexcept { return backward_done_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  void reset() {
    nodes_.clear();
    bound_.clear();
    backward_done_ = false;
  }

 private:
  Var<Real> push(const char* op, TensorT value, bool requires_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.backward = std::move(backward);
    n.requires_grad = requires_grad;
    n.op = op;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Node& node(Var<Real> v) const {
    if (v.tape != this || v.id >= nodes_.size()) {
      throw TapeError("variable does not belong to this tape");
    }
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Param<Real>*, std::size_t> bound_;
  bool backward_done_ = false;
  DetachLog* detach_log_ = nullptr;
};

}  // namespace sefmap
