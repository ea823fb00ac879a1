#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hiprobe/autodiff/tensor.hpp"
#include "hiprobe/error.hpp"

namespace hiprobe {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Shape& shape() const;
  std::span<const double> value() const;
  bool requires_grad() const;
  Tensor tensor() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Linear record of operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so inputs always precede the node
/// that consumes them; backward() walks the list once in reverse. A node only
/// keeps a backward closure when at least one of its inputs needs a gradient,
/// which makes inference on a tape of constants allocation-light.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Tape() = default;
  /// With `track_gradients` false every parameter binds as a constant, so no
  /// backward closures are recorded (inference mode).
  explicit Tape(bool track_gradients) : track_gradients_(track_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Binds a parameter tensor as a leaf. Binding the same tensor twice returns
  /// the same node so gradients from every use accumulate in one place.
  Var param(const Tensor& t) {
    if (auto it = bound_.find(&t); it != bound_.end()) return Var(this, it->second);
    Var v = push(t.shape(), t.values(), {}, nullptr, track_gradients_ && t.requires_grad());
    bound_.emplace(&t, v.id());
    return v;
  }

  /// Makes later param(t) calls return `v` instead of a fresh leaf.
  void bind(const Tensor& t, Var v) {
    if (v.tape() != this) throw InvalidArgument("Tape::bind: value belongs to another tape");
    bound_[&t] = v.id();
  }

  Var constant(const Tensor& t) { return push(t.shape(), t.values(), {}, nullptr, false); }

  Var constant(Shape shape, std::vector<double> values) {
    return push(std::move(shape), std::move(values), {}, nullptr, false);
  }

  /// Appends an operation result. `backward` is dropped when no input
  /// requires a gradient.
  Var record(Shape shape, std::vector<double> value, std::vector<std::size_t> inputs,
             BackwardFn backward) {
    bool needs_grad = false;
    for (auto id : inputs) needs_grad = needs_grad || nodes_.at(id).requires_grad;
    return push(std::move(shape), std::move(value), std::move(inputs),
                needs_grad ? std::move(backward) : BackwardFn{}, needs_grad);
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  Node& node(std::size_t id) { return nodes_.at(id); }

  /// Gradient accumulator of a node, or an empty span if it needs none.
  std::span<double> grad_sink(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return {};
    return n.grad;
  }

  /// Reverse sweep from a scalar loss. Every gradient-tracking node receives
  /// a (possibly zero) gradient of the same shape as its value.
  void backward(Var loss) {
    if (loss.tape() != this) throw InvalidArgument("backward: loss was not recorded on this tape");
    const Node& root = nodes_.at(loss.id());
    if (root.value.size() != 1) {
      throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(root.shape));
    }
    for (auto& n : nodes_) {
      if (n.requires_grad) n.grad.assign(n.value.size(), 0.0);
    }
    backward_done_ = true;
    if (!root.requires_grad) return;
    nodes_[loss.id()].grad[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward) n.backward(*this, i);
    }
  }

  Tensor grad(Var v) const {
    require_backward();
    const Node& n = nodes_.at(v.id());
    if (!n.requires_grad) return Tensor(n.shape, 0.0);
    return Tensor(n.shape, n.grad);
  }

  /// Gradient of a bound parameter; zeros if the parameter never reached the
  /// loss or was never bound.
  Tensor grad_of(const Tensor& param) const {
    require_backward();
    auto it = bound_.find(&param);
    if (it == bound_.end()) return Tensor(param.shape(), 0.0);
    const Node& n = nodes_[it->second];
    if (!n.requires_grad) return Tensor(param.shape(), 0.0);
    return Tensor(param.shape(), n.grad);
  }

 private:
  Var push(Shape shape, std::vector<double> value, std::vector<std::size_t> inputs,
           BackwardFn backward, bool requires_grad) {
    if (value.size() != shape_numel(shape)) {
      throw ShapeError("Tape: value size does not match shape " + shape_str(shape));
    }
    nodes_.push_back(Node{std::move(shape), std::move(value), {}, std::move(inputs),
                          std::move(backward), requires_grad});
    return Var(this, nodes_.size() - 1);
  }

  void require_backward() const {
    if (!backward_done_) throw InvalidArgument("Tape: gradients requested before backward()");
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> bound_;
  bool backward_done_ = false;
  bool track_gradients_ = true;
};

inline const Shape& Var::shape() const {
  if (!tape_) throw InvalidArgument("Var: not attached to a tape");
  return tape_->node(id_).shape;
}

inline std::span<const double> Var::value() const {
  if (!tape_) throw InvalidArgument("Var: not attached to a tape");
  return tape_->node(id_).value;
}

inline bool Var::requires_grad() const { return tape_ && tape_->node(id_).requires_grad; }

inline Tensor Var::tensor() const {
  const auto& n = tape_->node(id_);
  return Tensor(n.shape, n.value);
}

}  // namespace hiprobe
