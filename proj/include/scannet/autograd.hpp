#pragma once

// Minimal reverse-mode differentiation over Tensor values.
//
// A Tape records every operation of one forward pass. Each recorded node owns
// its value and a backward closure that pushes the node's gradient into its
// parents. Parameter nodes reference external storage; backward() flushes
// their gradients into the caller-provided gradient tensors.

#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "scannet/tensor.hpp"

namespace scannet {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int)>;

  Var constant(Tensor<T> value) { return push(std::move(value), false, {}); }

  /// Leaf that receives a gradient (used for inputs under test).
  Var input(Tensor<T> value) { return push(std::move(value), true, {}); }

  /// Leaf bound to external storage; gradients are added into *grad on backward().
  Var parameter(const Tensor<T>& value, Tensor<T>* grad) {
    Node n;
    n.external = &value;
    n.external_grad = grad;
    n.requires_grad = grad != nullptr;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  /// Records an op output. The node requires a gradient iff any parent does.
  Var record(Tensor<T> value, std::initializer_list<Var> parents, BackwardFn fn) {
    return record(std::move(value), std::vector<Var>(parents), std::move(fn));
  }
  Var record(Tensor<T> value, const std::vector<Var>& parents, BackwardFn fn) {
    bool rg = false;
    for (Var p : parents) rg = rg || nodes_.at(p.id).requires_grad;
    return push(std::move(value), rg, rg ? std::move(fn) : BackwardFn{});
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.external ? *n.external : n.value;
  }
  const Shape& shape(Var v) const { return value(v).shape; }

  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient buffer of a node; zero-filled on first touch.
  Tensor<T>& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0 && n.grad.shape.empty()) n.grad = Tensor<T>(value(Var{id}).shape);
    return n.grad;
  }
  Tensor<T>& grad(Var v) { return grad(v.id); }
  bool has_grad(Var v) const { return !nodes_.at(v.id).grad.shape.empty(); }

  /// Accumulating view of a parent's gradient, or nullptr when the parent is constant.
  T* grad_ptr(Var parent) { return requires_grad(parent) ? grad(parent.id).ptr() : nullptr; }

  /// Back-propagates from a scalar node (seed * d/dout).
  void backward(Var out, T seed = T(1)) {
    if (value(out).size() != 1) throw ShapeError("backward() needs a scalar output, got " + shape_str(shape(out)));
    if (!requires_grad(out)) return;
    grad(out.id)[0] += seed;
    for (int id = out.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.shape.empty()) continue;
      if (n.backward) n.backward(*this, id);
      if (n.external_grad) {
        Tensor<T>& dst = *n.external_grad;
        require_shape(dst.shape, n.grad.shape, "parameter gradient");
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    const Tensor<T>* external = nullptr;
    Tensor<T>* external_grad = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor<T> value, bool rg, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = rg;
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::deque<Node> nodes_;
};

}  // namespace scannet
