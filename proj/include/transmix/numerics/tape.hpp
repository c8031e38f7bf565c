#pragma once

#include <functional>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "transmix/numerics/tensor.hpp"

namespace transmix {

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;

  Tape<Scalar>* tape() const { return tape_; }
  Index id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<Scalar>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }
  Index dim(Index axis) const { return value().dim(axis); }
  Index numel() const { return value().numel(); }
  bool requires_grad() const { return tape_->requires_grad(*this); }

 private:
  friend class Tape<Scalar>;
  Var(Tape<Scalar>* tape, Index id) : tape_(tape), id_(id) {}

  Tape<Scalar>* tape_ = nullptr;
  Index id_ = -1;
};

/// Define-by-run record of a forward computation. Nodes are appended in
/// execution order, so the node list is already topologically sorted.
template <typename Scalar>
class Tape {
 public:
  using Array = typename Tensor<Scalar>::Array;
  using BackwardFn = std::function<void(Tape&, const Array& grad_out, const Tensor<Scalar>& out)>;

  /// With record=false nothing requires grad and no backward rules are kept.
  explicit Tape(bool record = true) : record_(record) { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  Index size() const { return static_cast<Index>(nodes_.size()); }

  Var<Scalar> constant(Tensor<Scalar> value) { return push(std::move(value), false, nullptr, "constant", {}); }

  /// Leaf that receives a gradient readable through grad() after backward.
  Var<Scalar> variable(Tensor<Scalar> value) { return push(std::move(value), record_, nullptr, "variable", {}); }

  /// Leaf bound to a parameter; backward adds into p.grad() when p requires grad.
  Var<Scalar> param(Tensor<Scalar>& p) {
    const bool rg = record_ && p.requires_grad();
    Tensor<Scalar> copy(p.shape(), p.data());
    return push(std::move(copy), rg, rg ? &p : nullptr, "param", {});
  }

  Var<Scalar> record(const char* kind, Tensor<Scalar> value, std::initializer_list<Var<Scalar>> inputs,
                     BackwardFn fn) {
    return record(kind, std::move(value), std::vector<Var<Scalar>>(inputs), std::move(fn));
  }

  Var<Scalar> record(const char* kind, Tensor<Scalar> value, const std::vector<Var<Scalar>>& inputs,
                     BackwardFn fn) {
    bool rg = false;
    for (const auto& in : inputs) {
      check_owned(in, kind);
      rg = rg || nodes_[static_cast<std::size_t>(in.id())].requires_grad;
    }
    rg = rg && record_;
    return push(std::move(value), rg, nullptr, kind, rg ? std::move(fn) : BackwardFn{});
  }

  const Tensor<Scalar>& value(const Var<Scalar>& v) const { return node(v).value; }
  bool requires_grad(const Var<Scalar>& v) const { return node(v).requires_grad; }

  /// Gradient buffer of a node, zero-initialised on first use. Only meaningful
  /// for nodes that require grad; used by backward rules.
  Array& grad_buffer(const Var<Scalar>& v) {
    Node& n = node(v);
    if (!n.has_grad) {
      n.grad = Array::Zero(n.value.numel());
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Gradient of the last backward pass with respect to v (zeros if none reached it).
  Array grad(const Var<Scalar>& v) const {
    const Node& n = node(v);
    return n.has_grad ? n.grad : Array::Zero(n.value.numel());
  }

  void backward(const Var<Scalar>& loss) {
    check_owned(loss, "backward");
    if (loss.numel() != 1) {
      throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    }
    if (consumed_) throw std::logic_error("backward: tape already consumed; re-run the forward pass");
    consumed_ = true;
    if (!node(loss).requires_grad) return;
    grad_buffer(loss).setOnes();
    for (Index i = loss.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.has_grad) continue;
      if (n.backward) n.backward(*this, n.grad, n.value);
      if (n.leaf != nullptr) n.leaf->grad() += n.grad;
    }
  }

 private:
  struct Node {
    Tensor<Scalar> value;
    bool requires_grad = false;
    Tensor<Scalar>* leaf = nullptr;
    const char* kind = "";
    BackwardFn backward;
    Array grad;
    bool has_grad = false;
  };

  Var<Scalar> push(Tensor<Scalar> value, bool rg, Tensor<Scalar>* leaf, const char* kind, BackwardFn fn) {
    if (consumed_) throw std::logic_error(std::string(kind) + ": tape already consumed by backward");
    nodes_.push_back(Node{std::move(value), rg, leaf, kind, std::move(fn), Array(), false});
    return Var<Scalar>(this, static_cast<Index>(nodes_.size()) - 1);
  }

  void check_owned(const Var<Scalar>& v, const char* kind) const {
    if (v.tape() != this || v.id() < 0 || v.id() >= size()) {
      throw std::invalid_argument(std::string(kind) + ": operand belongs to a different tape");
    }
  }

  Node& node(const Var<Scalar>& v) { return nodes_[static_cast<std::size_t>(v.id())]; }
  const Node& node(const Var<Scalar>& v) const { return nodes_[static_cast<std::size_t>(v.id())]; }

  std::vector<Node> nodes_;
  bool record_;
  bool consumed_ = false;
};

}  // namespace transmix
