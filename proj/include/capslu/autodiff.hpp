#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "capslu/tensor.hpp"

namespace capslu::ad {

template <typename T>
class Tape;

/// Handle to a node recorded on a Tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(long axis) const { return value().dim(axis); }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records one forward pass and replays it in reverse to accumulate gradients.
///
/// Nodes are appended in evaluation order, which is already a topological
/// order, so backward() walks the node list once from the end. Parameter
/// leaves add their gradient into the bound Parameter::grad; the caller zeroes
/// those between steps.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& out_grad)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> parameter(Parameter<T>& p);

  /// Adds an op output; `backward` is skipped when no parent needs a gradient.
  Var<T> record(Tensor<T> value, std::vector<std::size_t> parents, BackwardFn backward);

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Adds `g` into the gradient of node `id` (no-op for constants).
  void accumulate(std::size_t id, const Tensor<T>& g);
  /// Gradient buffer of node `id`, allocated on first use.
  Tensor<T>& grad(std::size_t id);

  void backward(Var<T> loss);

  std::size_t size() const { return nodes_.size(); }

  /// When set, every recorded value is checked for NaN/Inf.
  void set_check_finite(bool on) { check_finite_ = on; }
  bool check_finite() const { return check_finite_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool check_finite_;
};

// Elementwise arithmetic with trailing-aligned broadcasting over size-1 axes.
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
/// Multiplies by a constant tensor (e.g. a padding mask) without tracking it.
template <typename T> Var<T> mul_const(Var<T> a, const Tensor<T>& c);
template <typename T> Var<T> add_const(Var<T> a, const Tensor<T>& c);
template <typename T> Var<T> add_scalar(Var<T> a, T c);
template <typename T> Var<T> scale(Var<T> a, T c);

/// [m,k] x [k,n].
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
/// Batched matmul over the leading axis of two rank-3 tensors.
template <typename T> Var<T> bmm(Var<T> a, Var<T> b, bool trans_a = false, bool trans_b = false);

template <typename T> Var<T> concat(std::span<const Var<T>> parts, long axis);
template <typename T> Var<T> slice(Var<T> a, long axis, std::size_t start, std::size_t length);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);
template <typename T> Var<T> permute(Var<T> a, std::span<const std::size_t> perm);

template <typename T> Var<T> sum(Var<T> a, long axis, bool keepdim = false);
template <typename T> Var<T> sum_all(Var<T> a);
template <typename T> Var<T> mean_all(Var<T> a);
/// Max over an axis; ties route the gradient to the lowest index.
template <typename T> Var<T> max(Var<T> a, long axis);
/// Max over `axis` considering only entries where `mask` (same shape as a) is nonzero.
template <typename T> Var<T> masked_max(Var<T> a, const Tensor<T>& mask, long axis);

template <typename T> Var<T> sigmoid(Var<T> a);
template <typename T> Var<T> tanh(Var<T> a);
template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> log(Var<T> a);
/// Clamps into [lo, hi]; the gradient is zero where clamping is active.
template <typename T> Var<T> clamp(Var<T> a, T lo, T hi);

template <typename T> Var<T> softmax(Var<T> a, long axis);
/// Euclidean norm over `axis`; the gradient at a zero vector is zero.
template <typename T> Var<T> l2_norm(Var<T> a, long axis);
template <typename T> Var<T> scalar_product(Var<T> a, Var<T> b, long axis);

/// Capsule nonlinearity along `axis`: (|x|^2 / (1 + |x|^2)) * x / |x|.
/// Zero input maps to zero; the norm in the denominator carries a 1e-9 guard.
template <typename T> Var<T> squash(Var<T> a, long axis);

/// Keeps every `stride`-th entry along `axis` starting at 0 (ceil(n / stride) kept).
template <typename T> Var<T> subsample(Var<T> a, long axis, std::size_t stride);

}  // namespace capslu::ad
