// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense f32 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node. Copying a Tensor shares
// storage; this is how tied weights are expressed. Every op returns a new
// node and, when gradient recording is on and some input requires grad,
// remembers its inputs and a backward rule.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "tcomp/error.hpp"

namespace tcomp {

using Shape = std::vector<std::int64_t>;

// Tensor storage starts on a 64-byte boundary. Vectorized kernels peel
// unaligned leading elements, so without this the summation order (and the
// last bits of a result) would depend on where a buffer happened to land.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  FloatBuffer data;
  FloatBuffer grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;  // empty for leaves

  bool is_leaf() const { return !backward; }
  // Zero-filled on first use.
  float* grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(int axis) const;  // negative axes count from the back
  int rank() const { return static_cast<int>(shape().size()); }
  std::int64_t numel() const;

  std::span<const float> data() const;
  // Direct write access, intended for leaves (optimizers, surgery, loaders).
  std::span<float> mutable_data();
  float item() const;
  float at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> mutable_grad();
  void zero_grad();

  // Fresh leaf holding a copy of the values; never records gradient.
  Tensor detach() const;
  // Deep copy keeping requires_grad; a new storage.
  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  // Reverse-mode sweep from this scalar. Leaf grads accumulate across calls.
  void backward() const;

  const char* op_name() const;
  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Nodes reachable from a root, ordered so every node precedes its inputs.
class Tape {
 public:
  static Tape record(const Tensor& root);
  std::size_t size() const { return order_.size(); }
  const std::vector<detail::Node*>& order() const { return order_; }
  // Seeds root grad with 1 and runs every backward rule once.
  void replay();

 private:
  std::vector<detail::Node*> order_;
  std::shared_ptr<detail::Node> root_;
};

void backward(const Tensor& loss);

// Gradient recording is thread-local and on by default.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Non-finite outputs raise NumericalError while checks are on (the default).
void set_finite_checks(bool enabled);
bool finite_checks();

// Number of zero-norm vectors seen by cosine_similarity in this thread.
std::int64_t cosine_degeneracy_count();
void reset_cosine_degeneracy_count();

// ---- linear algebra ----
// a: [..., m, k] (leading dims flattened), b: [k, n] -> [..., m, n]
Tensor matmul(const Tensor& a, const Tensor& b);
// a: [..., k], b: [n, k] -> [..., n]   (a times b transposed)
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// a: [B, m, k], b: [B, k, n] (or [B, n, k] with transpose_b) -> [B, m, n]
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);
// x: [..., in], weight: [in, out], bias: [out]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_bias(const Tensor& x, const Tensor& bias);  // bias broadcast on last axis
Tensor scale(const Tensor& x, float factor);
Tensor scale_by(const Tensor& x, const Tensor& factor);  // factor: one element
Tensor add_scalar(const Tensor& x, float value);
Tensor abs(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor reciprocal(const Tensor& x);
Tensor gelu(const Tensor& x);

// ---- shape ----
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x, int axis0, int axis1);
Tensor concat(const std::vector<Tensor>& parts, int axis);
// Rows of table [V, h] selected by ids; result shape = out_shape + [h].
Tensor embedding(const Tensor& table, std::span<const int> ids, Shape out_shape);
// x: [..., n], index per leading position -> [...]
Tensor take_along_last(const Tensor& x, std::span<const int> index);

// ---- reductions / normalization ----
Tensor sum(const Tensor& x, int axis);
Tensor mean(const Tensor& x, int axis);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax(const Tensor& x, int axis = -1);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
// Cosine similarity along the last axis: [..., n] x [..., n] -> [...].
// Zero-norm vectors give 0 and bump the degeneracy counter.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

inline constexpr float kLayerNormEps = 1e-5f;

}  // namespace tcomp
