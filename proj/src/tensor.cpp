// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0

#include "tcomp/tensor.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace tcomp {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;
thread_local bool g_finite_checks = true;
thread_local std::int64_t g_cosine_degenerate = 0;

#if defined(__GLIBC__)
// Activation buffers are reallocated every step; keep them on the heap
// instead of fresh mmap pages.
const bool g_malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
  return true;
}();
#endif

using NodePtr = std::shared_ptr<detail::Node>;

int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
  }
  return a;
}

struct AxisSplit {
  std::int64_t outer = 1;
  std::int64_t n = 1;
  std::int64_t inner = 1;
};

AxisSplit split_at(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void check_finite(const char* op, const FloatBuffer& v) {
  if (!g_finite_checks || v.empty()) return;
  // x * 0 is NaN exactly when x is not finite.
  const float probe = (Eigen::Map<const Eigen::ArrayXf>(v.data(), static_cast<Eigen::Index>(v.size())) * 0.0f).sum();
  if (probe != 0.0f) {
    throw NumericalError(std::string("non-finite value produced by ") + op);
  }
}

// Builds the result node. Inputs are retained only when the result records
// gradient.
NodePtr make_node(const char* op, Shape shape, FloatBuffer data,
                  std::initializer_list<const Tensor*> inputs) {
  check_finite(op, data);
  auto node = std::make_shared<detail::Node>();
  node->op = op;
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (g_grad_enabled) {
    for (const Tensor* t : inputs) {
      if (t->requires_grad()) {
        node->requires_grad = true;
        break;
      }
    }
  }
  if (node->requires_grad) {
    for (const Tensor* t : inputs) node->inputs.push_back(t->node());
  }
  return node;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

float* grad_if(const NodePtr& n) { return n->requires_grad ? n->grad_buffer() : nullptr; }

// dst.grad += g. An empty destination takes a copy, or the buffer itself
// when `steal` is set and g is not read again.
void accumulate(const NodePtr& dst, FloatBuffer& g, bool steal) {
  if (!dst->requires_grad) return;
  if (dst->grad.empty()) {
    if (steal) {
      dst->grad = std::move(g);
    } else {
      dst->grad = g;
    }
    return;
  }
  Eigen::Map<Eigen::ArrayXf>(dst->grad.data(), static_cast<Eigen::Index>(g.size())) +=
      Eigen::Map<const Eigen::ArrayXf>(g.data(), static_cast<Eigen::Index>(g.size()));
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto in = x.data();
  FloatBuffer out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  auto node = make_node(op, x.shape(), std::move(out), {&x});
  if (node->requires_grad) {
    node->backward = [deriv](detail::Node& self) {
      auto& src = self.inputs[0];
      float* g = src->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] += self.grad[i] * deriv(src->data[i], self.data[i]);
      }
    };
  }
  return Tensor(node);
}

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

float* detail::Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0f);
  return grad.data();
}

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<float>(static_cast<std::size_t>(n), value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  for (auto d : shape) {
    if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data.assign(values.begin(), values.end());
  node->requires_grad = requires_grad;
  return Tensor(node);
}

Tensor Tensor::scalar(float value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }

std::int64_t Tensor::dim(int axis) const {
  return shape()[normalize_axis(axis, rank(), "dim")];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(node_->data.size()); }

std::span<const float> Tensor::data() const { return node_->data; }
std::span<float> Tensor::mutable_data() { return node_->data; }

float Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

float Tensor::at(std::initializer_list<std::int64_t> index) const {
  if (index.size() != shape().size()) throw DimensionError("at(): wrong index rank");
  std::int64_t flat = 0;
  std::size_t i = 0;
  for (auto v : index) {
    if (v < 0 || v >= shape()[i]) throw DimensionError("at(): index out of range");
    flat = flat * shape()[i] + v;
    ++i;
  }
  return node_->data[static_cast<std::size_t>(flat)];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const float> Tensor::grad() const { return node_->grad; }
std::span<float> Tensor::mutable_grad() { return {node_->grad_buffer(), node_->data.size()}; }
void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = shape();
  node->data = node_->data;
  return Tensor(node);
}

Tensor Tensor::clone() const {
  Tensor copy = detach();
  copy.node_->requires_grad = requires_grad();
  return copy;
}

const char* Tensor::op_name() const { return node_->op; }

void Tensor::backward() const { tcomp::backward(*this); }

// ---------------------------------------------------------------- Tape

Tape Tape::record(const Tensor& root) {
  Tape tape;
  tape.root_ = root.node();
  std::vector<detail::Node*> post;
  std::unordered_set<detail::Node*> seen;
  // Iterative post-order DFS; reversed, it lists consumers before producers.
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      post.push_back(node);
      stack.pop_back();
    }
  }
  tape.order_.assign(post.rbegin(), post.rend());
  return tape;
}

void Tape::replay() {
  for (auto* node : order_) {
    if (!node->is_leaf()) node->grad.clear();
  }
  detail::Node* root = order_.front();
  root->grad.assign(root->data.size(), 1.0f);
  for (auto* node : order_) {
    if (node->is_leaf() || node->grad.empty()) continue;
    node->backward(*node);
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw SpecError("backward() requires a scalar loss, got " +
                    (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) {
    throw SpecError("backward() on a loss that does not depend on any trainable tensor");
  }
  if (loss.node()->is_leaf()) {
    loss.node()->grad_buffer()[0] += 1.0f;
    return;
  }
  Tape::record(loss).replay();
}

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks() { return g_finite_checks; }

std::int64_t cosine_degeneracy_count() { return g_cosine_degenerate; }
void reset_cosine_degeneracy_count() { g_cosine_degenerate = 0; }

// ---------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.dim(-1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const auto k = b.dim(0), n = b.dim(1);
  const auto m = a.numel() / k;
  FloatBuffer out(static_cast<std::size_t>(m * n));
  MatMap(out.data(), m, n).noalias() = ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), k, n);
  Shape shape = a.shape();
  shape.back() = n;
  auto node = make_node("matmul", std::move(shape), std::move(out), {&a, &b});
  if (node->requires_grad) {
    node->backward = [m, k, n](detail::Node& self) {
      auto& A = self.inputs[0];
      auto& B = self.inputs[1];
      ConstMatMap dC(self.grad.data(), m, n);
      if (float* g = grad_if(A)) MatMap(g, m, k).noalias() += dC * ConstMatMap(B->data.data(), k, n).transpose();
      if (float* g = grad_if(B)) MatMap(g, k, n).noalias() += ConstMatMap(A->data.data(), m, k).transpose() * dC;
    };
  }
  return Tensor(node);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() < 1 || b.rank() != 2 || a.dim(-1) != b.dim(1)) {
    throw DimensionError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + "^T");
  }
  const auto n = b.dim(0), k = b.dim(1);
  const auto m = a.numel() / k;
  FloatBuffer out(static_cast<std::size_t>(m * n));
  MatMap(out.data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), n, k).transpose();
  Shape shape = a.shape();
  shape.back() = n;
  auto node = make_node("matmul_nt", std::move(shape), std::move(out), {&a, &b});
  if (node->requires_grad) {
    node->backward = [m, k, n](detail::Node& self) {
      auto& A = self.inputs[0];
      auto& B = self.inputs[1];
      ConstMatMap dC(self.grad.data(), m, n);
      if (float* g = grad_if(A)) MatMap(g, m, k).noalias() += dC * ConstMatMap(B->data.data(), n, k);
      if (float* g = grad_if(B)) MatMap(g, n, k).noalias() += dC.transpose() * ConstMatMap(A->data.data(), m, k);
    };
  }
  return Tensor(node);
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  const bool ok = a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) &&
                  a.dim(2) == (transpose_b ? b.dim(2) : b.dim(1));
  if (!ok) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + (transpose_b ? "^T" : ""));
  }
  const auto batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const auto n = transpose_b ? b.dim(1) : b.dim(2);
  FloatBuffer out(static_cast<std::size_t>(batch * m * n));
  for (std::int64_t i = 0; i < batch; ++i) {
    ConstMatMap A(a.data().data() + i * m * k, m, k);
    MatMap C(out.data() + i * m * n, m, n);
    if (transpose_b) {
      C.noalias() = A * ConstMatMap(b.data().data() + i * n * k, n, k).transpose();
    } else {
      C.noalias() = A * ConstMatMap(b.data().data() + i * k * n, k, n);
    }
  }
  auto node = make_node("bmm", {batch, m, n}, std::move(out), {&a, &b});
  if (node->requires_grad) {
    node->backward = [batch, m, k, n, transpose_b](detail::Node& self) {
      auto& A = self.inputs[0];
      auto& B = self.inputs[1];
      float* gA = grad_if(A);
      float* gB = grad_if(B);
      for (std::int64_t i = 0; i < batch; ++i) {
        ConstMatMap dC(self.grad.data() + i * m * n, m, n);
        ConstMatMap Ai(A->data.data() + i * m * k, m, k);
        if (transpose_b) {
          ConstMatMap Bi(B->data.data() + i * n * k, n, k);
          if (gA) MatMap(gA + i * m * k, m, k).noalias() += dC * Bi;
          if (gB) MatMap(gB + i * n * k, n, k).noalias() += dC.transpose() * Ai;
        } else {
          ConstMatMap Bi(B->data.data() + i * k * n, k, n);
          if (gA) MatMap(gA + i * m * k, m, k).noalias() += dC * Bi.transpose();
          if (gB) MatMap(gB + i * k * n, k, n).noalias() += Ai.transpose() * dC;
        }
      }
    };
  }
  return Tensor(node);
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_bias(matmul(x, weight), bias);
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  FloatBuffer out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  auto node = make_node("add", a.shape(), std::move(out), {&a, &b});
  if (node->requires_grad) {
    node->backward = [](detail::Node& self) {
      accumulate(self.inputs[0], self.grad, false);
      accumulate(self.inputs[1], self.grad, true);
    };
  }
  return Tensor(node);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  FloatBuffer out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  auto node = make_node("sub", a.shape(), std::move(out), {&a, &b});
  if (node->requires_grad) {
    node->backward = [](detail::Node& self) {
      if (float* g = grad_if(self.inputs[0])) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
      if (float* g = grad_if(self.inputs[1])) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
      }
    };
  }
  return Tensor(node);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  FloatBuffer out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  auto node = make_node("mul", a.shape(), std::move(out), {&a, &b});
  if (node->requires_grad) {
    node->backward = [](detail::Node& self) {
      auto& A = self.inputs[0];
      auto& B = self.inputs[1];
      if (float* g = grad_if(A)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * B->data[i];
      }
      if (float* g = grad_if(B)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * A->data[i];
      }
    };
  }
  return Tensor(node);
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || bias.dim(0) != x.dim(-1)) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " +
                         shape_str(x.shape()));
  }
  const auto n = bias.dim(0);
  const auto rows = x.numel() / n;
  FloatBuffer out(x.data().begin(), x.data().end());
  MatMap(out.data(), rows, n).rowwise() += Eigen::Map<const Eigen::RowVectorXf>(bias.data().data(), n);
  auto node = make_node("add_bias", x.shape(), std::move(out), {&x, &bias});
  if (node->requires_grad) {
    node->backward = [n, rows](detail::Node& self) {
      if (float* g = grad_if(self.inputs[0])) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
      if (float* g = grad_if(self.inputs[1])) {
        Eigen::Map<Eigen::RowVectorXf>(g, n) += ConstMatMap(self.grad.data(), rows, n).colwise().sum();
      }
    };
  }
  return Tensor(node);
}

Tensor scale(const Tensor& x, float factor) {
  return unary("scale", x, [factor](float v) { return v * factor; },
               [factor](float, float) { return factor; });
}

Tensor scale_by(const Tensor& x, const Tensor& factor) {
  if (factor.numel() != 1) throw DimensionError("scale_by: factor must have one element");
  const float c = factor.item();
  FloatBuffer out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= c;
  auto node = make_node("scale_by", x.shape(), std::move(out), {&x, &factor});
  if (node->requires_grad) {
    node->backward = [](detail::Node& self) {
      auto& X = self.inputs[0];
      auto& F = self.inputs[1];
      if (float* g = grad_if(X)) {
        const float c = F->data[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * c;
      }
      if (float* g = grad_if(F)) {
        double acc = 0.0;
        for (std::size_t i = 0; i < self.grad.size(); ++i) acc += double(self.grad[i]) * X->data[i];
        g[0] += static_cast<float>(acc);
      }
    };
  }
  return Tensor(node);
}

Tensor add_scalar(const Tensor& x, float value) {
  return unary("add_scalar", x, [value](float v) { return v + value; }, [](float, float) { return 1.0f; });
}

Tensor abs(const Tensor& x) {
  return unary("abs", x, [](float v) { return std::fabs(v); },
               [](float v, float) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); });
}

Tensor exp(const Tensor& x) {
  return unary("exp", x, [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary("log", x, [](float v) { return std::log(v); }, [](float v, float) { return 1.0f / v; });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x,
               [](float v) {
                 return v >= 0.0f ? 1.0f / (1.0f + std::exp(-v)) : std::exp(v) / (1.0f + std::exp(v));
               },
               [](float, float y) { return y * (1.0f - y); });
}

Tensor softplus(const Tensor& x) {
  return unary("softplus", x,
               [](float v) { return v > 0.0f ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
               [](float v, float) {
                 return v >= 0.0f ? 1.0f / (1.0f + std::exp(-v)) : std::exp(v) / (1.0f + std::exp(v));
               });
}

Tensor reciprocal(const Tensor& x) {
  return unary("reciprocal", x, [](float v) { return 1.0f / v; }, [](float, float y) { return -y * y; });
}

constexpr float kInvSqrt2 = 0.70710678118654752f;
constexpr float kInvSqrt2Pi = 0.39894228040143268f;

Tensor gelu(const Tensor& x) {
  const auto n = static_cast<Eigen::Index>(x.numel());
  Eigen::Map<const Eigen::ArrayXf> in(x.data().data(), n);
  FloatBuffer out(static_cast<std::size_t>(n));
  Eigen::Map<Eigen::ArrayXf>(out.data(), n) = 0.5f * in * (1.0f + (in * kInvSqrt2).erf());
  auto node = make_node("gelu", x.shape(), std::move(out), {&x});
  if (node->requires_grad) {
    node->backward = [n](detail::Node& self) {
      auto& src = self.inputs[0];
      Eigen::Map<const Eigen::ArrayXf> v(src->data.data(), n);
      Eigen::Map<const Eigen::ArrayXf> up(self.grad.data(), n);
      Eigen::Map<Eigen::ArrayXf>(src->grad_buffer(), n) +=
          up * (0.5f * (1.0f + (v * kInvSqrt2).erf()) + v * kInvSqrt2Pi * (-0.5f * v * v).exp());
    };
  }
  return Tensor(node);
}

// ---------------------------------------------------------------- shape

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  FloatBuffer out(x.data().begin(), x.data().end());
  auto node = make_node("reshape", std::move(shape), std::move(out), {&x});
  if (node->requires_grad) {
    node->backward = [](detail::Node& self) { accumulate(self.inputs[0], self.grad, true); };
  }
  return Tensor(node);
}

namespace {

// Viewing the tensor as [outer, A, mid, B, inner] (A, B the swapped axes),
// copies src into [outer, B, mid, A, inner]; or back again when inverse.
struct SwapLayout {
  std::int64_t outer = 1, a = 1, mid = 1, b = 1, inner = 1;

  void apply(const float* src, float* dst, bool inverse, bool accumulate) const {
    for (std::int64_t p = 0; p < outer; ++p) {
      for (std::int64_t j = 0; j < b; ++j) {
        for (std::int64_t m = 0; m < mid; ++m) {
          for (std::int64_t i = 0; i < a; ++i) {
            const std::int64_t in_off = (((p * a + i) * mid + m) * b + j) * inner;
            const std::int64_t out_off = (((p * b + j) * mid + m) * a + i) * inner;
            const float* from = src + (inverse ? out_off : in_off);
            float* to = dst + (inverse ? in_off : out_off);
            if (accumulate) {
              for (std::int64_t k = 0; k < inner; ++k) to[k] += from[k];
            } else {
              std::copy_n(from, inner, to);
            }
          }
        }
      }
    }
  }
};

}  // namespace

Tensor transpose(const Tensor& x, int axis0, int axis1) {
  const int r = x.rank();
  int a0 = normalize_axis(axis0, r, "transpose");
  int a1 = normalize_axis(axis1, r, "transpose");
  if (a0 > a1) std::swap(a0, a1);
  const Shape& in_shape = x.shape();
  SwapLayout layout;
  for (int i = 0; i < a0; ++i) layout.outer *= in_shape[i];
  layout.a = in_shape[a0];
  for (int i = a0 + 1; i < a1; ++i) layout.mid *= in_shape[i];
  layout.b = in_shape[a1];
  for (int i = a1 + 1; i < r; ++i) layout.inner *= in_shape[i];
  Shape out_shape = in_shape;
  std::swap(out_shape[a0], out_shape[a1]);

  FloatBuffer out(static_cast<std::size_t>(x.numel()));
  layout.apply(x.data().data(), out.data(), false, false);
  auto node = make_node("transpose", std::move(out_shape), std::move(out), {&x});
  if (node->requires_grad) {
    node->backward = [layout](detail::Node& self) {
      layout.apply(self.grad.data(), self.inputs[0]->grad_buffer(), true, true);
    };
  }
  return Tensor(node);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const int r = parts[0].rank();
  const int a = normalize_axis(axis, r, "concat");
  Shape out_shape = parts[0].shape();
  out_shape[a] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != static_cast<std::size_t>(r)) throw DimensionError("concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != a && probe[i] != parts[0].shape()[i]) {
        throw DimensionError("concat: shape mismatch " + shape_str(probe) + " vs " +
                             shape_str(parts[0].shape()));
      }
    }
    out_shape[a] += probe[a];
  }
  const auto split = split_at(out_shape, a);
  FloatBuffer out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::int64_t> widths;
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const auto w = p.dim(a) * split.inner;
    const auto src = p.data();
    for (std::int64_t o = 0; o < split.outer; ++o) {
      std::copy_n(src.data() + o * w, w, out.data() + o * split.n * split.inner + offset);
    }
    widths.push_back(w);
    offset += w;
  }
  auto node = make_node("concat", out_shape, std::move(out), {});
  if (grad_enabled()) {
    for (const auto& p : parts) {
      if (p.requires_grad()) node->requires_grad = true;
    }
  }
  if (node->requires_grad) {
    for (const auto& p : parts) node->inputs.push_back(p.node());
    const auto row = split.n * split.inner;
    const auto outer = split.outer;
    node->backward = [widths = std::move(widths), row, outer](detail::Node& self) {
      std::int64_t off = 0;
      for (std::size_t k = 0; k < self.inputs.size(); ++k) {
        if (float* g = grad_if(self.inputs[k])) {
          for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t i = 0; i < widths[k]; ++i) g[o * widths[k] + i] += self.grad[o * row + off + i];
          }
        }
        off += widths[k];
      }
    };
  }
  return Tensor(node);
}

Tensor embedding(const Tensor& table, std::span<const int> ids, Shape out_shape) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  if (shape_numel(out_shape) != static_cast<std::int64_t>(ids.size())) {
    throw DimensionError("embedding: " + std::to_string(ids.size()) + " ids for shape " + shape_str(out_shape));
  }
  const auto rows = table.dim(0), h = table.dim(1);
  FloatBuffer out(ids.size() * static_cast<std::size_t>(h));
  const auto src = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= rows) {
      throw DimensionError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                           std::to_string(rows) + " rows");
    }
    std::copy_n(src.data() + ids[i] * h, h, out.data() + i * h);
  }
  out_shape.push_back(h);
  auto node = make_node("embedding", std::move(out_shape), std::move(out), {&table});
  if (node->requires_grad) {
    node->backward = [ids = std::vector<int>(ids.begin(), ids.end()), h](detail::Node& self) {
      float* g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        for (std::int64_t j = 0; j < h; ++j) g[ids[i] * h + j] += self.grad[i * h + j];
      }
    };
  }
  return Tensor(node);
}

Tensor take_along_last(const Tensor& x, std::span<const int> index) {
  const auto n = x.dim(-1);
  const auto rows = x.numel() / n;
  if (static_cast<std::int64_t>(index.size()) != rows) {
    throw DimensionError("take_along_last: " + std::to_string(index.size()) + " indices for " +
                         shape_str(x.shape()));
  }
  FloatBuffer out(static_cast<std::size_t>(rows));
  for (std::int64_t i = 0; i < rows; ++i) {
    if (index[i] < 0 || index[i] >= n) throw DimensionError("take_along_last: index out of range");
    out[i] = x.data()[i * n + index[i]];
  }
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  if (shape.empty()) shape.push_back(1);
  auto node = make_node("take_along_last", std::move(shape), std::move(out), {&x});
  if (node->requires_grad) {
    node->backward = [idx = std::vector<int>(index.begin(), index.end()), n](detail::Node& self) {
      float* g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i) g[i * n + idx[i]] += self.grad[i];
    };
  }
  return Tensor(node);
}

// ---------------------------------------------------------------- reductions

namespace {

Tensor reduce_axis(const char* op, const Tensor& x, int axis, bool average) {
  const int a = normalize_axis(axis, x.rank(), op);
  const auto s = split_at(x.shape(), a);
  const double factor = average ? 1.0 / static_cast<double>(s.n) : 1.0;
  FloatBuffer out(static_cast<std::size_t>(s.outer * s.inner));
  const auto in = x.data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      double acc = 0.0;
      for (std::int64_t j = 0; j < s.n; ++j) acc += in[(o * s.n + j) * s.inner + i];
      out[o * s.inner + i] = static_cast<float>(acc * factor);
    }
  }
  Shape shape = x.shape();
  shape.erase(shape.begin() + a);
  if (shape.empty()) shape.push_back(1);
  auto node = make_node(op, std::move(shape), std::move(out), {&x});
  if (node->requires_grad) {
    node->backward = [s, f = static_cast<float>(factor)](detail::Node& self) {
      float* g = self.inputs[0]->grad_buffer();
      for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t j = 0; j < s.n; ++j) {
          for (std::int64_t i = 0; i < s.inner; ++i) g[(o * s.n + j) * s.inner + i] += self.grad[o * s.inner + i] * f;
        }
      }
    };
  }
  return Tensor(node);
}

}  // namespace

Tensor sum(const Tensor& x, int axis) { return reduce_axis("sum", x, axis, false); }
Tensor mean(const Tensor& x, int axis) { return reduce_axis("mean", x, axis, true); }
Tensor sum_all(const Tensor& x) { return reduce_axis("sum_all", reshape(x, {x.numel()}), 0, false); }
Tensor mean_all(const Tensor& x) { return reduce_axis("mean_all", reshape(x, {x.numel()}), 0, true); }

Tensor softmax(const Tensor& x, int axis) {
  const int a = normalize_axis(axis, x.rank(), "softmax");
  const auto s = split_at(x.shape(), a);
  FloatBuffer out(static_cast<std::size_t>(x.numel()));
  const auto in = x.data();
  if (s.inner == 1) {
    for (std::int64_t o = 0; o < s.outer; ++o) {
      Eigen::Map<const Eigen::ArrayXf> row(in.data() + o * s.n, s.n);
      Eigen::Map<Eigen::ArrayXf> dst(out.data() + o * s.n, s.n);
      dst = (row - row.maxCoeff()).exp();
      dst *= static_cast<float>(1.0 / dst.template cast<double>().sum());
    }
  } else {
    for (std::int64_t o = 0; o < s.outer; ++o) {
      for (std::int64_t i = 0; i < s.inner; ++i) {
        const auto base = o * s.n * s.inner + i;
        float mx = in[base];
        for (std::int64_t j = 1; j < s.n; ++j) mx = std::max(mx, in[base + j * s.inner]);
        double total = 0.0;
        for (std::int64_t j = 0; j < s.n; ++j) {
          const float e = std::exp(in[base + j * s.inner] - mx);
          out[base + j * s.inner] = e;
          total += e;
        }
        const float inv = static_cast<float>(1.0 / total);
        for (std::int64_t j = 0; j < s.n; ++j) out[base + j * s.inner] *= inv;
      }
    }
  }
  auto node = make_node("softmax", x.shape(), std::move(out), {&x});
  if (node->requires_grad) {
    node->backward = [s](detail::Node& self) {
      float* g = self.inputs[0]->grad_buffer();
      const auto& y = self.data;
      for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t i = 0; i < s.inner; ++i) {
          const auto base = o * s.n * s.inner + i;
          double dot = 0.0;
          for (std::int64_t j = 0; j < s.n; ++j) dot += double(self.grad[base + j * s.inner]) * y[base + j * s.inner];
          const float d = static_cast<float>(dot);
          for (std::int64_t j = 0; j < s.n; ++j) {
            const auto p = base + j * s.inner;
            g[p] += y[p] * (self.grad[p] - d);
          }
        }
      }
    };
  }
  return Tensor(node);
}

Tensor log_softmax(const Tensor& x, int axis) {
  const int a = normalize_axis(axis, x.rank(), "log_softmax");
  const auto s = split_at(x.shape(), a);
  FloatBuffer out(static_cast<std::size_t>(x.numel()));
  const auto in = x.data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      const auto base = o * s.n * s.inner + i;
      float mx = in[base];
      for (std::int64_t j = 1; j < s.n; ++j) mx = std::max(mx, in[base + j * s.inner]);
      double total = 0.0;
      for (std::int64_t j = 0; j < s.n; ++j) total += std::exp(double(in[base + j * s.inner]) - mx);
      const double lse = mx + std::log(total);
      for (std::int64_t j = 0; j < s.n; ++j) {
        out[base + j * s.inner] = static_cast<float>(in[base + j * s.inner] - lse);
      }
    }
  }
  auto node = make_node("log_softmax", x.shape(), std::move(out), {&x});
  if (node->requires_grad) {
    node->backward = [s](detail::Node& self) {
      float* g = self.inputs[0]->grad_buffer();
      const auto& y = self.data;
      for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t i = 0; i < s.inner; ++i) {
          const auto base = o * s.n * s.inner + i;
          double total = 0.0;
          for (std::int64_t j = 0; j < s.n; ++j) total += self.grad[base + j * s.inner];
          const float t = static_cast<float>(total);
          for (std::int64_t j = 0; j < s.n; ++j) {
            const auto p = base + j * s.inner;
            g[p] += self.grad[p] - std::exp(y[p]) * t;
          }
        }
      }
    };
  }
  return Tensor(node);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const auto h = x.dim(-1);
  if (h < 2) throw DimensionError("layer_norm: last axis must have at least 2 elements");
  if (gain.rank() != 1 || gain.dim(0) != h || bias.rank() != 1 || bias.dim(0) != h) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " do not match " + shape_str(x.shape()));
  }
  const auto rows = x.numel() / h;
  auto normalized = std::make_shared<FloatBuffer>(static_cast<std::size_t>(x.numel()));
  auto inv_std = std::make_shared<FloatBuffer>(static_cast<std::size_t>(rows));
  FloatBuffer out(static_cast<std::size_t>(x.numel()));
  const auto in = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* row = in.data() + r * h;
    double mu = 0.0;
    for (std::int64_t j = 0; j < h; ++j) mu += row[j];
    mu /= static_cast<double>(h);
    double var = 0.0;
    for (std::int64_t j = 0; j < h; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(h);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    (*inv_std)[r] = static_cast<float>(is);
    for (std::int64_t j = 0; j < h; ++j) {
      const float xh = static_cast<float>((row[j] - mu) * is);
      (*normalized)[r * h + j] = xh;
      out[r * h + j] = xh * gd[j] + bd[j];
    }
  }
  auto node = make_node("layer_norm", x.shape(), std::move(out), {&x, &gain, &bias});
  if (node->requires_grad) {
    node->backward = [normalized, inv_std, h, rows](detail::Node& self) {
      auto& X = self.inputs[0];
      auto& G = self.inputs[1];
      float* gx = grad_if(X);
      float* gg = grad_if(G);
      float* gb = grad_if(self.inputs[2]);
      const auto& xh = *normalized;
      FloatBuffer dxh(static_cast<std::size_t>(h));
      for (std::int64_t r = 0; r < rows; ++r) {
        const float* dy = self.grad.data() + r * h;
        const float* xr = xh.data() + r * h;
        if (gg || gb) {
          for (std::int64_t j = 0; j < h; ++j) {
            if (gg) gg[j] += dy[j] * xr[j];
            if (gb) gb[j] += dy[j];
          }
        }
        if (!gx) continue;
        double m1 = 0.0, m2 = 0.0;
        for (std::int64_t j = 0; j < h; ++j) {
          dxh[j] = dy[j] * G->data[j];
          m1 += dxh[j];
          m2 += double(dxh[j]) * xr[j];
        }
        m1 /= static_cast<double>(h);
        m2 /= static_cast<double>(h);
        const float is = (*inv_std)[r];
        for (std::int64_t j = 0; j < h; ++j) {
          gx[r * h + j] += is * static_cast<float>(dxh[j] - m1 - xr[j] * m2);
        }
      }
    };
  }
  return Tensor(node);
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  require_same_shape("cosine_similarity", a, b);
  const auto n = a.dim(-1);
  const auto rows = a.numel() / n;
  FloatBuffer out(static_cast<std::size_t>(rows));
  auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(2 * rows));
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      const double x = ad[r * n + j], y = bd[r * n + j];
      dot += x * y;
      na += x * x;
      nb += y * y;
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    (*norms)[2 * r] = na;
    (*norms)[2 * r + 1] = nb;
    if (na == 0.0 || nb == 0.0) {
      ++g_cosine_degenerate;
      out[r] = 0.0f;
    } else {
      out[r] = static_cast<float>(dot / (na * nb));
    }
  }
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  if (shape.empty()) shape.push_back(1);
  auto node = make_node("cosine_similarity", std::move(shape), std::move(out), {&a, &b});
  if (node->requires_grad) {
    node->backward = [norms, n, rows](detail::Node& self) {
      auto& A = self.inputs[0];
      auto& B = self.inputs[1];
      float* ga = grad_if(A);
      float* gb = grad_if(B);
      for (std::int64_t r = 0; r < rows; ++r) {
        const double na = (*norms)[2 * r], nb = (*norms)[2 * r + 1];
        if (na == 0.0 || nb == 0.0) continue;
        const double c = self.data[r];
        const double up = self.grad[r];
        for (std::int64_t j = 0; j < n; ++j) {
          const double x = A->data[r * n + j], y = B->data[r * n + j];
          if (ga) ga[r * n + j] += static_cast<float>(up * (y / (na * nb) - c * x / (na * na)));
          if (gb) gb[r * n + j] += static_cast<float>(up * (x / (na * nb) - c * y / (nb * nb)));
        }
      }
    };
  }
  return Tensor(node);
}

}  // namespace tcomp
