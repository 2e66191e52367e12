#include "fewshot/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_set>
#include <utility>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace fewshot {

namespace {

std::atomic<bool> g_finite_checks{true};
thread_local bool t_grad_enabled = true;

#if defined(__GLIBC__)
// Activation buffers are large and short-lived; keep them on the heap instead of mmap/munmap per tensor.
const bool g_malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
  return true;
}();
#endif

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstArr = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using MutArr = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
ConstArr<T> arr(std::span<const T> s) {
  return ConstArr<T>(s.data(), static_cast<Eigen::Index>(s.size()));
}
template <typename T>
MutArr<T> arr(std::span<T> s) {
  return MutArr<T>(s.data(), static_cast<Eigen::Index>(s.size()));
}
template <typename T>
MutArr<T> arr(std::vector<T>& v) {
  return MutArr<T>(v.data(), static_cast<Eigen::Index>(v.size()));
}

[[noreturn]] void fail(Errc code, const std::string& msg) { throw Error(code, msg); }

template <typename T>
void check_finite(std::span<const T> values, const char* op) {
  if (!g_finite_checks.load(std::memory_order_relaxed)) return;
  std::size_t bad = 0;
  const T big = std::numeric_limits<T>::max();
  for (const T v : values) bad += !(std::fabs(v) <= big);
  if (bad == 0) return;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      fail(Errc::non_finite, std::string(op) + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(Errc::shape_mismatch, std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                                   shape_str(b.shape()) + " differ");
  }
}

template <typename T>
void require_rank(const Tensor<T>& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    fail(Errc::shape_mismatch, std::string(op) + ": expected rank " + std::to_string(rank) +
                                   ", got " + shape_str(x.shape()));
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }
bool finite_checks_enabled() { return g_finite_checks.load(); }

// --- GradSink ---------------------------------------------------------------

template <typename T>
bool GradSink<T>::wants(std::size_t i) const {
  return i < inputs_.size() && inputs_[i]->requires_grad;
}

template <typename T>
std::span<T> GradSink<T>::grad(std::size_t i) {
  auto& n = *inputs_.at(i);
  if (!n.has_grad) {
    n.grad.assign(n.data.size(), T(0));
    n.has_grad = true;
  }
  return n.grad;
}

// --- Tensor -----------------------------------------------------------------

template <typename T>
detail::Node<T>& Tensor<T>::node() const {
  if (!node_) fail(Errc::invalid_argument, "use of an undefined tensor");
  return *node_;
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values) {
  for (auto d : shape) {
    if (d == 0) fail(Errc::shape_mismatch, "tensor extents must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    fail(Errc::shape_mismatch, "shape " + shape_str(shape) + " needs " +
                                   std::to_string(shape_numel(shape)) + " values, got " +
                                   std::to_string(values.size()));
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) fail(Errc::non_finite, "tensor_from: non-finite input value");
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return from({1}, {value});
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  return node().shape;
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return node().data.size();
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) fail(Errc::invalid_argument, "axis out of range for " + shape_str(s));
  return s[axis];
}

template <typename T>
std::span<const T> Tensor<T>::values() const {
  return node().data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_values() {
  auto& n = node();
  if (!n.leaf) fail(Errc::autograd, std::string("cannot mutate the output of '") + n.op + "'");
  return n.data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) fail(Errc::shape_mismatch, "item() on tensor of shape " + shape_str(shape()));
  return node().data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) fail(Errc::invalid_argument, "index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) fail(Errc::invalid_argument, "index out of range for " + shape_str(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node().data[flat];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return node().requires_grad;
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  auto& n = node();
  if (!n.leaf) fail(Errc::autograd, "requires_grad can only be set on leaves");
  n.requires_grad = on;
  return *this;
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  return node().leaf;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return node().has_grad;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  auto& n = node();
  if (!n.has_grad) fail(Errc::autograd, "tensor has no gradient");
  return n.grad;
}

template <typename T>
void Tensor<T>::set_grad(std::vector<T> grad) {
  auto& n = node();
  if (grad.size() != n.data.size()) fail(Errc::shape_mismatch, "gradient size mismatch");
  n.grad = std::move(grad);
  n.has_grad = true;
}

template <typename T>
void Tensor<T>::clear_grad() {
  auto& n = node();
  n.grad.clear();
  n.has_grad = false;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = shape();
  node->data = this->node().data;
  return Tensor(std::move(node));
}

template <typename T>
const char* Tensor<T>::op_name() const {
  return node().op;
}

template <typename T>
Tensor<T> Tensor<T>::record(Shape shape, std::vector<T> values, std::vector<Tensor> inputs,
                            const char* op, BackwardFn<T> backward) {
  if (shape_numel(shape) != values.size()) {
    fail(Errc::shape_mismatch, std::string(op) + ": result size does not match " + shape_str(shape));
  }
  check_finite<T>(values, op);
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->op = op;
  node->leaf = false;
  for (const auto& in : inputs) {
    const auto& n = in.node();
    if (n.requires_grad && t_grad_enabled) {
      if (!n.leaf && n.consumed) {
        fail(Errc::autograd, std::string(op) + ": operand belongs to an already-consumed tape");
      }
      node->requires_grad = true;
    }
  }
  if (node->requires_grad) {
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node_);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

template <typename T>
void backward(const Tensor<T>& loss) {
  auto& root = loss.node();
  if (root.data.size() != 1) {
    fail(Errc::autograd, "backward needs a scalar loss, got " + shape_str(root.shape));
  }
  if (root.consumed) fail(Errc::autograd, "backward called twice on the same tape");
  if (!root.requires_grad || root.leaf) {
    fail(Errc::autograd, "loss does not depend on any tensor that requires a gradient");
  }

  // Post-order DFS: every operand precedes its consumers in `order`.
  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited{&root};
  std::vector<std::pair<NodeT*, std::size_t>> stack{{&root, 0}};
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      NodeT* in = n->inputs[next++].get();
      if (in->requires_grad && visited.insert(in).second) {
        if (!in->leaf && in->consumed) fail(Errc::autograd, "tape already consumed by backward");
        stack.emplace_back(in, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Gradients are allocated on first write and released as soon as their node has propagated.
  for (auto* n : order) n->has_grad = false;
  root.grad.assign(1, T(1));
  root.has_grad = true;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* n = *it;
    if (n->leaf) continue;
    if (!n->has_grad) {
      n->grad.assign(n->data.size(), T(0));
      n->has_grad = true;
    }
    GradSink<T> sink(n->inputs);
    n->backward(n->grad, sink);
    std::vector<T>().swap(n->grad);
    n->has_grad = false;
    n->consumed = true;
  }

  // Operands are only released here: `order` holds raw pointers kept alive by these links.
  for (auto* n : order) {
    if (!n->leaf) {
      n->backward = nullptr;
      n->inputs.clear();
      continue;
    }
    if (!n->has_grad) {
      n->grad.assign(n->data.size(), T(0));
      n->has_grad = true;
    }
    check_finite<T>(n->grad, "backward");
  }
}

// --- elementwise ------------------------------------------------------------

template <typename T>
Tensor<T> unary(UnaryOp op, const Tensor<T>& x) {
  auto in = x.values();
  std::vector<T> out(in.size());
  switch (op) {
    case UnaryOp::relu: {
      arr(out) = arr(in).max(T(0));
      return Tensor<T>::record(x.shape(), std::move(out), {x}, "relu",
                               [x](std::span<const T> dy, GradSink<T>& sink) {
                                 auto xv = x.values();
                                 auto dx = sink.grad(0);
                                 // relu'(0) := 0
                                 arr(dx) += (arr(xv) > T(0)).select(arr(dy), T(0));
                               });
    }
    case UnaryOp::exp: {
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::exp(in[i]);
      auto saved = std::make_shared<std::vector<T>>(out);
      return Tensor<T>::record(x.shape(), std::move(out), {x}, "exp",
                               [saved](std::span<const T> dy, GradSink<T>& sink) {
                                 auto dx = sink.grad(0);
                                 for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * (*saved)[i];
                               });
    }
    case UnaryOp::log: {
      for (std::size_t i = 0; i < in.size(); ++i) {
        if (!(in[i] > T(0))) fail(Errc::domain_error, "log of nonpositive value");
        out[i] = std::log(in[i]);
      }
      return Tensor<T>::record(x.shape(), std::move(out), {x}, "log",
                               [x](std::span<const T> dy, GradSink<T>& sink) {
                                 auto xv = x.values();
                                 auto dx = sink.grad(0);
                                 for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] / xv[i];
                               });
    }
  }
  fail(Errc::invalid_argument, "unknown unary op");
}

template <typename T>
Tensor<T> binary(BinaryOp op, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "elementwise");
  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(av.size());
  switch (op) {
    case BinaryOp::add:
      arr(out) = arr(av) + arr(bv);
      return Tensor<T>::record(a.shape(), std::move(out), {a, b}, "add",
                               [](std::span<const T> dy, GradSink<T>& sink) {
                                 for (std::size_t k = 0; k < 2; ++k) {
                                   if (!sink.wants(k)) continue;
                                   arr(sink.grad(k)) += arr(dy);
                                 }
                               });
    case BinaryOp::sub:
      arr(out) = arr(av) - arr(bv);
      return Tensor<T>::record(a.shape(), std::move(out), {a, b}, "sub",
                               [](std::span<const T> dy, GradSink<T>& sink) {
                                 if (sink.wants(0)) arr(sink.grad(0)) += arr(dy);
                                 if (sink.wants(1)) arr(sink.grad(1)) -= arr(dy);
                               });
    case BinaryOp::mul:
      arr(out) = arr(av) * arr(bv);
      return Tensor<T>::record(a.shape(), std::move(out), {a, b}, "mul",
                               [a, b](std::span<const T> dy, GradSink<T>& sink) {
                                 if (sink.wants(0)) arr(sink.grad(0)) += arr(dy) * arr(b.values());
                                 if (sink.wants(1)) arr(sink.grad(1)) += arr(dy) * arr(a.values());
                               });
  }
  fail(Errc::invalid_argument, "unknown binary op");
}

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& x, T factor) {
  auto in = x.values();
  std::vector<T> out(in.size());
  arr(out) = arr(in) * factor;
  return Tensor<T>::record(x.shape(), std::move(out), {x}, "scalar_mul",
                           [factor](std::span<const T> dy, GradSink<T>& sink) {
                             arr(sink.grad(0)) += arr(dy) * factor;
                           });
}

// --- reductions -------------------------------------------------------------

template <typename T>
Tensor<T> reduce(ReduceOp op, const Tensor<T>& x, std::optional<std::size_t> axis) {
  const auto& s = x.shape();
  std::size_t outer = 1, len = x.numel(), inner = 1;
  Shape out_shape{1};
  if (axis) {
    if (*axis >= s.size()) {
      fail(Errc::invalid_argument, "reduce: axis " + std::to_string(*axis) + " invalid for " + shape_str(s));
    }
    outer = std::accumulate(s.begin(), s.begin() + *axis, std::size_t{1}, std::multiplies<>());
    len = s[*axis];
    inner = std::accumulate(s.begin() + *axis + 1, s.end(), std::size_t{1}, std::multiplies<>());
    out_shape = s;
    out_shape.erase(out_shape.begin() + *axis);
    if (out_shape.empty()) out_shape = {1};
  }
  auto in = x.values();
  std::vector<T> out(outer * inner);
  std::vector<std::size_t> argmax;
  if (op == ReduceOp::max) argmax.resize(out.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      if (op == ReduceOp::max) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < len; ++k) {
          if (in[base + k * inner] > in[base + best * inner]) best = k;
        }
        out[o * inner + i] = in[base + best * inner];
        argmax[o * inner + i] = best;
      } else {
        T acc = 0;
        for (std::size_t k = 0; k < len; ++k) acc += in[base + k * inner];
        out[o * inner + i] = op == ReduceOp::mean ? acc / static_cast<T>(len) : acc;
      }
    }
  }
  const char* name = op == ReduceOp::sum ? "sum" : op == ReduceOp::mean ? "mean" : "max";
  return Tensor<T>::record(
      std::move(out_shape), std::move(out), {x}, name,
      [op, outer, len, inner, argmax = std::move(argmax)](std::span<const T> dy, GradSink<T>& sink) {
        auto dx = sink.grad(0);
        const T scale = op == ReduceOp::mean ? T(1) / static_cast<T>(len) : T(1);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * len * inner + i;
            const T g = dy[o * inner + i];
            if (op == ReduceOp::max) {
              dx[base + argmax[o * inner + i] * inner] += g;
            } else {
              for (std::size_t k = 0; k < len; ++k) dx[base + k * inner] += g * scale;
            }
          }
        }
      });
}

// --- linear algebra ---------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    fail(Errc::shape_mismatch, "matmul: inner extents differ: " + shape_str(a.shape()) + " x " +
                                   shape_str(b.shape()));
  }
  std::vector<T> out(m * n);
  MutMap<T>(out.data(), m, n).noalias() =
      ConstMap<T>(a.values().data(), m, k) * ConstMap<T>(b.values().data(), k, n);
  return Tensor<T>::record({m, n}, std::move(out), {a, b}, "matmul",
                           [a, b, m, k, n](std::span<const T> dy, GradSink<T>& sink) {
                             ConstMap<T> dc(dy.data(), m, n);
                             if (sink.wants(0)) {
                               MutMap<T>(sink.grad(0).data(), m, k).noalias() +=
                                   dc * ConstMap<T>(b.values().data(), k, n).transpose();
                             }
                             if (sink.wants(1)) {
                               MutMap<T>(sink.grad(1).data(), k, n).noalias() +=
                                   ConstMap<T>(a.values().data(), m, k).transpose() * dc;
                             }
                           });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(r * c);
  MutMap<T>(out.data(), c, r) = ConstMap<T>(a.values().data(), r, c).transpose();
  return Tensor<T>::record({c, r}, std::move(out), {a}, "transpose",
                           [r, c](std::span<const T> dy, GradSink<T>& sink) {
                             MutMap<T>(sink.grad(0).data(), r, c) +=
                                 ConstMap<T>(dy.data(), c, r).transpose();
                           });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    fail(Errc::shape_mismatch, "reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<T> out(x.values().begin(), x.values().end());
  return Tensor<T>::record(std::move(shape), std::move(out), {x}, "reshape",
                           [](std::span<const T> dy, GradSink<T>& sink) {
                             auto d = sink.grad(0);
                             for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
                           });
}

// --- convolution ------------------------------------------------------------

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, stride, pad, oh, ow;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t pixels() const { return oh * ow; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
  std::size_t hp() const { return h + 2 * pad; }
  std::size_t wp() const { return w + 2 * pad; }
  // Stride-1 kernels run on an oh x wp grid whose rows are contiguous runs of the padded image.
  bool wide() const { return stride == 1; }
  std::size_t columns() const { return wide() ? oh * wp() : pixels(); }
};

template <typename T>
using StridedArr = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>, 0, Eigen::InnerStride<>>;
template <typename T>
using MutStridedArr = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>, 0, Eigen::InnerStride<>>;

// Interior of a zero-bordered [c, h + 2*pad, w + 2*pad] buffer; the border is never written.
template <typename T>
void pad_into(const T* img, const ConvGeometry& g, T* padded) {
  const auto hp = g.hp(), wp = g.wp();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t y = 0; y < g.h; ++y) {
      std::copy_n(img + (ch * g.h + y) * g.w, g.w, padded + (ch * hp + y + g.pad) * wp + g.pad);
    }
  }
}

// cols[(ch*kh + ki)*kw + kj][oy*ow + ox] = padded[ch][oy*stride + ki][ox*stride + kj]
template <typename T>
void im2col(const T* padded, const ConvGeometry& g, T* cols) {
  const auto hp = g.hp(), wp = g.wp();
  const Eigen::Index st = static_cast<Eigen::Index>(g.stride);
  T* dst = cols;
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        for (std::size_t oy = 0; oy < g.oh; ++oy, dst += g.ow) {
          const T* src = padded + (ch * hp + oy * g.stride + ki) * wp + kj;
          if (g.stride == 1) {
            MutArr<T>(dst, g.ow) = ConstArr<T>(src, g.ow);
          } else {
            MutArr<T>(dst, g.ow) = StridedArr<T>(src, g.ow, Eigen::InnerStride<>(st));
          }
        }
      }
    }
  }
}

// Adjoint of im2col into a zero-initialised padded buffer.
template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* padded) {
  const auto hp = g.hp(), wp = g.wp();
  const Eigen::Index st = static_cast<Eigen::Index>(g.stride);
  const T* src = cols;
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        for (std::size_t oy = 0; oy < g.oh; ++oy, src += g.ow) {
          T* dst = padded + (ch * hp + oy * g.stride + ki) * wp + kj;
          if (g.stride == 1) {
            MutArr<T>(dst, g.ow) += ConstArr<T>(src, g.ow);
          } else {
            MutStridedArr<T>(dst, g.ow, Eigen::InnerStride<>(st)) += ConstArr<T>(src, g.ow);
          }
        }
      }
    }
  }
}

template <typename T>
void unpad_add(const T* padded, const ConvGeometry& g, T* img) {
  const auto hp = g.hp(), wp = g.wp();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t y = 0; y < g.h; ++y) {
      T* dst = img + (ch * g.h + y) * g.w;
      const T* src = padded + (ch * hp + y + g.pad) * wp + g.pad;
      for (std::size_t x = 0; x < g.w; ++x) dst[x] += src[x];
    }
  }
}

// Sum of f over n elements of a and b with a fixed lane layout, so the rounding does not depend on
// where the buffers happen to be aligned.
template <typename T, typename F>
double lane_sum(const T* a, const T* b, std::size_t n, F f) {
  constexpr std::size_t kLanes = 16;
  using Lanes = Eigen::Array<T, kLanes, 1>;
  using In = Eigen::Map<const Lanes>;
  Lanes acc = Lanes::Zero();
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) acc += f(In(a + i), In(b + i));
  double total = static_cast<double>(acc.sum());
  for (; i < n; ++i) total += static_cast<double>(f(a[i], b[i]));
  return total;
}

template <typename T>
struct ConvBuffers {
  const ConvGeometry& g;
  std::vector<T> padded, grad_padded, cols, wide_out;

  explicit ConvBuffers(const ConvGeometry& geom)
      : g(geom),
        padded(geom.c * geom.hp() * geom.wp() + geom.kw),
        cols(geom.patch() * geom.columns()),
        wide_out(geom.wide() ? geom.f * geom.columns() : 0) {}

  ConstMap<T> cols_map() const { return ConstMap<T>(cols.data(), g.patch(), g.columns()); }

  // Channel rows of a padded buffer shifted by one kernel tap: [c, columns] with the plane as row stride.
  using TapMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
  using MutTapMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
  std::size_t tap_offset(std::size_t t) const { return (t / g.kw) * g.wp() + t % g.kw; }
  TapMap tap(std::size_t t) const {
    return TapMap(padded.data() + tap_offset(t), g.c, g.columns(), Eigen::OuterStride<>(g.hp() * g.wp()));
  }
  MutTapMap grad_tap(std::size_t t) {
    return MutTapMap(grad_padded.data() + tap_offset(t), g.c, g.columns(), Eigen::OuterStride<>(g.hp() * g.wp()));
  }

  void gather(const T* img) {
    pad_into(img, g, padded.data());
    if (!g.wide()) {
      im2col(padded.data(), g, cols.data());
      return;
    }
    const auto n = g.columns();
    for (std::size_t ch = 0, r = 0; ch < g.c; ++ch) {
      for (std::size_t ki = 0; ki < g.kh; ++ki) {
        for (std::size_t kj = 0; kj < g.kw; ++kj, ++r) {
          std::copy_n(padded.data() + (ch * g.hp() + ki) * g.wp() + kj, n, cols.data() + r * n);
        }
      }
    }
  }

  // Adds the image-space adjoint of im2col cols into img.
  void scatter_add(T* img) {
    grad_padded.assign(padded.size(), T(0));
    col2im_add(cols.data(), g, grad_padded.data());
    unpad_add(grad_padded.data(), g, img);
  }
};

// taps[(ki*kw + kj)][o][ch] = k[o][ch][ki][kj]
template <typename T>
std::vector<RowMat<T>> kernel_taps(const T* k, const ConvGeometry& g) {
  const auto taps = g.kh * g.kw;
  std::vector<RowMat<T>> out(taps, RowMat<T>(g.f, g.c));
  for (std::size_t o = 0; o < g.f; ++o) {
    for (std::size_t ch = 0; ch < g.c; ++ch) {
      for (std::size_t t = 0; t < taps; ++t) out[t](o, ch) = k[(o * g.c + ch) * taps + t];
    }
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, std::size_t pad) {
  require_rank(input, 4, "conv2d");
  require_rank(kernel, 4, "conv2d");
  if (stride == 0) fail(Errc::invalid_argument, "conv2d: stride must be positive");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.f = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = stride;
  g.pad = pad;
  if (kernel.dim(1) != g.c) {
    fail(Errc::shape_mismatch, "conv2d: kernel " + shape_str(kernel.shape()) + " vs input " +
                                   shape_str(input.shape()));
  }
  if (g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw) {
    fail(Errc::shape_mismatch, "conv2d: kernel larger than padded input");
  }
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;

  const auto in_sz = g.c * g.h * g.w;
  const auto out_sz = g.f * g.pixels();
  std::vector<T> out(g.n * out_sz);
  ConvBuffers<T> buf(g);
  ConstMap<T> k(kernel.values().data(), g.f, g.patch());
  const auto taps = g.wide() && !g.pointwise() ? kernel_taps(kernel.values().data(), g) : std::vector<RowMat<T>>{};
  const T* x = input.values().data();
  for (std::size_t s = 0; s < g.n; ++s) {
    T* o = out.data() + s * out_sz;
    if (g.pointwise()) {
      MutMap<T>(o, g.f, g.pixels()).noalias() = k * ConstMap<T>(x + s * in_sz, g.patch(), g.pixels());
      continue;
    }
    if (!g.wide()) {
      buf.gather(x + s * in_sz);
      MutMap<T>(o, g.f, g.pixels()).noalias() = k * buf.cols_map();
      continue;
    }
    pad_into(x + s * in_sz, g, buf.padded.data());
    MutMap<T> wide(buf.wide_out.data(), g.f, g.columns());
    wide.noalias() = taps[0] * buf.tap(0);
    for (std::size_t t = 1; t < taps.size(); ++t) wide.noalias() += taps[t] * buf.tap(t);
    for (std::size_t r = 0; r < g.f * g.oh; ++r) {
      std::copy_n(buf.wide_out.data() + r * g.wp(), g.ow, o + r * g.ow);
    }
  }

  return Tensor<T>::record(
      {g.n, g.f, g.oh, g.ow}, std::move(out), {input, kernel}, "conv2d",
      [input, kernel, g, in_sz, out_sz](std::span<const T> dy, GradSink<T>& sink) {
        const bool want_x = sink.wants(0);
        const bool want_k = sink.wants(1);
        ConstMap<T> k(kernel.values().data(), g.f, g.patch());
        const T* x = input.values().data();
        ConvBuffers<T> buf(g);
        const auto taps =
            want_x && g.wide() && !g.pointwise() ? kernel_taps(kernel.values().data(), g) : std::vector<RowMat<T>>{};
        T* dx = want_x ? sink.grad(0).data() : nullptr;
        T* dk = want_k ? sink.grad(1).data() : nullptr;
        for (std::size_t s = 0; s < g.n; ++s) {
          const T* d = dy.data() + s * out_sz;
          if (g.pointwise()) {
            ConstMap<T> dout(d, g.f, g.pixels());
            if (want_k) {
              MutMap<T>(dk, g.f, g.patch()).noalias() +=
                  dout * ConstMap<T>(x + s * in_sz, g.patch(), g.pixels()).transpose();
            }
            if (want_x) MutMap<T>(dx + s * in_sz, g.patch(), g.pixels()).noalias() += k.transpose() * dout;
            continue;
          }
          if (g.wide()) {
            // Junk columns of wide_out stay zero, so they contribute nothing below.
            for (std::size_t r = 0; r < g.f * g.oh; ++r) {
              std::copy_n(d + r * g.ow, g.ow, buf.wide_out.data() + r * g.wp());
            }
            d = buf.wide_out.data();
          }
          ConstMap<T> dout(d, g.f, g.columns());
          if (want_k) {
            buf.gather(x + s * in_sz);
            MutMap<T>(dk, g.f, g.patch()).noalias() += dout * buf.cols_map().transpose();
          }
          if (want_x && g.wide()) {
            buf.grad_padded.assign(buf.padded.size(), T(0));
            for (std::size_t t = 0; t < taps.size(); ++t) buf.grad_tap(t).noalias() += taps[t].transpose() * dout;
            unpad_add(buf.grad_padded.data(), g, dx + s * in_sz);
          } else if (want_x) {
            MutMap<T>(buf.cols.data(), g.patch(), g.columns()).noalias() = k.transpose() * dout;
            buf.scatter_add(dx + s * in_sz);
          }
        }
      });
}

// --- layer helpers ----------------------------------------------------------

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require_rank(x, 2, "add_bias");
  require_rank(bias, 1, "add_bias");
  const std::size_t n = x.dim(0), f = x.dim(1);
  if (bias.dim(0) != f) fail(Errc::shape_mismatch, "add_bias: bias length differs from row width");
  auto xv = x.values();
  auto bv = bias.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < f; ++j) out[i * f + j] = xv[i * f + j] + bv[j];
  }
  return Tensor<T>::record(x.shape(), std::move(out), {x, bias}, "add_bias",
                           [n, f](std::span<const T> dy, GradSink<T>& sink) {
                             if (sink.wants(0)) {
                               auto d = sink.grad(0);
                               for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
                             }
                             if (sink.wants(1)) {
                               auto d = sink.grad(1);
                               for (std::size_t i = 0; i < n; ++i) {
                                 for (std::size_t j = 0; j < f; ++j) d[j] += dy[i * f + j];
                               }
                             }
                           });
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x) {
  if (x.rank() == 0) fail(Errc::shape_mismatch, "l2_normalize: rank-0 input");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  auto xv = x.values();
  std::vector<T> out(xv.size());
  auto norms = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += xv[r * d + j] * xv[r * d + j];
    const T norm = std::sqrt(ss);
    if (!(norm > T(1e-12))) {
      fail(Errc::domain_error, "l2_normalize: row " + std::to_string(r) + " has (near-)zero norm");
    }
    (*norms)[r] = norm;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] / norm;
  }
  auto y = std::make_shared<std::vector<T>>(out);
  return Tensor<T>::record(x.shape(), std::move(out), {x}, "l2_normalize",
                           [rows, d, norms, y](std::span<const T> dy, GradSink<T>& sink) {
                             auto dx = sink.grad(0);
                             for (std::size_t r = 0; r < rows; ++r) {
                               const T* yr = y->data() + r * d;
                               const T* gr = dy.data() + r * d;
                               T dot = 0;
                               for (std::size_t j = 0; j < d; ++j) dot += yr[j] * gr[j];
                               const T inv = T(1) / (*norms)[r];
                               for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += (gr[j] - yr[j] * dot) * inv;
                             }
                           });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  require_rank(x, 2, "log_softmax");
  const std::size_t n = x.dim(0), c = x.dim(1);
  auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = xv.data() + i * c;
    const T m = *std::max_element(row, row + c);
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - m);
    const T lse = m + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
  }
  auto y = std::make_shared<std::vector<T>>(out);
  return Tensor<T>::record(x.shape(), std::move(out), {x}, "log_softmax",
                           [n, c, y](std::span<const T> dy, GradSink<T>& sink) {
                             auto dx = sink.grad(0);
                             for (std::size_t i = 0; i < n; ++i) {
                               T total = 0;
                               for (std::size_t j = 0; j < c; ++j) total += dy[i * c + j];
                               for (std::size_t j = 0; j < c; ++j) {
                                 dx[i * c + j] += dy[i * c + j] - std::exp((*y)[i * c + j]) * total;
                               }
                             }
                           });
}

template <typename T>
Tensor<T> pick(const Tensor<T>& x, std::span<const std::size_t> index) {
  require_rank(x, 2, "pick");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (index.size() != n) fail(Errc::shape_mismatch, "pick: one index per row required");
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<T> out(n);
  auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i) {
    if (idx[i] >= c) fail(Errc::invalid_argument, "pick: column index out of range");
    out[i] = xv[i * c + idx[i]];
  }
  return Tensor<T>::record({n}, std::move(out), {x}, "pick",
                           [c, idx = std::move(idx)](std::span<const T> dy, GradSink<T>& sink) {
                             auto dx = sink.grad(0);
                             for (std::size_t i = 0; i < idx.size(); ++i) dx[i * c + idx[i]] += dy[i];
                           });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), px = x.dim(2) * x.dim(3);
  auto xv = x.values();
  std::vector<T> out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    T s = 0;
    for (std::size_t p = 0; p < px; ++p) s += xv[i * px + p];
    out[i] = s / static_cast<T>(px);
  }
  return Tensor<T>::record({n, c}, std::move(out), {x}, "global_avg_pool",
                           [n, c, px](std::span<const T> dy, GradSink<T>& sink) {
                             auto dx = sink.grad(0);
                             const T inv = T(1) / static_cast<T>(px);
                             for (std::size_t i = 0; i < n * c; ++i) {
                               const T g = dy[i] * inv;
                               for (std::size_t p = 0; p < px; ++p) dx[i * px + p] += g;
                             }
                           });
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, const BatchNormOptions& opt) {
  require_rank(x, 4, "batch_norm");
  const std::size_t n = x.dim(0), c = x.dim(1), px = x.dim(2) * x.dim(3);
  for (const Tensor<T>* t : {&gamma, &beta, static_cast<const Tensor<T>*>(&running_mean), static_cast<const Tensor<T>*>(&running_var)}) {
    if (t->rank() != 1 || t->dim(0) != c) {
      fail(Errc::shape_mismatch, "batch_norm: per-channel tensors must have shape [" + std::to_string(c) + "]");
    }
  }
  const std::size_t m = n * px;
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  // Per channel: mean and 1/sqrt(var + eps) used to normalise, kept for the backward pass.
  auto stats = std::make_shared<std::vector<T>>(2 * c);
  std::vector<T> out(xv.size());

  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu = 0, var;
    if (opt.use_batch_stats) {
      // Chan et al. pairwise combination of per-(sample, channel) block moments.
      double m2 = 0, count = 0;
      const double block = static_cast<double>(px);
      for (std::size_t i = 0; i < n; ++i) {
        const T* xb = xv.data() + (i * c + ch) * px;
        const double bm = lane_sum(xb, xb, px, [](const auto& v, const auto&) { return v; }) / block;
        const T bm_t = static_cast<T>(bm);
        const double bq = lane_sum(xb, xb, px, [bm_t](const auto& v, const auto&) { return (v - bm_t) * (v - bm_t); });
        const double delta = bm - mu;
        const double total = count + block;
        mu += delta * block / total;
        m2 += bq + delta * delta * count * block / total;
        count = total;
      }
      var = m2 / static_cast<double>(m);
      if (opt.update_running) {
        auto rm = running_mean.mutable_values();
        auto rv = running_var.mutable_values();
        const double unbiased = m > 1 ? m2 / static_cast<double>(m - 1) : var;
        rm[ch] = static_cast<T>((1.0 - opt.momentum) * rm[ch] + opt.momentum * mu);
        rv[ch] = static_cast<T>((1.0 - opt.momentum) * rv[ch] + opt.momentum * unbiased);
      }
    } else {
      mu = running_mean.values()[ch];
      var = running_var.values()[ch];
    }
    const double istd = 1.0 / std::sqrt(var + opt.eps);
    (*stats)[ch] = static_cast<T>(mu);
    (*stats)[c + ch] = static_cast<T>(istd);
    // out = (x - mu) * istd * gamma + beta = x * a + b0
    const double a = istd * static_cast<double>(gv[ch]);
    const T a_t = static_cast<T>(a), b0 = static_cast<T>(static_cast<double>(bv[ch]) - mu * a);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * px;
      MutArr<T>(out.data() + off, px) = ConstArr<T>(xv.data() + off, px) * a_t + b0;
    }
  }

  const bool batch_stats = opt.use_batch_stats;
  return Tensor<T>::record(
      x.shape(), std::move(out), {x, gamma, beta}, "batch_norm",
      [x, gamma, stats, n, c, px, m, batch_stats](std::span<const T> dy, GradSink<T>& sink) {
        auto gv = gamma.values();
        auto xv = x.values();
        T* dx = sink.wants(0) ? sink.grad(0).data() : nullptr;
        T* dg = sink.wants(1) ? sink.grad(1).data() : nullptr;
        T* db = sink.wants(2) ? sink.grad(2).data() : nullptr;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T mu = (*stats)[ch];
          const double istd = (*stats)[c + ch];
          double sum_dy = 0, sum_dy_xc = 0;
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t off = (i * c + ch) * px;
            sum_dy += lane_sum(dy.data() + off, dy.data() + off, px, [](const auto& d, const auto&) { return d; });
            sum_dy_xc += lane_sum(dy.data() + off, xv.data() + off, px,
                                  [mu](const auto& d, const auto& v) { return d * (v - mu); });
          }
          const double sum_dy_xhat = sum_dy_xc * istd;
          if (dg) dg[ch] += static_cast<T>(sum_dy_xhat);
          if (db) db[ch] += static_cast<T>(sum_dy);
          if (!dx) continue;
          const double scale = static_cast<double>(gv[ch]) * istd;
          const double md = static_cast<double>(m);
          // batch stats: dx = scale * (dy - mean(dy) - xhat * mean(dy * xhat))
          const T a = static_cast<T>(scale);
          const T shift = batch_stats ? static_cast<T>(scale * sum_dy / md) : T(0);
          const T slope = batch_stats ? static_cast<T>(scale * sum_dy_xhat / md * istd) : T(0);
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t off = (i * c + ch) * px;
            MutArr<T>(dx + off, px) +=
                ConstArr<T>(dy.data() + off, px) * a - shift - (ConstArr<T>(xv.data() + off, px) - mu) * slope;
          }
        }
      });
}

// --- instantiation ----------------------------------------------------------

#define FEWSHOT_INSTANTIATE(T)                                                                    \
  template class GradSink<T>;                                                                     \
  template class Tensor<T>;                                                                       \
  template void backward<T>(const Tensor<T>&);                                                    \
  template Tensor<T> unary<T>(UnaryOp, const Tensor<T>&);                                         \
  template Tensor<T> binary<T>(BinaryOp, const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> scalar_mul<T>(const Tensor<T>&, T);                                          \
  template Tensor<T> reduce<T>(ReduceOp, const Tensor<T>&, std::optional<std::size_t>);           \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                              \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                         \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);     \
  template Tensor<T> add_bias<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> l2_normalize<T>(const Tensor<T>&);                                           \
  template Tensor<T> log_softmax<T>(const Tensor<T>&);                                            \
  template Tensor<T> pick<T>(const Tensor<T>&, std::span<const std::size_t>);                     \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                        \
  template Tensor<T> batch_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                   Tensor<T>&, Tensor<T>&, const BatchNormOptions&);

FEWSHOT_INSTANTIATE(float)
FEWSHOT_INSTANTIATE(double)

#undef FEWSHOT_INSTANTIATE

}  // namespace fewshot
