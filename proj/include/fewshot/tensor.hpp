#pragma once

// Dense row-major tensors with a define-by-run reverse-mode tape.
//
// Every primitive returns a new Tensor. When at least one operand requires a
// gradient, the result records its operands and a backward rule; the recorded
// nodes form the tape that backward() replays in reverse topological order.
// A tape is consumed by backward(); replaying it again is an error.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fewshot/error.hpp"

namespace fewshot {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Toggles the NaN/Inf check run at every primitive boundary (on by default).
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

template <typename T>
class Tensor;

namespace detail {
template <typename T>
struct Node;
}

/// Handed to a backward rule; exposes zero-initialised gradient buffers of
/// the operands that require a gradient.
template <typename T>
class GradSink {
 public:
  explicit GradSink(std::vector<std::shared_ptr<detail::Node<T>>>& inputs) : inputs_(inputs) {}
  bool wants(std::size_t i) const;
  std::span<T> grad(std::size_t i);

 private:
  std::vector<std::shared_ptr<detail::Node<T>>>& inputs_;
};

template <typename T>
using BackwardFn = std::function<void(std::span<const T> out_grad, GradSink<T>& sink)>;

namespace detail {
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool has_grad = false;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn<T> backward;
};
}  // namespace detail

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  /// Copies `values` into a new leaf. Fails on length mismatch or non-finite
  /// input.
  static Tensor from(Shape shape, std::vector<T> values);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t dim(std::size_t axis) const;

  std::span<const T> values() const;
  /// Write access for leaves only (parameters, buffers, inputs).
  std::span<T> mutable_values();
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const T> grad() const;
  void set_grad(std::vector<T> grad);
  void clear_grad();

  /// New leaf holding a copy of the values; no history.
  Tensor detach() const;
  bool same(const Tensor& other) const noexcept { return node_ == other.node_; }
  const char* op_name() const;

  /// Builds a result node. Used by every primitive and available for custom
  /// operators; `backward` is dropped when no input requires a gradient.
  static Tensor record(Shape shape, std::vector<T> values, std::vector<Tensor> inputs,
                       const char* op, BackwardFn<T> backward);

 private:
  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}
  detail::Node<T>& node() const;

  std::shared_ptr<detail::Node<T>> node_;

  template <typename U>
  friend void backward(const Tensor<U>& loss);
};

/// Populates .grad() on every requires_grad leaf reachable from `loss`.
/// Leaf gradients are overwritten, never accumulated across calls; the tape
/// is released afterwards so a second call on the same graph throws.
template <typename T>
void backward(const Tensor<T>& loss);

// --- elementwise ----------------------------------------------------------

enum class UnaryOp { relu, exp, log };
enum class BinaryOp { add, sub, mul };

template <typename T>
Tensor<T> unary(UnaryOp op, const Tensor<T>& x);
template <typename T>
Tensor<T> binary(BinaryOp op, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> relu(const Tensor<T>& x) { return unary(UnaryOp::relu, x); }
template <typename T>
Tensor<T> exp(const Tensor<T>& x) { return unary(UnaryOp::exp, x); }
template <typename T>
Tensor<T> log(const Tensor<T>& x) { return unary(UnaryOp::log, x); }
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return binary(BinaryOp::add, a, b); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return binary(BinaryOp::sub, a, b); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return binary(BinaryOp::mul, a, b); }

/// The only broadcasting primitive: tensor times a constant.
template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& x, T factor);

// --- reductions -----------------------------------------------------------

enum class ReduceOp { sum, mean, max };

/// Full reduction yields shape {1}; an axis reduction drops that axis.
/// max routes its gradient to the first maximal element.
template <typename T>
Tensor<T> reduce(ReduceOp op, const Tensor<T>& x, std::optional<std::size_t> axis = std::nullopt);

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::optional<std::size_t> axis = std::nullopt) {
  return reduce(ReduceOp::sum, x, axis);
}
template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::optional<std::size_t> axis = std::nullopt) {
  return reduce(ReduceOp::mean, x, axis);
}
template <typename T>
Tensor<T> max(const Tensor<T>& x, std::optional<std::size_t> axis = std::nullopt) {
  return reduce(ReduceOp::max, x, axis);
}

// --- linear algebra and layers ---------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> transpose(const Tensor<T>& a);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Cross-correlation, no kernel flip. input [N,C,H,W], kernel [F,C,kh,kw].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride,
                 std::size_t pad);

/// x [N,F] plus b [F] added to every row.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

/// Unit L2 norm along the last axis; rows with norm <= 1e-12 are an error.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x);

/// Row-wise log-softmax of a [N,C] matrix, max-subtracted.
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x);

/// out[i] = x[i, index[i]] for x [N,C].
template <typename T>
Tensor<T> pick(const Tensor<T>& x, std::span<const std::size_t> index);

/// [N,C,H,W] -> [N,C].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

struct BatchNormOptions {
  bool use_batch_stats = true;  // false: normalise with the running statistics
  bool update_running = true;   // only meaningful with batch statistics
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel normalisation of [N,C,H,W]. With batch statistics the running
/// buffers are updated in place (unbiased variance), as a side effect.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var,
                     const BatchNormOptions& options);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace fewshot
