#include "fewshot/learning.hpp"

#include <cmath>

namespace fewshot {

void ContrastiveConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw Error(Errc::config, "contrastive temperature must be positive");
  }
}

template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 1 || a.shape() != b.shape()) {
    throw Error(Errc::shape_mismatch, "cosine_similarity: expects two vectors of equal length, got " +
                                          shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const Shape row{1, a.numel()};
  auto na = l2_normalize(reshape(a, row));
  auto nb = l2_normalize(reshape(b, row));
  return sum(mul(na, nb));
}

namespace {

template <typename T>
Tensor<T> reduce_rows(const Tensor<T>& per_row, Reduction reduction) {
  return reduction == Reduction::mean ? mean(per_row) : sum(per_row);
}

template <typename T>
Tensor<T> one_direction(const Tensor<T>& a, const Tensor<T>& b, const ContrastiveConfig& config) {
  const std::size_t n = a.dim(0);
  auto sim = matmul(a, transpose(b));
  auto logits = scalar_mul(sim, static_cast<T>(1.0 / config.temperature));
  std::vector<std::size_t> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = i;
  auto picked = pick(log_softmax(logits), diag);
  return scalar_mul(reduce_rows(picked, config.reduction), T(-1));
}

}  // namespace

template <typename T>
Tensor<T> info_nce_loss(const Tensor<T>& z1, const Tensor<T>& z2, const ContrastiveConfig& config) {
  config.validate();
  if (z1.rank() != 2 || z1.shape() != z2.shape()) {
    throw Error(Errc::shape_mismatch, "info_nce_loss: views must be [N,D] of equal shape, got " +
                                          shape_str(z1.shape()) + " and " + shape_str(z2.shape()));
  }
  auto a = l2_normalize(z1);
  auto b = l2_normalize(z2);
  auto loss = one_direction(a, b, config);
  if (config.symmetric) {
    loss = scalar_mul(add(loss, one_direction(b, a, config)), T(0.5));
  }
  return loss;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels, Reduction reduction) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw Error(Errc::shape_mismatch, "cross_entropy: logits " + shape_str(logits.shape()) + " with " +
                                          std::to_string(labels.size()) + " labels");
  }
  const auto classes = logits.dim(1);
  std::vector<std::size_t> index(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw Error(Errc::label_out_of_range, "cross_entropy: label " + std::to_string(labels[i]) +
                                                " outside [0, " + std::to_string(classes) + ")");
    }
    index[i] = static_cast<std::size_t>(labels[i]);
  }
  auto picked = pick(log_softmax(logits), index);
  return scalar_mul(reduce_rows(picked, reduction), T(-1));
}

template <typename T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state) {
  const auto& c = state.config;
  for (auto& e : params) {
    if (e.trainable && !e.tensor.has_grad()) {
      throw Error(Errc::autograd, "adam_step: trainable parameter '" + e.name + "' has no gradient");
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correct1 = 1.0 - std::pow(c.beta1, t);
  const double correct2 = 1.0 - std::pow(c.beta2, t);
  for (auto& e : params) {
    if (!e.trainable) continue;
    auto grad = e.tensor.grad();
    auto theta = e.tensor.mutable_values();
    auto& mom = state.moments[e.name];
    if (mom.m.size() != theta.size()) {
      mom.m.assign(theta.size(), T(0));
      mom.v.assign(theta.size(), T(0));
    }
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g = grad[i];
      const double m = c.beta1 * mom.m[i] + (1.0 - c.beta1) * g;
      const double v = c.beta2 * mom.v[i] + (1.0 - c.beta2) * g * g;
      mom.m[i] = static_cast<T>(m);
      mom.v[i] = static_cast<T>(v);
      const double m_hat = m / correct1;
      const double v_hat = v / correct2;
      theta[i] = static_cast<T>(theta[i] - c.lr * m_hat / (std::sqrt(v_hat) + c.eps));
    }
  }
}

StopDecision EarlyStopState::update(double metric) {
  if (!std::isfinite(metric)) {
    throw Error(Errc::non_finite, "early stopping: monitored metric is not finite");
  }
  const int epoch = epochs_seen++;
  if (metric < best - config.min_delta) {
    best = metric;
    best_epoch = epoch;
    epochs_since_improve = 0;
    improved_last = true;
    return StopDecision::proceed;
  }
  improved_last = false;
  ++epochs_since_improve;
  return epochs_since_improve > config.patience ? StopDecision::stop : StopDecision::proceed;
}

#define FEWSHOT_INSTANTIATE(T)                                                                   \
  template Tensor<T> cosine_similarity<T>(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> info_nce_loss<T>(const Tensor<T>&, const Tensor<T>&, const ContrastiveConfig&); \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, std::span<const int>, Reduction);        \
  template void adam_step<T>(ParameterSet<T>&, AdamState<T>&);

FEWSHOT_INSTANTIATE(float)
FEWSHOT_INSTANTIATE(double)

#undef FEWSHOT_INSTANTIATE

}  // namespace fewshot
