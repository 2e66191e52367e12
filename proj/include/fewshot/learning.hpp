#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fewshot/model.hpp"
#include "fewshot/tensor.hpp"

namespace fewshot {

enum class Reduction { mean, sum };

/// temperature 1, mean reduction, asymmetric: the plain InfoNCE form with
/// cosine similarity between the two views' features.
struct ContrastiveConfig {
  double temperature = 1.0;
  Reduction reduction = Reduction::mean;
  bool symmetric = false;

  void validate() const;
};

/// sim(a, b) = a.b / (|a| |b|) for two vectors of equal length; shape {1}.
template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b);

/// Row i of z1 and row i of z2 are the positive pair; every z2 row j is a
/// candidate for z1 row i:
///   L_i = -log( exp(s_ii / t) / sum_j exp(s_ij / t) ),  s = cos(z1_i, z2_j).
/// Evaluated as a max-subtracted log-softmax over each similarity row.
template <typename T>
Tensor<T> info_nce_loss(const Tensor<T>& z1, const Tensor<T>& z2, const ContrastiveConfig& config);

/// -log softmax(logits)[label], reduced over rows (mean by default).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels, Reduction reduction = Reduction::mean);

// --- Adam -------------------------------------------------------------------

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamMoments {
  std::vector<T> m;
  std::vector<T> v;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  /// Keyed by parameter name; only parameters that were trainable at some
  /// step own moments.
  std::map<std::string, AdamMoments<T>> moments;
};

/// One bias-corrected Adam update of every trainable parameter from its
/// .grad(). Frozen parameters are skipped entirely. Throws if a trainable
/// parameter carries no gradient.
template <typename T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state);

// --- early stopping ---------------------------------------------------------

struct EarlyStopConfig {
  int patience = 10;
  double min_delta = 1e-4;
};

enum class StopDecision { proceed, stop };

/// Tracks a lower-is-better metric. An epoch improves when
/// metric < best - min_delta; training stops once the count of epochs
/// without improvement exceeds patience.
struct EarlyStopState {
  EarlyStopConfig config;
  double best = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  int epochs_since_improve = 0;
  int epochs_seen = 0;
  bool improved_last = false;

  StopDecision update(double metric);
};

}  // namespace fewshot
