#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fewshot/data.hpp"
#include "fewshot/error.hpp"
#include "fewshot/learning.hpp"
#include "fewshot/metrics.hpp"
#include "fewshot/model.hpp"

namespace fewshot {

struct PretrainConfig {
  int epochs = 200;
  int batch_size = 64;
  AugConfig aug;
  ContrastiveConfig contrastive;
  AdamConfig adam;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class Monitor { val_loss, val_accuracy, val_f1 };

const char* monitor_name(Monitor m);
Monitor parse_monitor(const std::string& text);

struct FinetuneConfig {
  int epochs = 100;
  int batch_size = 32;
  /// Stages 1..boundary plus the stem are frozen; -1 means num_stages - 1.
  int freeze_boundary = -1;
  AdamConfig adam;
  EarlyStopConfig early_stop;
  Monitor monitor = Monitor::val_loss;
  double val_fraction = 0.2;
  F1Average f1_average = F1Average::macro;
  int eval_batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::optional<double> accuracy;
  std::optional<double> f1;
  double seconds = 0.0;
  bool restored_best = false;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Thrown when a training step produces a non-finite value. what() carries
/// the diagnostic dump (epoch, batch, last finite loss, gradient norms).
class DivergenceError : public Error {
 public:
  DivergenceError(std::string dump, const std::string& cause);
  const std::string& dump() const { return dump_; }

 private:
  std::string dump_;
};

/// Contrastive pretraining. The model needs a projection or identity head.
/// Batches of a single image carry no negatives and are skipped. When
/// `optimizer` is given it is used as the Adam state and holds the final
/// moments afterwards.
std::vector<EpochRecord> pretrain(Model<float>& model, const UnlabeledImages& images, const PretrainConfig& config,
                                  const EpochCallback& on_epoch = {}, AdamState<float>* optimizer = nullptr);

struct FinetuneResult {
  std::vector<EpochRecord> records;
  int best_epoch = -1;
  bool early_stopped = false;
  FreezeCounts freeze;
};

/// Holds out a stratified validation subset of `train`, freezes the prefix
/// and trains the classifier with cross-entropy. The parameters of the best
/// validation epoch are restored before returning, whether or not training
/// stopped early.
FinetuneResult finetune(Model<float>& model, const Dataset& train, const FinetuneConfig& config,
                        const std::function<void(const EpochRecord&, const Model<float>&)>& on_epoch = {},
                        AdamState<float>* optimizer = nullptr);

struct EvalResult {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  /// F1 under the requested averaging (equal to macro_f1 by default).
  double f1 = 0.0;
  double loss = 0.0;
  ConfusionMatrix confusion{1};
  std::vector<int> predictions;
};

/// Eval-mode forward in fixed batches; argmax ties go to the lowest class id.
/// The model's mode is restored afterwards.
EvalResult evaluate(Model<float>& model, const Dataset& dataset, int batch_size = 64,
                    F1Average average = F1Average::macro);

struct GradCheckOptions {
  double eps = 1e-5;
  /// 0 checks every trainable coordinate; otherwise a seeded subsample of
  /// this many coordinates (all of them when fewer exist).
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
};

using LossBuilder = std::function<Tensor<double>(Model<double>&)>;

/// Central finite differences against the analytic gradient, per coordinate
/// relative error |a - n| / max(|a|, |n|, 1e-8). Parameters and buffers are
/// restored afterwards.
GradCheckResult grad_check(Model<double>& model, const LossBuilder& loss, const GradCheckOptions& options = {});

/// Same check over an explicit list of leaf tensors.
GradCheckResult grad_check(std::vector<Tensor<double>> leaves, const std::function<Tensor<double>()>& loss,
                           const GradCheckOptions& options = {});

// --- ablation ---------------------------------------------------------------

struct AblationConfig {
  BackboneConfig backbone;
  /// Projection head width; 0 selects the identity head.
  int proj_dim = 64;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  SplitSpec split;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  int eval_batch_size = 64;

  void validate() const;
};

struct AblationRun {
  std::string arm;  // "pretrained" or "scratch"
  std::uint64_t seed = 0;
  std::uint64_t split_fingerprint = 0;
  double accuracy = 0.0;
  double f1 = 0.0;
  int finetune_epochs = 0;
  int best_epoch = -1;
  std::vector<EpochRecord> pretrain_records;
  std::vector<EpochRecord> finetune_records;
};

struct ArmSummary {
  std::string arm;
  double acc_mean = 0.0, acc_sd = 0.0;
  double f1_mean = 0.0, f1_sd = 0.0;
};

struct AblationReport {
  std::vector<AblationRun> runs;
  ArmSummary pretrained;
  ArmSummary scratch;
  bool splits_identical = false;
  double acc_difference = 0.0;  // pretrained minus scratch
  double f1_difference = 0.0;
};

struct AblationHooks {
  std::function<void(const std::string& arm, std::uint64_t seed, const char* phase, const EpochRecord&)> on_epoch;
};

/// Both arms per seed share the architecture, split, fine-tune budget and
/// initial weights of every parameter that exists in both; the scratch arm
/// skips pretraining. `pool` supplies the pretraining images; when null the
/// train split's images are used with labels stripped.
AblationReport run_ablation(const Dataset& dataset, const UnlabeledImages* pool, const AblationConfig& config,
                            const AblationHooks& hooks = {});

/// FNV-1a over the origin indices of both halves of a split.
std::uint64_t split_fingerprint(const Dataset& train, const Dataset& test);

/// Sample mean and (n-1) standard deviation.
std::pair<double, double> mean_sd(const std::vector<double>& values);

}  // namespace fewshot
