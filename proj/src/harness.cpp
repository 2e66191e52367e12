#include "fewshot/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace fewshot {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void check_adam(const AdamConfig& a, const char* who) {
  auto bad = [&](const char* what) { throw Error(Errc::config, std::string(who) + ": " + what); };
  if (!(a.lr > 0.0) || !std::isfinite(a.lr)) bad("learning rate must be positive");
  if (!(a.beta1 >= 0.0 && a.beta1 < 1.0)) bad("beta1 must lie in [0, 1)");
  if (!(a.beta2 >= 0.0 && a.beta2 < 1.0)) bad("beta2 must lie in [0, 1)");
  if (!(a.eps > 0.0)) bad("eps must be positive");
}

Tensor<float> image_batch(const std::vector<const Image*>& images) {
  const Image& first = *images.front();
  auto pixels = pack_images(images);
  return make_batch<float>(pixels, images.size(), first.channels, first.height, first.width);
}

void require_input_shape(const BackboneConfig& cfg, const Image& img, const char* who) {
  if (img.channels != static_cast<std::size_t>(cfg.input_channels) ||
      img.height != static_cast<std::size_t>(cfg.input_size) || img.width != static_cast<std::size_t>(cfg.input_size)) {
    throw Error(Errc::incompatible, std::string(who) + ": images are " + std::to_string(img.channels) + "x" +
                                        std::to_string(img.height) + "x" + std::to_string(img.width) +
                                        " but the model expects " + std::to_string(cfg.input_channels) + "x" +
                                        std::to_string(cfg.input_size) + "x" + std::to_string(cfg.input_size));
  }
}

std::string grad_norm_dump(const ParameterSet<float>& params) {
  std::ostringstream os;
  for (const auto& e : params) {
    if (!e.trainable) continue;
    os << "grad_norm " << e.name << " ";
    if (!e.tensor.has_grad()) {
      os << "none\n";
      continue;
    }
    double s = 0.0;
    for (float g : e.tensor.grad()) s += static_cast<double>(g) * g;
    os << std::sqrt(s) << "\n";
  }
  return os.str();
}

[[noreturn]] void diverged(const char* phase, int epoch, std::size_t batch, double last_loss,
                           const ParameterSet<float>& params, const Error& cause) {
  std::ostringstream os;
  os.precision(17);
  os << "phase " << phase << "\nepoch " << epoch << "\nbatch " << batch << "\nlast_finite_loss " << last_loss
     << "\ncause " << cause.what() << "\n"
     << grad_norm_dump(params);
  throw DivergenceError(os.str(), cause.what());
}

}  // namespace

DivergenceError::DivergenceError(std::string dump, const std::string& cause)
    : Error(Errc::non_finite, "training diverged: " + cause), dump_(std::move(dump)) {}

void PretrainConfig::validate() const {
  if (epochs <= 0) throw Error(Errc::config, "pretrain: epochs must be positive");
  if (batch_size <= 0) throw Error(Errc::config, "pretrain: batch_size must be positive");
  aug.validate();
  contrastive.validate();
  check_adam(adam, "pretrain");
}

const char* monitor_name(Monitor m) {
  switch (m) {
    case Monitor::val_loss: return "val_loss";
    case Monitor::val_accuracy: return "val_accuracy";
    case Monitor::val_f1: return "val_f1";
  }
  return "?";
}

Monitor parse_monitor(const std::string& text) {
  if (text == "val_loss") return Monitor::val_loss;
  if (text == "val_accuracy") return Monitor::val_accuracy;
  if (text == "val_f1") return Monitor::val_f1;
  throw Error(Errc::config, "unknown monitor '" + text + "' (val_loss, val_accuracy, val_f1)");
}

void FinetuneConfig::validate() const {
  if (epochs <= 0) throw Error(Errc::config, "finetune: epochs must be positive");
  if (batch_size <= 0) throw Error(Errc::config, "finetune: batch_size must be positive");
  if (eval_batch_size <= 0) throw Error(Errc::config, "finetune: eval_batch_size must be positive");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw Error(Errc::config, "finetune: validation fraction must lie in (0, 1)");
  }
  if (early_stop.patience < 0) throw Error(Errc::config, "finetune: patience must be nonnegative");
  if (!(early_stop.min_delta >= 0.0)) throw Error(Errc::config, "finetune: min_delta must be nonnegative");
  check_adam(adam, "finetune");
}

// --- pretraining --------------------------------------------------------------

std::vector<EpochRecord> pretrain(Model<float>& model, const UnlabeledImages& images, const PretrainConfig& config,
                                  const EpochCallback& on_epoch, AdamState<float>* optimizer) {
  config.validate();
  if (images.size() < 2) throw Error(Errc::invalid_argument, "pretrain: at least two images are required");
  if (model.head_kind() != HeadKind::projection && model.head_kind() != HeadKind::identity) {
    throw Error(Errc::invalid_argument, "pretrain: model needs a projection or identity head");
  }
  const auto& bb = model.config();
  if (config.aug.out_size != bb.input_size) {
    throw Error(Errc::config, "pretrain: augmentation output size " + std::to_string(config.aug.out_size) +
                                  " differs from the model input size " + std::to_string(bb.input_size));
  }
  if (images.images.front().channels != static_cast<std::size_t>(bb.input_channels)) {
    throw Error(Errc::incompatible, "pretrain: image channel count does not match the model");
  }

  model.set_mode(Mode::train);
  auto& params = model.params();
  AdamState<float> local{config.adam, 0, {}};
  AdamState<float>& adam = optimizer ? *optimizer : local;
  if (optimizer) adam.config = config.adam;
  std::vector<EpochRecord> records;
  double last_loss = 0.0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = Clock::now();
    const auto order = batches(images.size(), static_cast<std::size_t>(config.batch_size), config.seed,
                               static_cast<std::uint64_t>(epoch));
    double loss_total = 0.0;
    std::size_t counted = 0;
    for (std::size_t b = 0; b < order.size(); ++b) {
      const auto& batch = order[b];
      if (batch.size() < 2) continue;
      std::vector<Image> first, second;
      first.reserve(batch.size());
      second.reserve(batch.size());
      for (auto idx : batch) {
        auto views = make_views(images.images[idx], config.aug, view_stream(config.seed, epoch, idx), idx);
        first.push_back(std::move(views.view1));
        second.push_back(std::move(views.view2));
      }
      std::vector<const Image*> p1, p2;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        p1.push_back(&first[i]);
        p2.push_back(&second[i]);
      }
      try {
        auto z1 = model.forward_contrastive(image_batch(p1));
        auto z2 = model.forward_contrastive(image_batch(p2));
        auto loss = info_nce_loss(z1, z2, config.contrastive);
        params.clear_grads();
        backward(loss);
        for (const auto& e : params) {
          if (!e.trainable || !e.tensor.has_grad()) continue;
          for (float g : e.tensor.grad()) {
            if (!std::isfinite(g)) throw Error(Errc::non_finite, "non-finite gradient in " + e.name);
          }
        }
        adam_step(params, adam);
        const double value = loss.item();
        last_loss = value;
        loss_total += config.contrastive.reduction == Reduction::mean ? value * static_cast<double>(batch.size())
                                                                      : value;
        counted += batch.size();
      } catch (const Error& err) {
        if (err.code() != Errc::non_finite) throw;
        diverged("pretrain", epoch, b, last_loss, params, err);
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = counted ? loss_total / static_cast<double>(counted) : 0.0;
    rec.seconds = seconds_since(t0);
    records.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return records;
}

// --- evaluation ---------------------------------------------------------------

EvalResult evaluate(Model<float>& model, const Dataset& dataset, int batch_size, F1Average average) {
  if (model.head_kind() != HeadKind::classifier) {
    throw Error(Errc::invalid_argument, "evaluate: model has no classifier head");
  }
  if (model.head_dim() != dataset.num_classes) {
    throw Error(Errc::incompatible, "evaluate: classifier has " + std::to_string(model.head_dim()) +
                                        " outputs but the dataset has " + std::to_string(dataset.num_classes) +
                                        " classes");
  }
  if (batch_size <= 0) throw Error(Errc::invalid_argument, "evaluate: batch size must be positive");
  if (dataset.size() == 0) throw Error(Errc::invalid_argument, "evaluate: empty dataset");
  require_input_shape(model.config(), dataset.images.front(), "evaluate");

  const Mode previous = model.mode();
  model.set_mode(Mode::eval);
  NoGradGuard no_grad;
  EvalResult result;
  result.confusion = ConfusionMatrix(static_cast<std::size_t>(dataset.num_classes));
  result.predictions.resize(dataset.size());
  double loss_sum = 0.0;
  const auto bs = static_cast<std::size_t>(batch_size);
  try {
    for (std::size_t start = 0; start < dataset.size(); start += bs) {
      const std::size_t end = std::min(dataset.size(), start + bs);
      std::vector<const Image*> imgs;
      for (std::size_t i = start; i < end; ++i) imgs.push_back(&dataset.images[i]);
      auto logits = model.forward_logits(image_batch(imgs));
      std::span<const int> labels(dataset.labels.data() + start, end - start);
      // per-sample losses summed in sample order keep the total independent of batching
      auto per_row = scalar_mul(pick(log_softmax(logits), std::vector<std::size_t>(labels.begin(), labels.end())),
                                -1.0f);
      const auto classes = static_cast<std::size_t>(dataset.num_classes);
      const auto values = logits.values();
      for (std::size_t r = 0; r < end - start; ++r) {
        const auto pred = static_cast<int>(argmax(values.subspan(r * classes, classes)));
        result.predictions[start + r] = pred;
        result.confusion.add(labels[r], pred);
        loss_sum += per_row.values()[r];
      }
    }
  } catch (...) {
    model.set_mode(previous);
    throw;
  }
  model.set_mode(previous);
  result.loss = loss_sum / static_cast<double>(dataset.size());
  result.accuracy = accuracy(result.confusion);
  result.macro_f1 = macro_f1(result.confusion);
  result.f1 = f1_score(result.confusion, average);
  return result;
}

// --- fine-tuning --------------------------------------------------------------

FinetuneResult finetune(Model<float>& model, const Dataset& train, const FinetuneConfig& config,
                        const std::function<void(const EpochRecord&, const Model<float>&)>& on_epoch,
                        AdamState<float>* optimizer) {
  config.validate();
  if (model.head_kind() != HeadKind::classifier) {
    throw Error(Errc::invalid_argument, "finetune: attach a classifier before fine-tuning");
  }
  if (model.head_dim() != train.num_classes) {
    throw Error(Errc::incompatible, "finetune: classifier has " + std::to_string(model.head_dim()) +
                                        " outputs but the dataset has " + std::to_string(train.num_classes) +
                                        " classes");
  }
  train.validate();
  require_input_shape(model.config(), train.images.front(), "finetune");

  auto [fit, val] = split_validation(train, config.val_fraction, config.seed);
  if (fit.size() < static_cast<std::size_t>(config.batch_size)) {
    throw Error(Errc::invalid_argument, "finetune: " + std::to_string(fit.size()) +
                                            " training images after the validation holdout, fewer than batch size " +
                                            std::to_string(config.batch_size));
  }

  const int boundary = config.freeze_boundary < 0 ? model.num_stages() - 1 : config.freeze_boundary;
  FinetuneResult result;
  result.freeze = model.freeze_prefix(boundary);

  auto& params = model.params();
  AdamState<float> local{config.adam, 0, {}};
  AdamState<float>& adam = optimizer ? *optimizer : local;
  if (optimizer) adam.config = config.adam;
  EarlyStopState stopper{config.early_stop};
  auto best = params.snapshot();
  double last_loss = 0.0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = Clock::now();
    model.set_mode(Mode::train);
    const auto order = batches(fit.size(), static_cast<std::size_t>(config.batch_size), config.seed,
                               static_cast<std::uint64_t>(epoch));
    double loss_total = 0.0;
    for (std::size_t b = 0; b < order.size(); ++b) {
      const auto& batch = order[b];
      std::vector<const Image*> imgs;
      std::vector<int> labels;
      for (auto idx : batch) {
        imgs.push_back(&fit.images[idx]);
        labels.push_back(fit.labels[idx]);
      }
      try {
        auto logits = model.forward_logits(image_batch(imgs));
        auto loss = cross_entropy(logits, std::span<const int>(labels));
        params.clear_grads();
        backward(loss);
        adam_step(params, adam);
        last_loss = loss.item();
        loss_total += last_loss * static_cast<double>(batch.size());
      } catch (const Error& err) {
        if (err.code() != Errc::non_finite) throw;
        diverged("finetune", epoch, b, last_loss, params, err);
      }
    }

    const auto ev = evaluate(model, val, config.eval_batch_size, config.f1_average);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_total / static_cast<double>(fit.size());
    rec.val_loss = ev.loss;
    rec.accuracy = ev.accuracy;
    rec.f1 = ev.f1;

    double metric = ev.loss;
    if (config.monitor == Monitor::val_accuracy) metric = -ev.accuracy;
    if (config.monitor == Monitor::val_f1) metric = -ev.f1;
    const auto decision = stopper.update(metric);
    if (stopper.improved_last) {
      best = params.snapshot();
      result.best_epoch = epoch;
    }
    rec.seconds = seconds_since(t0);
    result.records.push_back(rec);
    if (on_epoch) on_epoch(rec, model);
    if (decision == StopDecision::stop) {
      result.early_stopped = true;
      break;
    }
  }

  if (result.best_epoch != result.records.back().epoch) {
    params.restore(best);
    result.records.back().restored_best = true;
  }
  params.clear_grads();
  model.set_mode(Mode::eval);
  return result;
}

// --- gradient check -----------------------------------------------------------

namespace {

GradCheckResult grad_check_core(std::vector<std::pair<std::string, Tensor<double>>>& leaves,
                                const std::function<Tensor<double>()>& loss, const std::function<void()>& reset,
                                const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw Error(Errc::invalid_argument, "grad_check: eps must be positive");
  for (auto& [name, t] : leaves) t.clear_grad();
  reset();
  auto l = loss();
  if (!std::isfinite(l.item())) throw Error(Errc::non_finite, "grad_check: loss is not finite");
  backward(l);

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < leaves.size(); ++p) {
    for (std::size_t i = 0; i < leaves[p].second.numel(); ++i) coords.emplace_back(p, i);
  }
  if (options.max_coords != 0 && coords.size() > options.max_coords) {
    auto rng = Rng::stream(options.seed, "grad_check");
    for (std::size_t i = 0; i < options.max_coords; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.below(coords.size() - i));
      std::swap(coords[i], coords[j]);
    }
    coords.resize(options.max_coords);
  }

  std::vector<std::vector<double>> analytic(leaves.size());
  for (std::size_t p = 0; p < leaves.size(); ++p) {
    auto& t = leaves[p].second;
    if (t.has_grad()) {
      analytic[p].assign(t.grad().begin(), t.grad().end());
    } else {
      analytic[p].assign(t.numel(), 0.0);
    }
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  auto eval = [&] {
    reset();
    const double v = loss().item();
    if (!std::isfinite(v)) throw Error(Errc::non_finite, "grad_check: perturbed loss is not finite");
    return v;
  };
  for (auto [p, i] : coords) {
    auto values = leaves[p].second.mutable_values();
    const double orig = values[i];
    values[i] = orig + options.eps;
    const double up = eval();
    values[i] = orig - options.eps;
    const double down = eval();
    values[i] = orig;
    const double numeric = (up - down) / (2.0 * options.eps);
    const double a = analytic[p][i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / denom;
    if (result.coords_checked == 0 || rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_param = leaves[p].first;
      result.worst_index = i;
    }
    ++result.coords_checked;
  }
  return result;
}

}  // namespace

GradCheckResult grad_check(Model<double>& model, const LossBuilder& loss, const GradCheckOptions& options) {
  auto& params = model.params();
  const auto saved = params.snapshot();
  std::vector<std::pair<std::string, Tensor<double>>> leaves;
  std::vector<std::size_t> buffers;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].trainable) leaves.emplace_back(params[i].name, params[i].tensor);
    if (params[i].role == ParamRole::buffer) buffers.push_back(i);
  }
  auto reset = [&] {
    for (auto i : buffers) {
      auto dst = params[i].tensor.mutable_values();
      std::copy(saved[i].begin(), saved[i].end(), dst.begin());
    }
  };
  try {
    auto result = grad_check_core(leaves, [&] { return loss(model); }, reset, options);
    params.restore(saved);
    return result;
  } catch (...) {
    params.restore(saved);
    throw;
  }
}

GradCheckResult grad_check(std::vector<Tensor<double>> leaves, const std::function<Tensor<double>()>& loss,
                           const GradCheckOptions& options) {
  std::vector<std::pair<std::string, Tensor<double>>> named;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    if (!leaves[i].requires_grad()) leaves[i].set_requires_grad(true);
    named.emplace_back("input" + std::to_string(i), leaves[i]);
  }
  return grad_check_core(named, loss, [] {}, options);
}

// --- ablation -----------------------------------------------------------------

void AblationConfig::validate() const {
  backbone.validate();
  if (proj_dim != 0 && proj_dim < 2) throw Error(Errc::config, "ablation: projection width must be 0 or >= 2");
  if (seeds.size() < 3) throw Error(Errc::config, "ablation: at least three seeds are required");
  if (eval_batch_size <= 0) throw Error(Errc::config, "ablation: eval batch size must be positive");
  pretrain.validate();
  finetune.validate();
}

std::uint64_t split_fingerprint(const Dataset& train, const Dataset& test) {
  std::string bytes;
  auto put = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  put(train.origin.size());
  for (auto o : train.origin) put(o);
  put(test.origin.size());
  for (auto o : test.origin) put(o);
  return fnv1a64(bytes);
}

std::pair<double, double> mean_sd(const std::vector<double>& values) {
  if (values.empty()) return {0.0, 0.0};
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

AblationReport run_ablation(const Dataset& dataset, const UnlabeledImages* pool, const AblationConfig& config,
                            const AblationHooks& hooks) {
  config.validate();
  dataset.validate();
  auto [train, test] = split_few_shot(dataset, config.split);
  const auto fingerprint = split_fingerprint(train, test);
  const UnlabeledImages train_pool = pool ? UnlabeledImages{} : strip_labels(train);
  const UnlabeledImages& pretrain_images = pool ? *pool : train_pool;

  AblationReport report;
  for (auto seed : config.seeds) {
    for (const char* arm : {"pretrained", "scratch"}) {
      const std::string arm_name = arm;
      AblationRun run;
      run.arm = arm_name;
      run.seed = seed;
      run.split_fingerprint = split_fingerprint(train, test);
      auto model = Model<float>::build(config.backbone, seed);
      if (arm_name == "pretrained") {
        if (config.proj_dim > 0) {
          model.attach_projection_head(config.proj_dim);
        } else {
          model.attach_identity_head();
        }
        auto pcfg = config.pretrain;
        pcfg.seed = seed;
        run.pretrain_records = pretrain(model, pretrain_images, pcfg, [&](const EpochRecord& r) {
          if (hooks.on_epoch) hooks.on_epoch(arm_name, seed, "pretrain", r);
        });
      }
      model.attach_classifier(dataset.num_classes);
      auto fcfg = config.finetune;
      fcfg.seed = seed;
      auto ft = finetune(model, train, fcfg, [&](const EpochRecord& r, const Model<float>&) {
        if (hooks.on_epoch) hooks.on_epoch(arm_name, seed, "finetune", r);
      });
      run.finetune_records = std::move(ft.records);
      run.finetune_epochs = static_cast<int>(run.finetune_records.size());
      run.best_epoch = ft.best_epoch;
      const auto ev = evaluate(model, test, config.eval_batch_size, config.finetune.f1_average);
      run.accuracy = ev.accuracy;
      run.f1 = ev.f1;
      report.runs.push_back(std::move(run));
    }
  }

  report.splits_identical = true;
  for (const auto& r : report.runs) report.splits_identical &= r.split_fingerprint == fingerprint;

  auto summarize = [&](const std::string& arm) {
    std::vector<double> acc, f1;
    for (const auto& r : report.runs) {
      if (r.arm != arm) continue;
      acc.push_back(r.accuracy);
      f1.push_back(r.f1);
    }
    ArmSummary s;
    s.arm = arm;
    std::tie(s.acc_mean, s.acc_sd) = mean_sd(acc);
    std::tie(s.f1_mean, s.f1_sd) = mean_sd(f1);
    return s;
  };
  report.pretrained = summarize("pretrained");
  report.scratch = summarize("scratch");
  report.acc_difference = report.pretrained.acc_mean - report.scratch.acc_mean;
  report.f1_difference = report.pretrained.f1_mean - report.scratch.f1_mean;
  return report;
}

}  // namespace fewshot
