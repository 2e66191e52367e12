#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <type_traits>
#include <vector>

#include "doctest.h"
#include "fewshot/harness.hpp"
#include "test_util.hpp"

using namespace fewshot;

namespace {

BackboneConfig tiny_backbone(int size = 16) {
  BackboneConfig c;
  c.input_size = size;
  c.stage_channels = {4, 8};
  c.blocks_per_stage = 1;
  c.embedding_dim = 8;
  return c;
}

PretrainConfig tiny_pretrain(int epochs) {
  PretrainConfig p;
  p.epochs = epochs;
  p.batch_size = 4;
  p.aug.out_size = 16;
  p.contrastive.temperature = 0.5;
  p.seed = 3;
  return p;
}

FinetuneConfig tiny_finetune(int epochs) {
  FinetuneConfig f;
  f.epochs = epochs;
  f.batch_size = 8;
  f.eval_batch_size = 16;
  f.seed = 4;
  return f;
}

// Brute-force accuracy and macro F1 straight from (prediction, label) pairs.
std::pair<double, double> brute_metrics(const std::vector<int>& pred, const std::vector<int>& truth, int classes) {
  double correct = 0, f1 = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == truth[i];
  for (int c = 0; c < classes; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      tp += pred[i] == c && truth[i] == c;
      fp += pred[i] == c && truth[i] != c;
      fn += pred[i] != c && truth[i] == c;
    }
    f1 += tp + fp + fn == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
  }
  return {correct / static_cast<double>(pred.size()), f1 / classes};
}

// y = x^2 whose backward rule is off by a factor of two.
Tensor<double> bad_square(const Tensor<double>& x) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (auto& v : out) v *= v;
  return Tensor<double>::record(x.shape(), std::move(out), {x}, "bad_square",
                                [x](std::span<const double> dy, GradSink<double>& sink) {
                                  if (!sink.wants(0)) return;
                                  auto g = sink.grad(0);
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += 4.0 * x.values()[i] * dy[i];
                                });
}

}  // namespace

static_assert(std::is_invocable_v<decltype(&pretrain), Model<float>&, const UnlabeledImages&, const PretrainConfig&,
                                  const EpochCallback&, AdamState<float>*>);
static_assert(!std::is_invocable_v<decltype(&pretrain), Model<float>&, const Dataset&, const PretrainConfig&,
                                   const EpochCallback&, AdamState<float>*>,
              "pretraining must not accept labelled data");

TEST_CASE("grad_check on a linear model with cross-entropy") {
  auto w = testutil::random_tensor({6, 4}, 1);
  auto b = testutil::random_tensor({4}, 2);
  const auto x = testutil::random_tensor({5, 6}, 3, -1.0, 1.0, false);
  const std::vector<int> labels{0, 3, 1, 2, 3};
  const auto r = grad_check({w, b}, [&] { return cross_entropy(add_bias(matmul(x, w), b), labels); });
  CHECK(r.coords_checked == 28);
  CHECK(r.max_rel_error < 1e-7);
}

TEST_CASE("grad_check on a two-block backbone with info_nce") {
  BackboneConfig cfg;
  cfg.input_size = 6;
  cfg.stage_channels = {3, 4};
  cfg.blocks_per_stage = 1;
  cfg.embedding_dim = 6;
  auto model = Model<double>::build(cfg, 5);
  model.attach_projection_head(3);
  const auto v1 = testutil::uniform_values(4 * 3 * 36, 6, 0.0, 1.0);
  const auto v2 = testutil::uniform_values(4 * 3 * 36, 7, 0.0, 1.0);
  const auto x1 = Tensor<double>::from({4, 3, 6, 6}, v1);
  const auto x2 = Tensor<double>::from({4, 3, 6, 6}, v2);
  ContrastiveConfig cc;
  cc.temperature = 0.5;
  const auto before = model.params().snapshot();
  const auto r = grad_check(model, [&](Model<double>& m) {
    return info_nce_loss(m.forward_contrastive(x1), m.forward_contrastive(x2), cc);
  });
  CHECK(r.coords_checked == model.params().trainable_elements());
  CHECK(r.max_rel_error < 1e-4);
  CHECK(model.params().snapshot() == before);

  const auto sub = grad_check(
      model, [&](Model<double>& m) { return info_nce_loss(m.forward_contrastive(x1), m.forward_contrastive(x2), cc); },
      {1e-5, 200, 9});
  CHECK(sub.coords_checked == 200);
  CHECK(sub.max_rel_error < 1e-4);
}

TEST_CASE("grad_check catches a corrupted backward rule") {
  auto x = testutil::random_tensor({3, 3}, 8);
  const auto good = grad_check({x}, [&] { return sum(mul(x, x)); });
  CHECK(good.max_rel_error < 1e-7);
  const auto bad = grad_check({x}, [&] { return sum(bad_square(x)); });
  CHECK(bad.max_rel_error > 0.1);
  CHECK(bad.worst_param == "input0");
}

TEST_CASE("pretrain produces one finite record per epoch and is deterministic") {
  const auto data = generate_synthetic_dataset(2, 4, 16, 1);
  const auto pool = strip_labels(data);
  auto run = [&](std::vector<EpochRecord>& seen) {
    auto m = Model<float>::build(tiny_backbone(), 2);
    m.attach_projection_head(8);
    auto recs = pretrain(m, pool, tiny_pretrain(3), [&](const EpochRecord& r) { seen.push_back(r); });
    return std::make_pair(std::move(recs), m.params().snapshot());
  };
  std::vector<EpochRecord> seen_a, seen_b;
  const auto [recs, params] = run(seen_a);
  REQUIRE(recs.size() == 3);
  for (int e = 0; e < 3; ++e) {
    CHECK(recs[static_cast<std::size_t>(e)].epoch == e);
    CHECK(std::isfinite(recs[static_cast<std::size_t>(e)].train_loss));
    CHECK_FALSE(recs[static_cast<std::size_t>(e)].val_loss.has_value());
  }
  CHECK(seen_a.size() == 3);
  const auto [recs2, params2] = run(seen_b);
  CHECK(params == params2);
  for (std::size_t e = 0; e < 3; ++e) CHECK(recs[e].train_loss == recs2[e].train_loss);

  auto other = Model<float>::build(tiny_backbone(), 2);
  other.attach_projection_head(8);
  auto cfg = tiny_pretrain(3);
  cfg.seed = 4;
  pretrain(other, pool, cfg);
  CHECK(other.params().snapshot() != params);
}

TEST_CASE("pretrain argument errors") {
  const auto pool = strip_labels(generate_synthetic_dataset(2, 2, 16, 1));
  auto m = Model<float>::build(tiny_backbone(), 2);
  CHECK_ERRC(pretrain(m, pool, tiny_pretrain(1)), Errc::invalid_argument);
  m.attach_identity_head();
  UnlabeledImages one{{pool.images[0]}};
  CHECK_ERRC(pretrain(m, one, tiny_pretrain(1)), Errc::invalid_argument);
  auto cfg = tiny_pretrain(0);
  CHECK_ERRC(pretrain(m, pool, cfg), Errc::config);
  cfg = tiny_pretrain(1);
  cfg.aug.out_size = 32;
  CHECK_ERRC(pretrain(m, pool, cfg), Errc::config);
}

TEST_CASE("non-finite pretraining input aborts with a diagnostic dump") {
  auto pool = strip_labels(generate_synthetic_dataset(2, 4, 16, 1));
  for (auto& img : pool.images) img.pixels[5] = std::numeric_limits<float>::quiet_NaN();
  auto m = Model<float>::build(tiny_backbone(), 2);
  m.attach_identity_head();
  bool caught = false;
  try {
    pretrain(m, pool, tiny_pretrain(2));
  } catch (const DivergenceError& e) {
    caught = true;
    CHECK(e.code() == Errc::non_finite);
    CHECK(e.dump().find("epoch") != std::string::npos);
  } catch (const Error& e) {
    caught = e.code() == Errc::non_finite;
  }
  CHECK(caught);
}

TEST_CASE("finetune records, freezing and best-epoch restoration") {
  const auto data = generate_synthetic_dataset(3, 20, 16, 2);
  auto m = Model<float>::build(tiny_backbone(), 7);
  m.attach_classifier(3);
  const auto before = m.params().snapshot();

  auto cfg = tiny_finetune(12);
  cfg.adam.lr = 0.03;
  cfg.early_stop.patience = 2;
  cfg.early_stop.min_delta = 0.0;
  std::vector<std::vector<std::vector<float>>> per_epoch;
  const auto res = finetune(m, data, cfg, [&](const EpochRecord&, const Model<float>& model) {
    per_epoch.push_back(model.params().snapshot());
  });
  REQUIRE_FALSE(res.records.empty());
  REQUIRE(per_epoch.size() == res.records.size());
  for (std::size_t e = 0; e < res.records.size(); ++e) {
    const auto& r = res.records[e];
    CHECK(r.epoch == static_cast<int>(e));
    REQUIRE(r.val_loss.has_value());
    CHECK(*r.accuracy >= 0.0);
    CHECK(*r.accuracy <= 1.0);
    CHECK(*r.f1 >= 0.0);
    CHECK(*r.f1 <= 1.0);
  }
  if (res.early_stopped) CHECK(res.records.size() == static_cast<std::size_t>(res.best_epoch + 1 + 2 + 1));

  double min_loss = std::numeric_limits<double>::infinity();
  for (const auto& r : res.records) min_loss = std::min(min_loss, *r.val_loss);
  CHECK(*res.records[static_cast<std::size_t>(res.best_epoch)].val_loss == min_loss);
  CHECK(m.params().snapshot() == per_epoch[static_cast<std::size_t>(res.best_epoch)]);

  const auto [fit, val] = split_validation(data, cfg.val_fraction, cfg.seed);
  CHECK(evaluate(m, val, cfg.eval_batch_size).loss == min_loss);

  // Default boundary freezes the stem and every stage but the last.
  const auto after = m.params().snapshot();
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const auto g = Model<float>::group_of(m.params()[i].name);
    if (g == "stem" || g == "stage1") CHECK_MESSAGE(after[i] == before[i], m.params()[i].name);
  }
  CHECK(res.freeze.frozen_tensors > 0);
  CHECK(m.mode() == Mode::eval);
}

TEST_CASE("finetune is deterministic") {
  const auto data = generate_synthetic_dataset(3, 12, 16, 3);
  auto run = [&] {
    auto m = Model<float>::build(tiny_backbone(), 1);
    m.attach_classifier(3);
    const auto res = finetune(m, data, tiny_finetune(3));
    std::vector<double> losses;
    for (const auto& r : res.records) losses.push_back(*r.val_loss);
    return std::make_pair(losses, m.params().snapshot());
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("finetune argument errors") {
  const auto data = generate_synthetic_dataset(3, 6, 16, 3);
  auto m = Model<float>::build(tiny_backbone(), 1);
  CHECK_ERRC(finetune(m, data, tiny_finetune(1)), Errc::invalid_argument);
  m.attach_classifier(4);
  CHECK_ERRC(finetune(m, data, tiny_finetune(1)), Errc::incompatible);
  m.attach_classifier(3);
  auto cfg = tiny_finetune(1);
  cfg.batch_size = 64;
  CHECK_ERRC(finetune(m, data, cfg), Errc::invalid_argument);
  cfg = tiny_finetune(1);
  cfg.val_fraction = 1.0;
  CHECK_ERRC(finetune(m, data, cfg), Errc::config);
  cfg = tiny_finetune(1);
  cfg.freeze_boundary = 5;
  CHECK_ERRC(finetune(m, data, cfg), Errc::invalid_argument);
}

TEST_CASE("evaluate matches a brute-force recomputation") {
  const auto data = generate_synthetic_dataset(4, 10, 16, 5);
  auto m = Model<float>::build(tiny_backbone(), 3);
  m.attach_classifier(4);
  const auto ev = evaluate(m, data, 64);
  REQUIRE(ev.predictions.size() == data.size());
  const auto [acc, f1] = brute_metrics(ev.predictions, data.labels, 4);
  CHECK(ev.accuracy == doctest::Approx(acc).epsilon(1e-12));
  CHECK(ev.macro_f1 == doctest::Approx(f1).epsilon(1e-12));
  CHECK(ev.confusion.total() == data.size());
  CHECK(std::isfinite(ev.loss));

  const auto ev1 = evaluate(m, data, 1);
  CHECK(ev1.predictions == ev.predictions);
  CHECK(ev1.accuracy == ev.accuracy);
  CHECK(ev1.macro_f1 == ev.macro_f1);
  CHECK(ev1.loss == doctest::Approx(ev.loss).epsilon(1e-6));

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = order.size() - 1 - i;
  const auto reversed = evaluate(m, subset(data, order), 7);
  CHECK(reversed.accuracy == ev.accuracy);
  CHECK(reversed.macro_f1 == ev.macro_f1);

  auto relabelled = data;
  relabelled.labels = ev.predictions;
  const auto perfect = evaluate(m, relabelled, 16);
  CHECK(perfect.accuracy == 1.0);
  const int distinct = static_cast<int>(std::set<int>(ev.predictions.begin(), ev.predictions.end()).size());
  if (distinct == 4) CHECK(perfect.macro_f1 == 1.0);

  CHECK(m.mode() == Mode::train);
  CHECK_ERRC(evaluate(m, subset(data, std::vector<std::size_t>{}), 8), Errc::invalid_argument);
  CHECK_ERRC(evaluate(m, data, 0), Errc::invalid_argument);
  m.attach_classifier(3);
  CHECK_ERRC(evaluate(m, data, 8), Errc::incompatible);
}

TEST_CASE("ablation reports both arms over every seed") {
  const auto data = generate_synthetic_dataset(3, 12, 16, 6);
  AblationConfig cfg;
  cfg.backbone = tiny_backbone();
  cfg.proj_dim = 8;
  cfg.pretrain = tiny_pretrain(1);
  cfg.finetune = tiny_finetune(2);
  cfg.split = {8, 4, 2};
  cfg.eval_batch_size = 16;
  std::size_t callbacks = 0;
  AblationHooks hooks;
  hooks.on_epoch = [&](const std::string&, std::uint64_t, const char*, const EpochRecord&) { ++callbacks; };
  const auto rep = run_ablation(data, nullptr, cfg, hooks);
  REQUIRE(rep.runs.size() == 6);
  CHECK(rep.splits_identical);
  std::size_t pre = 0, scratch = 0;
  for (const auto& r : rep.runs) {
    if (r.arm == "pretrained") {
      ++pre;
      CHECK(r.pretrain_records.size() == 1);
    } else {
      CHECK(r.arm == "scratch");
      ++scratch;
      CHECK(r.pretrain_records.empty());
    }
    CHECK(r.split_fingerprint == rep.runs[0].split_fingerprint);
    CHECK(r.accuracy >= 0.0);
    CHECK(r.accuracy <= 1.0);
  }
  CHECK(pre == 3);
  CHECK(scratch == 3);
  CHECK(callbacks > 0);

  std::vector<double> accs;
  for (const auto& r : rep.runs) {
    if (r.arm == "pretrained") accs.push_back(r.accuracy);
  }
  const auto [mean, sd] = mean_sd(accs);
  CHECK(rep.pretrained.acc_mean == doctest::Approx(mean));
  CHECK(rep.pretrained.acc_sd == doctest::Approx(sd));
  CHECK(rep.acc_difference == doctest::Approx(rep.pretrained.acc_mean - rep.scratch.acc_mean));

  auto few = cfg;
  few.seeds = {1, 2};
  CHECK_ERRC(run_ablation(data, nullptr, few), Errc::config);
}

TEST_CASE("mean and sample standard deviation") {
  const auto [m, s] = mean_sd({1.0, 2.0, 3.0});
  CHECK(m == 2.0);
  CHECK(s == 1.0);
  const auto [m1, s1] = mean_sd({4.0});
  CHECK(m1 == 4.0);
  CHECK(s1 == 0.0);
}

TEST_CASE("monitor names round trip") {
  for (Monitor mon : {Monitor::val_loss, Monitor::val_accuracy, Monitor::val_f1}) {
    CHECK(parse_monitor(monitor_name(mon)) == mon);
  }
  CHECK_ERRC(parse_monitor("val_auc"), Errc::config);
}
