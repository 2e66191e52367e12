#include "fewshot/commands.hpp"

#include <cstdio>
#include <filesystem>
#include <functional>
#include <ostream>

#include "fewshot/checkpoint.hpp"
#include "fewshot/io.hpp"
#include "fewshot/report.hpp"

namespace fewshot {

namespace {

std::string join_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

/// Runs `body`, mapping library errors to exit codes. Divergence dumps are
/// written next to the other outputs when a directory is known.
int guarded(std::ostream& err, const std::string& diag_dir, const std::function<int()>& body) {
  try {
    return body();
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << "\n";
    if (!diag_dir.empty()) {
      try {
        io::ensure_directory(diag_dir);
        const auto path = join_path(diag_dir, "diagnostics.txt");
        io::write_text_atomic(path, e.dump());
        err << "diagnostics written to " << path << "\n";
      } catch (const Error& inner) {
        err << "could not write diagnostics: " << inner.what() << "\n";
      }
    } else {
      err << e.dump();
    }
    return exit_code(e.code());
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::bad_alloc&) {
    err << "error: out of memory\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

void progress(std::ostream& out, bool quiet, const std::string& label, const EpochRecord& r, int total) {
  if (quiet) return;
  out << label << " epoch " << (r.epoch + 1) << "/" << total << " loss " << fmt6(r.train_loss);
  if (r.val_loss) out << " val_loss " << fmt6(*r.val_loss);
  if (r.accuracy) out << " acc " << fixed4(*r.accuracy);
  if (r.f1) out << " f1 " << fixed4(*r.f1);
  char secs[32];
  std::snprintf(secs, sizeof secs, " (%.1fs)", r.seconds);
  out << secs << "\n";
  out.flush();
}

void attach_contrastive_head(Model<float>& model, const RunConfig& cfg) {
  if (cfg.head == "identity") {
    model.attach_identity_head();
  } else {
    model.attach_projection_head(cfg.proj_dim);
  }
}

int image_channels(const Dataset& d) { return static_cast<int>(d.images.front().channels); }
int image_size(const Dataset& d) {
  const auto& img = d.images.front();
  if (img.height != img.width) throw Error(Errc::incompatible, "the backbone expects square images");
  return static_cast<int>(img.height);
}

void write_curves(const std::string& dir, const std::string& stem, const std::vector<EpochRecord>& records) {
  io::write_text_atomic(join_path(dir, stem + ".csv"), epoch_csv(records));
  io::write_text_atomic(join_path(dir, stem + "_timing.csv"), timing_csv(records));
  PlotSeries train{"train loss", {}};
  PlotSeries val{"validation loss", {}};
  PlotSeries acc{"accuracy", {}};
  PlotSeries f1{"F1", {}};
  bool has_val = false;
  for (const auto& r : records) {
    train.y.push_back(r.train_loss);
    if (r.val_loss) {
      has_val = true;
      val.y.push_back(*r.val_loss);
      acc.y.push_back(r.accuracy.value_or(0.0));
      f1.y.push_back(r.f1.value_or(0.0));
    }
  }
  std::vector<PlotSeries> losses{train};
  if (has_val) losses.push_back(val);
  io::write_text_atomic(join_path(dir, stem + "_loss.svg"), line_plot_svg(stem + " loss", "epoch", "loss", losses));
  if (has_val) {
    io::write_text_atomic(join_path(dir, stem + "_metrics.svg"),
                          line_plot_svg(stem + " validation metrics", "epoch", "value", {acc, f1}));
  }
}

}  // namespace

std::string describe_config() {
  std::string out;
  for (const auto& k : config_keys()) out += "# " + k.doc + "\n" + k.key + " = " + k.default_value + "\n";
  return out;
}

RunConfig resolve_config(const RunOptions& options) {
  RunConfig cfg = options.config_path.empty() ? RunConfig{} : load_config(options.config_path);
  if (!options.out_dir.empty()) cfg.out_dir = options.out_dir;
  if (options.seed) cfg.seed = *options.seed;
  cfg.validate();
  return cfg;
}

Dataset load_run_dataset(const RunConfig& cfg) {
  if (cfg.data_path == "synthetic") {
    return generate_synthetic_dataset(cfg.data_classes, cfg.data_per_class, cfg.data_size, cfg.data_seed);
  }
  return load_dataset(cfg.data_path);
}

UnlabeledImages load_pretrain_pool(const RunConfig& cfg, const Dataset& dataset) {
  if (cfg.pretrain_pool == "train") return strip_labels(split_few_shot(dataset, cfg.split).first);
  if (cfg.pretrain_pool == "all") return strip_labels(dataset);
  if (cfg.pretrain_pool == "synthetic") {
    const auto& img = dataset.images.front();
    return strip_labels(generate_synthetic_dataset(cfg.data_classes, cfg.pool_per_class,
                                                   static_cast<int>(img.height), cfg.pool_seed));
  }
  return strip_labels(load_dataset(cfg.pretrain_pool));
}

std::string config_snapshot(const RunConfig& config) {
  RunConfig copy = config;
  copy.out_dir = RunConfig{}.out_dir;
  return serialize_config(copy);
}

int cmd_gen_data(const GenDataOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, "", [&] {
    const auto dataset = generate_synthetic_dataset(o.classes, o.per_class, o.size, o.seed);
    const auto parent = std::filesystem::path(o.path).parent_path();
    if (!parent.empty()) io::ensure_directory(parent.string());
    save_dataset(dataset, o.path);
    if (!o.quiet) {
      out << "wrote " << dataset.size() << " images (" << o.size << "x" << o.size << ") to " << o.path << "\n";
      const auto counts = dataset.class_counts();
      for (std::size_t k = 0; k < counts.size(); ++k) {
        out << "class " << k << " " << dataset.class_names[k] << ": " << counts[k] << "\n";
      }
    }
    return 0;
  });
}

int cmd_pretrain(const RunOptions& o, std::ostream& out, std::ostream& err) {
  std::string dir;
  return guarded(err, "", [&] {
    const auto cfg = resolve_config(o);
    dir = cfg.out_dir;
    const auto dataset = load_run_dataset(cfg);
    const auto pool = load_pretrain_pool(cfg, dataset);
    const int size = image_size(dataset);
    auto model = Model<float>::build(cfg.backbone(image_channels(dataset), size), cfg.seed);
    attach_contrastive_head(model, cfg);
    io::ensure_directory(dir);
    const auto pcfg = cfg.pretrain_config(size);
    AdamState<float> adam{pcfg.adam, 0, {}};
    std::vector<EpochRecord> records;
    return guarded(err, dir, [&] {
      records = pretrain(model, pool, pcfg,
                         [&](const EpochRecord& r) { progress(out, o.quiet, "pretrain", r, pcfg.epochs); }, &adam);
      auto ckpt = capture_checkpoint(model, Phase::pretrained, static_cast<std::uint32_t>(records.size()), &adam,
                                     config_snapshot(cfg));
      ckpt.comment = default_checkpoint_comment();
      save_checkpoint(ckpt, join_path(dir, "pretrained.ckpt"));
      write_curves(dir, "pretrain", records);
      out << "final loss " << fmt6(records.back().train_loss) << " (epoch 0: " << fmt6(records.front().train_loss)
          << ")\n";
      out << "checkpoint " << join_path(dir, "pretrained.ckpt") << "\n";
      return 0;
    });
  });
}

int cmd_finetune(const FinetuneOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, "", [&] {
    if (o.init.empty() == !o.scratch) {
      throw Error(Errc::config, "finetune needs exactly one of --init CHECKPOINT or --scratch");
    }
    const auto cfg = resolve_config(o.run);
    const auto dir = cfg.out_dir;
    const auto dataset = load_run_dataset(cfg);
    const auto backbone = cfg.backbone(image_channels(dataset), image_size(dataset));
    auto [train, test] = split_few_shot(dataset, cfg.split);

    auto model = [&] {
      if (o.scratch) return Model<float>::build(backbone, cfg.seed);
      const auto ckpt = load_checkpoint(o.init);
      if (!(ckpt.backbone == backbone)) {
        throw Error(Errc::incompatible, "checkpoint " + o.init + " was trained with a different backbone");
      }
      return model_from_checkpoint(ckpt);
    }();
    model.attach_classifier(dataset.num_classes);
    io::ensure_directory(dir);
    const auto fcfg = cfg.finetune_config();
    AdamState<float> adam{fcfg.adam, 0, {}};
    return guarded(err, dir, [&] {
      const auto result = finetune(
          model, train, fcfg,
          [&](const EpochRecord& r, const Model<float>&) { progress(out, o.run.quiet, "finetune", r, fcfg.epochs); },
          &adam);
      auto ckpt = capture_checkpoint(model, Phase::finetuned, static_cast<std::uint32_t>(result.records.size()), &adam,
                                     config_snapshot(cfg));
      ckpt.comment = default_checkpoint_comment();
      save_checkpoint(ckpt, join_path(dir, "finetuned.ckpt"));
      write_curves(dir, "finetune", result.records);
      const auto& best = result.records.at(static_cast<std::size_t>(result.best_epoch));
      out << "frozen tensors " << result.freeze.frozen_tensors << " (" << result.freeze.frozen_elements
          << " values), trainable tensors " << result.freeze.trainable_tensors << " ("
          << result.freeze.trainable_elements << " values)\n";
      out << "epochs run " << result.records.size() << (result.early_stopped ? " (early stop)" : "") << ", best epoch "
          << result.best_epoch << "\n";
      out << "validation accuracy " << fixed4(best.accuracy.value_or(0.0)) << " f1 " << fixed4(best.f1.value_or(0.0))
          << " loss " << fmt6(best.val_loss.value_or(0.0)) << "\n";
      out << "checkpoint " << join_path(dir, "finetuned.ckpt") << "\n";
      return 0;
    });
  });
}

int cmd_eval(const EvalOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, "", [&] {
    if (o.checkpoint.empty()) throw Error(Errc::config, "eval needs --checkpoint");
    if (o.split != "test" && o.split != "train" && o.split != "all") {
      throw Error(Errc::config, "--split must be test, train or all");
    }
    const auto ckpt = load_checkpoint(o.checkpoint);
    if (ckpt.head_kind != HeadKind::classifier) {
      throw Error(Errc::incompatible, "checkpoint " + o.checkpoint + " has no classifier head");
    }
    RunConfig cfg = o.run.config_path.empty() ? parse_config(ckpt.config_text) : load_config(o.run.config_path);
    if (!o.run.out_dir.empty()) cfg.out_dir = o.run.out_dir;
    cfg.validate();
    auto model = model_from_checkpoint(ckpt);
    const Dataset dataset = o.data.empty() ? load_run_dataset(cfg) : load_dataset(o.data);
    Dataset target;
    if (o.split == "all") {
      target = dataset;
    } else {
      auto [train, test] = split_few_shot(dataset, cfg.split);
      target = o.split == "test" ? std::move(test) : std::move(train);
    }
    const auto ev = evaluate(model, target, cfg.eval_batch_size, cfg.f1_average);
    io::ensure_directory(cfg.out_dir);
    const auto path = join_path(cfg.out_dir, "confusion_" + o.split + ".csv");
    io::write_text_atomic(path, confusion_csv(ev.confusion, target.class_names));
    out << "samples " << target.size() << "\n";
    out << "accuracy " << fixed4(ev.accuracy) << "\n";
    out << "macro_f1 " << fixed4(ev.macro_f1) << "\n";
    if (cfg.f1_average != F1Average::macro) {
      out << f1_average_name(cfg.f1_average) << "_f1 " << fixed4(ev.f1) << "\n";
    }
    out << "confusion " << path << "\n";
    return 0;
  });
}

int cmd_ablate(const RunOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, "", [&] {
    const auto cfg = resolve_config(o);
    const auto dir = cfg.out_dir;
    const auto dataset = load_run_dataset(cfg);
    std::optional<UnlabeledImages> pool;
    if (cfg.pretrain_pool != "train") pool = load_pretrain_pool(cfg, dataset);
    const auto acfg = cfg.ablation_config(image_channels(dataset), image_size(dataset));
    io::ensure_directory(dir);
    return guarded(err, dir, [&] {
      AblationHooks hooks;
      hooks.on_epoch = [&](const std::string& arm, std::uint64_t seed, const char* phase, const EpochRecord& r) {
        const int total = std::string(phase) == "pretrain" ? acfg.pretrain.epochs : acfg.finetune.epochs;
        progress(out, o.quiet, arm + " seed " + std::to_string(seed) + " " + phase, r, total);
      };
      const auto report = run_ablation(dataset, pool ? &*pool : nullptr, acfg, hooks);
      io::write_text_atomic(join_path(dir, "ablation.csv"), ablation_csv(report));
      const auto text = ablation_text(report);
      io::write_text_atomic(join_path(dir, "ablation.txt"), text);
      std::vector<PlotSeries> pre_curves;
      for (const auto& r : report.runs) {
        const auto stem = "ablation_" + r.arm + "_seed" + std::to_string(r.seed);
        if (!r.pretrain_records.empty()) {
          io::write_text_atomic(join_path(dir, stem + "_pretrain.csv"), epoch_csv(r.pretrain_records));
          PlotSeries s{"seed " + std::to_string(r.seed), {}};
          for (const auto& e : r.pretrain_records) s.y.push_back(e.train_loss);
          pre_curves.push_back(std::move(s));
        }
        io::write_text_atomic(join_path(dir, stem + "_finetune.csv"), epoch_csv(r.finetune_records));
      }
      if (!pre_curves.empty()) {
        io::write_text_atomic(join_path(dir, "ablation_pretrain_loss.svg"),
                              line_plot_svg("contrastive pretraining loss", "epoch", "loss", pre_curves));
      }
      out << text;
      return 0;
    });
  });
}

}  // namespace fewshot
