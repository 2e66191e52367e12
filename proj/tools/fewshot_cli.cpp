// Command-line front end. Parses flags and forwards to the C API.

#include <cstdint>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fewshot/fewshot.h"

namespace {

struct CommonFlags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool quiet = false;

  fewshot_run_options options() const {
    fewshot_run_options o{};
    o.config_path = config.empty() ? nullptr : config.c_str();
    o.out_dir = out.empty() ? nullptr : out.c_str();
    o.has_seed = seed.has_value();
    o.seed = seed.value_or(0);
    o.quiet = quiet;
    return o;
  }
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config, "Config file (key = value lines)");
  cmd->add_option("--out", flags.out, "Output directory (overrides the config's out)");
  cmd->add_option("--seed", flags.seed, "Seed (overrides the config's seed)");
  cmd->add_flag("--quiet", flags.quiet, "Suppress per-epoch progress");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contrastive pretraining and few-shot fine-tuning"};
  app.require_subcommand(1);
  app.set_version_flag("--version", fewshot_version());

  int classes = 5, per_class = 150, size = 32;
  std::uint64_t data_seed = 7;
  std::string data_out = "dataset.ssld";
  bool gen_quiet = false;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset in SSLD format");
  gen->add_option("--classes", classes, "Number of classes (>= 2)")->capture_default_str();
  gen->add_option("--per-class", per_class, "Images per class (>= 2)")->capture_default_str();
  gen->add_option("--size", size, "Image side length")->capture_default_str();
  gen->add_option("--seed", data_seed, "Generator seed")->capture_default_str();
  gen->add_option("--out", data_out, "Output file")->capture_default_str();
  gen->add_flag("--quiet", gen_quiet, "Suppress the per-class summary");

  CommonFlags pre_flags;
  auto* pre = app.add_subcommand("pretrain", "Contrastive pretraining; writes pretrained.ckpt and loss curves");
  add_common(pre, pre_flags);

  CommonFlags ft_flags;
  std::string init;
  bool scratch = false;
  auto* ft = app.add_subcommand("finetune", "Supervised fine-tuning; writes finetuned.ckpt and metric curves");
  add_common(ft, ft_flags);
  auto* init_opt = ft->add_option("--init", init, "Pretrained checkpoint to start from");
  auto* scratch_opt = ft->add_flag("--scratch", scratch, "Start from seeded random weights");
  init_opt->excludes(scratch_opt);

  CommonFlags ev_flags;
  std::string checkpoint, data, split = "test";
  auto* ev = app.add_subcommand("eval", "Accuracy, macro F1 and confusion matrix of a checkpoint");
  add_common(ev, ev_flags);
  ev->add_option("--checkpoint", checkpoint, "Fine-tuned checkpoint")->required();
  ev->add_option("--data", data, "SSLD dataset (default: the checkpoint's config)");
  ev->add_option("--split", split, "test, train or all")
      ->check(CLI::IsMember({"test", "train", "all"}))
      ->capture_default_str();

  CommonFlags ab_flags;
  auto* ab = app.add_subcommand("ablate", "Pretrained vs from-scratch comparison over the configured seeds");
  add_common(ab, ab_flags);

  auto* defaults = app.add_subcommand("defaults", "Print every config key with its default");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : FEWSHOT_ERR_USAGE;
  }

  if (*gen) return fewshot_cmd_gen_data(classes, per_class, size, data_seed, data_out.c_str(), gen_quiet);
  if (*pre) {
    const auto o = pre_flags.options();
    return fewshot_cmd_pretrain(&o);
  }
  if (*ft) {
    const auto o = ft_flags.options();
    return fewshot_cmd_finetune(&o, init.empty() ? nullptr : init.c_str(), scratch);
  }
  if (*ev) {
    const auto o = ev_flags.options();
    return fewshot_cmd_eval(&o, checkpoint.c_str(), data.empty() ? nullptr : data.c_str(), split.c_str());
  }
  if (*ab) {
    const auto o = ab_flags.options();
    return fewshot_cmd_ablate(&o);
  }
  if (*defaults) {
    std::size_t needed = 0;
    fewshot_config_describe(nullptr, 0, &needed);
    std::vector<char> buf(needed + 1);
    if (fewshot_config_describe(buf.data(), buf.size(), nullptr) != FEWSHOT_OK) {
      std::cerr << "error: " << fewshot_last_error() << "\n";
      return FEWSHOT_ERR_INTERNAL;
    }
    std::fputs(buf.data(), stdout);
    return 0;
  }
  return FEWSHOT_ERR_USAGE;
}
