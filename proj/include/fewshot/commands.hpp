#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>

#include "fewshot/config.hpp"
#include "fewshot/data.hpp"

namespace fewshot {

struct RunOptions {
  std::string config_path;  // empty: defaults
  std::string out_dir;      // empty: the config's `out`
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

struct GenDataOptions {
  int classes = 5;
  int per_class = 150;
  int size = 32;
  std::uint64_t seed = 7;
  std::string path = "dataset.ssld";
  bool quiet = false;
};

struct FinetuneOptions {
  RunOptions run;
  std::string init;  // pretrained checkpoint
  bool scratch = false;
};

struct EvalOptions {
  RunOptions run;
  std::string checkpoint;
  std::string data;  // empty: the dataset named by the config
  std::string split = "test";  // test, train or all
};

// Each command returns a process exit code: 0 success, 2 usage/config,
// 3 I/O or dataset format, 4 numerical failure, 5 compatibility. Errors are
// reported on `err`.
int cmd_gen_data(const GenDataOptions& options, std::ostream& out, std::ostream& err);
int cmd_pretrain(const RunOptions& options, std::ostream& out, std::ostream& err);
int cmd_finetune(const FinetuneOptions& options, std::ostream& out, std::ostream& err);
int cmd_eval(const EvalOptions& options, std::ostream& out, std::ostream& err);
int cmd_ablate(const RunOptions& options, std::ostream& out, std::ostream& err);

/// Every config key with its documentation and default, as a config file.
std::string describe_config();

/// Config file (or defaults) with --out/--seed overrides applied, validated.
RunConfig resolve_config(const RunOptions& options);
/// Generates or loads the dataset named by data.path.
Dataset load_run_dataset(const RunConfig& config);
/// Images for pretraining per pretrain.pool.
UnlabeledImages load_pretrain_pool(const RunConfig& config, const Dataset& dataset);
/// Config text stored in checkpoints; the output directory is left at its
/// default so runs into different directories produce identical payloads.
std::string config_snapshot(const RunConfig& config);

}  // namespace fewshot
