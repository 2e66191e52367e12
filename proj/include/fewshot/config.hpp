#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fewshot/harness.hpp"

namespace fewshot {

/// Every setting of a run. The text form is flat `key = value` lines with `#`
/// comments; see config_keys() for the documented defaults.
struct RunConfig {
  // data
  std::string data_path = "synthetic";
  int data_classes = 5;
  int data_per_class = 150;
  int data_size = 32;
  std::uint64_t data_seed = 7;
  SplitSpec split{100, 50, 0};

  // model
  std::vector<int> stage_channels{16, 32, 64};
  int blocks_per_stage = 2;
  int embedding_dim = 64;
  std::string head = "projection";
  int proj_dim = 64;

  // augmentation
  AugConfig aug;

  ContrastiveConfig contrastive;

  // pretraining
  int pretrain_epochs = 200;
  int pretrain_batch_size = 64;
  double pretrain_lr = 0.001;
  std::string pretrain_pool = "train";
  int pool_per_class = 150;
  std::uint64_t pool_seed = 1007;

  // fine-tuning
  int finetune_epochs = 100;
  int finetune_batch_size = 32;
  double finetune_lr = 0.001;
  int freeze_boundary = -1;
  double val_fraction = 0.2;
  int patience = 10;
  double min_delta = 1e-4;
  Monitor monitor = Monitor::val_loss;

  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  int eval_batch_size = 64;
  F1Average f1_average = F1Average::macro;

  std::uint64_t seed = 1;
  std::vector<std::uint64_t> ablate_seeds{1, 2, 3};
  std::string out_dir = "out";

  bool operator==(const RunConfig&) const;

  /// Checks ranges across all sections; throws Errc::config.
  void validate() const;

  /// Backbone for images of the given channel count and size.
  BackboneConfig backbone(int input_channels, int input_size) const;
  PretrainConfig pretrain_config(int input_size) const;
  FinetuneConfig finetune_config() const;
  AblationConfig ablation_config(int input_channels, int input_size) const;
};

struct ConfigKey {
  std::string key;
  std::string default_value;
  std::string doc;
};

/// All recognised keys in serialisation order with their defaults.
std::vector<ConfigKey> config_keys();

/// Unknown keys, duplicate keys, malformed lines and unparsable values throw
/// Errc::config. Keys absent from the text keep their defaults.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);
/// Canonical form: every key, in config_keys() order, one per line.
std::string serialize_config(const RunConfig& config);

/// Sets one key from its text value (same rules as a config line).
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& config, const std::string& key);

/// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace fewshot
