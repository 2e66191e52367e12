#include "fewshot/config.hpp"

#include <charconv>
#include <cmath>
#include <functional>
#include <set>
#include <sstream>

#include "fewshot/io.hpp"

namespace fewshot {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  throw Error(Errc::config, "config key '" + key + "': cannot parse '" + value + "' as " + expected);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename I>
I parse_integer(const std::string& key, const std::string& v) {
  I out{};
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) bad_value(key, v, "an integer");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(out)) {
    bad_value(key, v, "a finite number");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  bad_value(key, v, "true or false");
}

template <typename I>
std::vector<I> parse_list(const std::string& key, const std::string& v) {
  std::vector<I> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_integer<I>(key, trim(item)));
  if (out.empty()) bad_value(key, v, "a comma-separated list");
  return out;
}

template <typename I>
std::string join(const std::vector<I>& items) {
  std::string s;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(items[i]);
  }
  return s;
}

const char* bool_str(bool b) { return b ? "true" : "false"; }

struct KeyDef {
  const char* key;
  const char* doc;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define FS_INT(KEY, FIELD, DOC)                                                                    \
  KeyDef{KEY, DOC, [](RunConfig& c, const std::string& v) { c.FIELD = parse_integer<int>(KEY, v); }, \
         [](const RunConfig& c) { return std::to_string(c.FIELD); }}
#define FS_U64(KEY, FIELD, DOC)                                                                             \
  KeyDef{KEY, DOC, [](RunConfig& c, const std::string& v) { c.FIELD = parse_integer<std::uint64_t>(KEY, v); }, \
         [](const RunConfig& c) { return std::to_string(c.FIELD); }}
#define FS_REAL(KEY, FIELD, DOC)                                                           \
  KeyDef{KEY, DOC, [](RunConfig& c, const std::string& v) { c.FIELD = parse_real(KEY, v); }, \
         [](const RunConfig& c) { return format_double(c.FIELD); }}
#define FS_BOOL(KEY, FIELD, DOC)                                                           \
  KeyDef{KEY, DOC, [](RunConfig& c, const std::string& v) { c.FIELD = parse_bool(KEY, v); }, \
         [](const RunConfig& c) { return std::string(bool_str(c.FIELD)); }}
#define FS_STR(KEY, FIELD, DOC)                                                 \
  KeyDef{KEY, DOC, [](RunConfig& c, const std::string& v) { c.FIELD = v; }, \
         [](const RunConfig& c) { return c.FIELD; }}

const std::vector<KeyDef>& key_table() {
  static const std::vector<KeyDef> table = {
      FS_STR("data.path", data_path, "SSLD dataset file, or 'synthetic' to generate one"),
      FS_INT("data.classes", data_classes, "synthetic: number of classes"),
      FS_INT("data.per_class", data_per_class, "synthetic: images per class"),
      FS_INT("data.size", data_size, "synthetic: image side length"),
      FS_U64("data.seed", data_seed, "synthetic: generator seed"),
      FS_INT("split.train", split.per_class_train, "training images per class"),
      FS_INT("split.test", split.per_class_test, "test images per class"),
      FS_U64("split.seed", split.seed, "split shuffle seed"),
      KeyDef{"model.channels", "channel count of each stage",
             [](RunConfig& c, const std::string& v) { c.stage_channels = parse_list<int>("model.channels", v); },
             [](const RunConfig& c) { return join(c.stage_channels); }},
      FS_INT("model.blocks", blocks_per_stage, "residual blocks per stage"),
      FS_INT("model.embedding", embedding_dim, "embedding length"),
      FS_STR("model.head", head, "contrastive head: projection or identity"),
      FS_INT("model.proj_dim", proj_dim, "projection head output width"),
      FS_BOOL("aug.crop", aug.crop, "random resized crop on/off"),
      FS_REAL("aug.scale_min", aug.scale_min, "smallest crop area fraction"),
      FS_REAL("aug.scale_max", aug.scale_max, "largest crop area fraction"),
      FS_REAL("aug.flip_p", aug.flip_p, "horizontal flip probability"),
      FS_REAL("aug.brightness", aug.brightness, "brightness jitter strength in [0,1)"),
      FS_REAL("aug.contrast", aug.contrast, "contrast jitter strength in [0,1)"),
      FS_REAL("contrastive.temperature", contrastive.temperature, "softmax temperature"),
      KeyDef{"contrastive.reduction", "mean or sum over the batch",
             [](RunConfig& c, const std::string& v) {
               if (v == "mean") {
                 c.contrastive.reduction = Reduction::mean;
               } else if (v == "sum") {
                 c.contrastive.reduction = Reduction::sum;
               } else {
                 bad_value("contrastive.reduction", v, "mean or sum");
               }
             },
             [](const RunConfig& c) {
               return std::string(c.contrastive.reduction == Reduction::mean ? "mean" : "sum");
             }},
      FS_BOOL("contrastive.symmetric", contrastive.symmetric, "average both view directions"),
      FS_INT("pretrain.epochs", pretrain_epochs, "pretraining epochs"),
      FS_INT("pretrain.batch_size", pretrain_batch_size, "pretraining batch size"),
      FS_REAL("pretrain.lr", pretrain_lr, "pretraining learning rate"),
      FS_STR("pretrain.pool", pretrain_pool,
             "pretraining images: train (train split), all (whole dataset), synthetic, or an SSLD path"),
      FS_INT("pretrain.pool_per_class", pool_per_class, "synthetic pool: images per class"),
      FS_U64("pretrain.pool_seed", pool_seed, "synthetic pool: generator seed"),
      FS_INT("finetune.epochs", finetune_epochs, "maximum fine-tuning epochs"),
      FS_INT("finetune.batch_size", finetune_batch_size, "fine-tuning batch size"),
      FS_REAL("finetune.lr", finetune_lr, "fine-tuning learning rate"),
      FS_INT("finetune.freeze_boundary", freeze_boundary, "freeze stem and stages 1..b; -1 = all but the last stage"),
      FS_REAL("finetune.val_fraction", val_fraction, "validation share of the train split"),
      FS_INT("finetune.patience", patience, "early-stopping patience in epochs"),
      FS_REAL("finetune.min_delta", min_delta, "smallest improvement that resets patience"),
      KeyDef{"finetune.monitor", "val_loss, val_accuracy or val_f1",
             [](RunConfig& c, const std::string& v) { c.monitor = parse_monitor(v); },
             [](const RunConfig& c) { return std::string(monitor_name(c.monitor)); }},
      FS_REAL("adam.beta1", adam_beta1, "first-moment decay"),
      FS_REAL("adam.beta2", adam_beta2, "second-moment decay"),
      FS_REAL("adam.eps", adam_eps, "denominator epsilon"),
      FS_INT("eval.batch_size", eval_batch_size, "evaluation batch size"),
      KeyDef{"eval.f1", "F1 averaging: macro, micro or weighted",
             [](RunConfig& c, const std::string& v) { c.f1_average = parse_f1_average(v); },
             [](const RunConfig& c) { return std::string(f1_average_name(c.f1_average)); }},
      FS_U64("seed", seed, "model initialisation and training seed"),
      KeyDef{"ablate.seeds", "seeds of the ablation runs",
             [](RunConfig& c, const std::string& v) { c.ablate_seeds = parse_list<std::uint64_t>("ablate.seeds", v); },
             [](const RunConfig& c) { return join(c.ablate_seeds); }},
      FS_STR("out", out_dir, "output directory"),
  };
  return table;
}

#undef FS_INT
#undef FS_U64
#undef FS_REAL
#undef FS_BOOL
#undef FS_STR

const KeyDef& find_key(const std::string& key) {
  for (const auto& k : key_table()) {
    if (key == k.key) return k;
  }
  throw Error(Errc::config, "unknown config key '" + key + "'");
}

}  // namespace

bool RunConfig::operator==(const RunConfig& other) const {
  for (const auto& k : key_table()) {
    if (k.get(*this) != k.get(other)) return false;
  }
  return true;
}

void RunConfig::validate() const {
  auto bad = [](const std::string& msg) { throw Error(Errc::config, msg); };
  if (data_path.empty()) bad("data.path must not be empty");
  if (data_classes < 2) bad("data.classes must be at least 2");
  if (data_per_class < 2) bad("data.per_class must be at least 2");
  if (data_size < 8) bad("data.size must be at least 8");
  if (split.per_class_train <= 0 || split.per_class_test <= 0) bad("split counts must be positive");
  if (head != "projection" && head != "identity") bad("model.head must be projection or identity");
  if (head == "projection" && proj_dim < 2) bad("model.proj_dim must be at least 2");
  if (pool_per_class < 2) bad("pretrain.pool_per_class must be at least 2");
  if (pretrain_pool.empty()) bad("pretrain.pool must not be empty");
  if (ablate_seeds.size() < 3) bad("ablate.seeds needs at least three seeds");
  if (out_dir.empty()) bad("out must not be empty");
  try {
    backbone(3, data_size).validate();
  } catch (const Error& e) {
    bad(e.what());
  }
  pretrain_config(aug.out_size).validate();
  finetune_config().validate();
  if (freeze_boundary < -1 || freeze_boundary > static_cast<int>(stage_channels.size())) {
    bad("finetune.freeze_boundary must lie in [-1, number of stages]");
  }
}

BackboneConfig RunConfig::backbone(int input_channels, int input_size) const {
  BackboneConfig b;
  b.input_channels = input_channels;
  b.input_size = input_size;
  b.stage_channels = stage_channels;
  b.blocks_per_stage = blocks_per_stage;
  b.embedding_dim = embedding_dim;
  return b;
}

PretrainConfig RunConfig::pretrain_config(int input_size) const {
  PretrainConfig p;
  p.epochs = pretrain_epochs;
  p.batch_size = pretrain_batch_size;
  p.aug = aug;
  p.aug.out_size = input_size;
  p.contrastive = contrastive;
  p.adam = AdamConfig{pretrain_lr, adam_beta1, adam_beta2, adam_eps};
  p.seed = seed;
  return p;
}

FinetuneConfig RunConfig::finetune_config() const {
  FinetuneConfig f;
  f.epochs = finetune_epochs;
  f.batch_size = finetune_batch_size;
  f.freeze_boundary = freeze_boundary;
  f.adam = AdamConfig{finetune_lr, adam_beta1, adam_beta2, adam_eps};
  f.early_stop = EarlyStopConfig{patience, min_delta};
  f.monitor = monitor;
  f.val_fraction = val_fraction;
  f.f1_average = f1_average;
  f.eval_batch_size = eval_batch_size;
  f.seed = seed;
  return f;
}

AblationConfig RunConfig::ablation_config(int input_channels, int input_size) const {
  AblationConfig a;
  a.backbone = backbone(input_channels, input_size);
  a.proj_dim = head == "identity" ? 0 : proj_dim;
  a.pretrain = pretrain_config(input_size);
  a.finetune = finetune_config();
  a.split = split;
  a.seeds = ablate_seeds;
  a.eval_batch_size = eval_batch_size;
  return a;
}

std::vector<ConfigKey> config_keys() {
  const RunConfig defaults;
  std::vector<ConfigKey> out;
  for (const auto& k : key_table()) out.push_back({k.key, k.get(defaults), k.doc});
  return out;
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  find_key(key).set(config, value);
}

std::string get_config_value(const RunConfig& config, const std::string& key) { return find_key(key).get(config); }

RunConfig parse_config(const std::string& text) {
  RunConfig config;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(Errc::config, "config line " + std::to_string(lineno) + ": expected key = value");
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) {
      throw Error(Errc::config, "config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    set_config_value(config, key, value);
  }
  return config;
}

RunConfig load_config(const std::string& path) {
  const auto bytes = io::read_file(path);
  return parse_config(std::string(bytes.begin(), bytes.end()));
}

std::string serialize_config(const RunConfig& config) {
  std::string out;
  for (const auto& k : key_table()) out += std::string(k.key) + " = " + k.get(config) + "\n";
  return out;
}

}  // namespace fewshot
