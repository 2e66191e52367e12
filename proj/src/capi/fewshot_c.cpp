#include "fewshot/fewshot.h"

#include <cstring>
#include <iostream>
#include <new>

#include "fewshot/checkpoint.hpp"
#include "fewshot/commands.hpp"
#include "fewshot/config.hpp"
#include "fewshot/io.hpp"

struct fewshot_config {
  fewshot::RunConfig value;
};

struct fewshot_dataset {
  fewshot::Dataset value;
};

struct fewshot_model {
  fewshot::Checkpoint source;
  fewshot::Model<float> model;
};

namespace {

thread_local std::string t_last_error;

template <typename F>
fewshot_status wrap(F&& body) {
  try {
    t_last_error.clear();
    body();
    return FEWSHOT_OK;
  } catch (const fewshot::Error& e) {
    t_last_error = e.what();
    return static_cast<fewshot_status>(fewshot::exit_code(e.code()));
  } catch (const std::bad_alloc&) {
    t_last_error = "out of memory";
  } catch (const std::exception& e) {
    t_last_error = e.what();
  } catch (...) {
    t_last_error = "unknown error";
  }
  return FEWSHOT_ERR_INTERNAL;
}

void require(const void* p, const char* what) {
  if (!p) throw fewshot::Error(fewshot::Errc::invalid_argument, std::string(what) + " must not be NULL");
}

void copy_out(const std::string& s, char* buf, std::size_t cap, std::size_t* needed) {
  if (needed) *needed = s.size();
  if (cap == 0) {
    if (!needed) throw fewshot::Error(fewshot::Errc::invalid_argument, "no output buffer");
    return;
  }
  require(buf, "buf");
  const std::size_t n = std::min(s.size(), cap - 1);
  std::memcpy(buf, s.data(), n);
  buf[n] = '\0';
  if (n < s.size()) throw fewshot::Error(fewshot::Errc::invalid_argument, "output buffer too small");
}

fewshot::RunOptions run_options(const fewshot_run_options* o) {
  fewshot::RunOptions r;
  if (!o) return r;
  if (o->config_path) r.config_path = o->config_path;
  if (o->out_dir) r.out_dir = o->out_dir;
  if (o->has_seed) r.seed = o->seed;
  r.quiet = o->quiet != 0;
  return r;
}

}  // namespace

extern "C" {

const char* fewshot_version(void) { return "1.0.0"; }

const char* fewshot_last_error(void) { return t_last_error.c_str(); }

fewshot_status fewshot_config_new(fewshot_config** out) {
  return wrap([&] {
    require(out, "out");
    *out = new fewshot_config{};
  });
}

fewshot_status fewshot_config_load(const char* path, fewshot_config** out) {
  return wrap([&] {
    require(path, "path");
    require(out, "out");
    *out = new fewshot_config{fewshot::load_config(path)};
  });
}

fewshot_status fewshot_config_parse(const char* text, fewshot_config** out) {
  return wrap([&] {
    require(text, "text");
    require(out, "out");
    *out = new fewshot_config{fewshot::parse_config(text)};
  });
}

fewshot_status fewshot_config_set(fewshot_config* config, const char* key, const char* value) {
  return wrap([&] {
    require(config, "config");
    require(key, "key");
    require(value, "value");
    fewshot::set_config_value(config->value, key, value);
  });
}

fewshot_status fewshot_config_get(const fewshot_config* config, const char* key, char* buf, size_t cap,
                                  size_t* needed) {
  return wrap([&] {
    require(config, "config");
    require(key, "key");
    copy_out(fewshot::get_config_value(config->value, key), buf, cap, needed);
  });
}

fewshot_status fewshot_config_serialize(const fewshot_config* config, char* buf, size_t cap, size_t* needed) {
  return wrap([&] {
    require(config, "config");
    copy_out(fewshot::serialize_config(config->value), buf, cap, needed);
  });
}

fewshot_status fewshot_config_save(const fewshot_config* config, const char* path) {
  return wrap([&] {
    require(config, "config");
    require(path, "path");
    fewshot::io::write_text_atomic(path, fewshot::serialize_config(config->value));
  });
}

fewshot_status fewshot_config_describe(char* buf, size_t cap, size_t* needed) {
  return wrap([&] { copy_out(fewshot::describe_config(), buf, cap, needed); });
}

void fewshot_config_free(fewshot_config* config) { delete config; }

fewshot_status fewshot_dataset_generate(int num_classes, int per_class, int image_size, uint64_t seed,
                                        fewshot_dataset** out) {
  return wrap([&] {
    require(out, "out");
    *out = new fewshot_dataset{fewshot::generate_synthetic_dataset(num_classes, per_class, image_size, seed)};
  });
}

fewshot_status fewshot_dataset_load(const char* path, fewshot_dataset** out) {
  return wrap([&] {
    require(path, "path");
    require(out, "out");
    *out = new fewshot_dataset{fewshot::load_dataset(path)};
  });
}

fewshot_status fewshot_dataset_save(const fewshot_dataset* dataset, const char* path) {
  return wrap([&] {
    require(dataset, "dataset");
    require(path, "path");
    fewshot::save_dataset(dataset->value, path);
  });
}

fewshot_status fewshot_dataset_info(const fewshot_dataset* dataset, size_t* count, int* num_classes, int* channels,
                                    int* height, int* width) {
  return wrap([&] {
    require(dataset, "dataset");
    const auto& d = dataset->value;
    if (count) *count = d.size();
    if (num_classes) *num_classes = d.num_classes;
    const bool any = !d.images.empty();
    if (channels) *channels = any ? static_cast<int>(d.images.front().channels) : 0;
    if (height) *height = any ? static_cast<int>(d.images.front().height) : 0;
    if (width) *width = any ? static_cast<int>(d.images.front().width) : 0;
  });
}

fewshot_status fewshot_dataset_class_count(const fewshot_dataset* dataset, int class_id, size_t* count) {
  return wrap([&] {
    require(dataset, "dataset");
    require(count, "count");
    const auto counts = dataset->value.class_counts();
    if (class_id < 0 || static_cast<std::size_t>(class_id) >= counts.size()) {
      throw fewshot::Error(fewshot::Errc::invalid_argument, "class id out of range");
    }
    *count = counts[static_cast<std::size_t>(class_id)];
  });
}

void fewshot_dataset_free(fewshot_dataset* dataset) { delete dataset; }

fewshot_status fewshot_checkpoint_load(const char* path, fewshot_model** out) {
  return wrap([&] {
    require(path, "path");
    require(out, "out");
    auto ckpt = fewshot::load_checkpoint(path);
    auto model = fewshot::model_from_checkpoint(ckpt);
    *out = new fewshot_model{std::move(ckpt), std::move(model)};
  });
}

fewshot_status fewshot_checkpoint_save(const fewshot_model* model, const char* path) {
  return wrap([&] {
    require(model, "model");
    require(path, "path");
    const auto& src = model->source;
    auto ckpt = fewshot::capture_checkpoint(model->model, src.phase, src.epochs, src.adam ? &*src.adam : nullptr,
                                            src.config_text);
    ckpt.comment = src.comment;
    fewshot::save_checkpoint(ckpt, path);
  });
}

fewshot_status fewshot_model_info(const fewshot_model* model, int* head_kind, int* head_dim, size_t* num_tensors,
                                  size_t* num_values) {
  return wrap([&] {
    require(model, "model");
    const auto& m = model->model;
    if (head_kind) *head_kind = static_cast<int>(m.head_kind());
    if (head_dim) *head_dim = m.head_dim();
    if (num_tensors) *num_tensors = m.params().size();
    if (num_values) {
      std::size_t n = 0;
      for (const auto& e : m.params()) n += e.tensor.numel();
      *num_values = n;
    }
  });
}

fewshot_status fewshot_model_config_text(const fewshot_model* model, char* buf, size_t cap, size_t* needed) {
  return wrap([&] {
    require(model, "model");
    copy_out(model->source.config_text, buf, cap, needed);
  });
}

fewshot_status fewshot_evaluate(fewshot_model* model, const fewshot_dataset* dataset, int batch_size,
                                fewshot_metrics* out) {
  return wrap([&] {
    require(model, "model");
    require(dataset, "dataset");
    require(out, "out");
    const auto ev = fewshot::evaluate(model->model, dataset->value, batch_size);
    out->accuracy = ev.accuracy;
    out->macro_f1 = ev.macro_f1;
    out->loss = ev.loss;
    out->samples = dataset->value.size();
  });
}

fewshot_status fewshot_confusion(fewshot_model* model, const fewshot_dataset* dataset, int batch_size,
                                 uint64_t* counts, size_t cap) {
  return wrap([&] {
    require(model, "model");
    require(dataset, "dataset");
    require(counts, "counts");
    const auto ev = fewshot::evaluate(model->model, dataset->value, batch_size);
    const auto c = ev.confusion.classes();
    if (cap < c * c) throw fewshot::Error(fewshot::Errc::invalid_argument, "confusion buffer too small");
    for (std::size_t t = 0; t < c; ++t) {
      for (std::size_t p = 0; p < c; ++p) counts[t * c + p] = ev.confusion.at(t, p);
    }
  });
}

void fewshot_model_free(fewshot_model* model) { delete model; }

int fewshot_cmd_gen_data(int num_classes, int per_class, int image_size, uint64_t seed, const char* path,
                         int quiet) {
  fewshot::GenDataOptions o;
  o.classes = num_classes;
  o.per_class = per_class;
  o.size = image_size;
  o.seed = seed;
  if (path) o.path = path;
  o.quiet = quiet != 0;
  return fewshot::cmd_gen_data(o, std::cout, std::cerr);
}

int fewshot_cmd_pretrain(const fewshot_run_options* options) {
  return fewshot::cmd_pretrain(run_options(options), std::cout, std::cerr);
}

int fewshot_cmd_finetune(const fewshot_run_options* options, const char* init_checkpoint, int scratch) {
  fewshot::FinetuneOptions o;
  o.run = run_options(options);
  if (init_checkpoint) o.init = init_checkpoint;
  o.scratch = scratch != 0;
  return fewshot::cmd_finetune(o, std::cout, std::cerr);
}

int fewshot_cmd_eval(const fewshot_run_options* options, const char* checkpoint, const char* data_path,
                     const char* split) {
  fewshot::EvalOptions o;
  o.run = run_options(options);
  if (checkpoint) o.checkpoint = checkpoint;
  if (data_path) o.data = data_path;
  if (split) o.split = split;
  return fewshot::cmd_eval(o, std::cout, std::cerr);
}

int fewshot_cmd_ablate(const fewshot_run_options* options) {
  return fewshot::cmd_ablate(run_options(options), std::cout, std::cerr);
}

}  // extern "C"
