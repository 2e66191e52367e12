/* C interface to the fewshot library. All objects are opaque handles owned by
 * the caller and released with the matching *_free function. Functions return
 * a fewshot_status whose numeric value is also the command-line exit code;
 * fewshot_last_error() describes the most recent failure on the calling
 * thread. */
#ifndef FEWSHOT_FEWSHOT_H
#define FEWSHOT_FEWSHOT_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#if defined(FEWSHOT_BUILDING_LIBRARY)
#define FEWSHOT_API __declspec(dllexport)
#else
#define FEWSHOT_API __declspec(dllimport)
#endif
#else
#define FEWSHOT_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum fewshot_status {
  FEWSHOT_OK = 0,
  FEWSHOT_ERR_INTERNAL = 1,
  FEWSHOT_ERR_USAGE = 2,        /* invalid argument or configuration */
  FEWSHOT_ERR_IO = 3,           /* unreadable/unwritable file, malformed dataset or checkpoint */
  FEWSHOT_ERR_NUMERIC = 4,      /* NaN or Inf produced */
  FEWSHOT_ERR_INCOMPATIBLE = 5  /* architecture, class count or format version mismatch */
} fewshot_status;

typedef struct fewshot_config fewshot_config;
typedef struct fewshot_dataset fewshot_dataset;
typedef struct fewshot_model fewshot_model;

FEWSHOT_API const char* fewshot_version(void);
FEWSHOT_API const char* fewshot_last_error(void);

/* Copies a string result into buf (NUL-terminated when cap > 0). *needed, if
 * non-NULL, receives the full length excluding the terminator. A result that
 * does not fit is truncated and FEWSHOT_ERR_USAGE returned. cap 0 with a
 * non-NULL needed is a size query and returns FEWSHOT_OK. */

/* --- configuration --- */
FEWSHOT_API fewshot_status fewshot_config_new(fewshot_config** out);
FEWSHOT_API fewshot_status fewshot_config_load(const char* path, fewshot_config** out);
FEWSHOT_API fewshot_status fewshot_config_parse(const char* text, fewshot_config** out);
FEWSHOT_API fewshot_status fewshot_config_set(fewshot_config* config, const char* key, const char* value);
FEWSHOT_API fewshot_status fewshot_config_get(const fewshot_config* config, const char* key, char* buf, size_t cap,
                                              size_t* needed);
FEWSHOT_API fewshot_status fewshot_config_serialize(const fewshot_config* config, char* buf, size_t cap,
                                                    size_t* needed);
FEWSHOT_API fewshot_status fewshot_config_save(const fewshot_config* config, const char* path);
/* Every key with its documentation and default value. */
FEWSHOT_API fewshot_status fewshot_config_describe(char* buf, size_t cap, size_t* needed);
FEWSHOT_API void fewshot_config_free(fewshot_config* config);

/* --- datasets --- */
FEWSHOT_API fewshot_status fewshot_dataset_generate(int num_classes, int per_class, int image_size, uint64_t seed,
                                                    fewshot_dataset** out);
FEWSHOT_API fewshot_status fewshot_dataset_load(const char* path, fewshot_dataset** out);
FEWSHOT_API fewshot_status fewshot_dataset_save(const fewshot_dataset* dataset, const char* path);
FEWSHOT_API fewshot_status fewshot_dataset_info(const fewshot_dataset* dataset, size_t* count, int* num_classes,
                                                int* channels, int* height, int* width);
FEWSHOT_API fewshot_status fewshot_dataset_class_count(const fewshot_dataset* dataset, int class_id, size_t* count);
FEWSHOT_API void fewshot_dataset_free(fewshot_dataset* dataset);

/* --- checkpoints and evaluation --- */
typedef struct fewshot_metrics {
  double accuracy;
  double macro_f1;
  double loss; /* mean cross-entropy */
  size_t samples;
} fewshot_metrics;

FEWSHOT_API fewshot_status fewshot_checkpoint_load(const char* path, fewshot_model** out);
/* Writes the model with the optimizer state and config text it was loaded with. */
FEWSHOT_API fewshot_status fewshot_checkpoint_save(const fewshot_model* model, const char* path);
/* head_kind: 0 none, 1 projection, 2 identity, 3 classifier. */
FEWSHOT_API fewshot_status fewshot_model_info(const fewshot_model* model, int* head_kind, int* head_dim,
                                              size_t* num_tensors, size_t* num_values);
/* Copies the stored config text of the checkpoint the model came from. */
FEWSHOT_API fewshot_status fewshot_model_config_text(const fewshot_model* model, char* buf, size_t cap,
                                                     size_t* needed);
FEWSHOT_API fewshot_status fewshot_evaluate(fewshot_model* model, const fewshot_dataset* dataset, int batch_size,
                                            fewshot_metrics* out);
/* Row-major num_classes x num_classes counts, rows true class. */
FEWSHOT_API fewshot_status fewshot_confusion(fewshot_model* model, const fewshot_dataset* dataset, int batch_size,
                                             uint64_t* counts, size_t cap);
FEWSHOT_API void fewshot_model_free(fewshot_model* model);

/* --- commands (return exit codes; progress on stdout, errors on stderr) --- */
typedef struct fewshot_run_options {
  const char* config_path; /* NULL: built-in defaults */
  const char* out_dir;     /* NULL: the config's out key */
  int has_seed;
  uint64_t seed;
  int quiet;
} fewshot_run_options;

FEWSHOT_API int fewshot_cmd_gen_data(int num_classes, int per_class, int image_size, uint64_t seed,
                                     const char* path, int quiet);
FEWSHOT_API int fewshot_cmd_pretrain(const fewshot_run_options* options);
/* Exactly one of init_checkpoint (non-NULL) or scratch (non-zero). */
FEWSHOT_API int fewshot_cmd_finetune(const fewshot_run_options* options, const char* init_checkpoint, int scratch);
/* data_path NULL: the dataset named by the config; split "test", "train" or "all". */
FEWSHOT_API int fewshot_cmd_eval(const fewshot_run_options* options, const char* checkpoint, const char* data_path,
                                 const char* split);
FEWSHOT_API int fewshot_cmd_ablate(const fewshot_run_options* options);

#ifdef __cplusplus
}
#endif

#endif
