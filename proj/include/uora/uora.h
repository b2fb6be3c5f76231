#ifndef UORA_UORA_H
#define UORA_UORA_H

/* C interface to the uora toolkit. Every call returns a status; on failure
 * uora_last_error() describes what went wrong on the calling thread. */

#include <stddef.h>
#include <stdint.h>

#if defined(UORA_BUILDING_LIBRARY)
#define UORA_API __attribute__((visibility("default")))
#else
#define UORA_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum uora_status {
  UORA_OK = 0,
  UORA_ERR_SHAPE = 1,
  UORA_ERR_CONFIG = 2,
  UORA_ERR_BOUNDS = 3,
  UORA_ERR_DECODE = 4,
  UORA_ERR_VERSION = 5,
  UORA_ERR_DIVERGENCE = 6,
  UORA_ERR_CHECKSUM = 7,
  UORA_ERR_IO = 8,
  UORA_ERR_INTERNAL = 9,
  UORA_ERR_ARGUMENT = 10
} uora_status;

UORA_API const char* uora_version(void);
UORA_API const char* uora_last_error(void);
UORA_API const char* uora_status_name(uora_status status);

/* Strings returned through char** are owned by the caller. */
UORA_API void uora_string_free(char* s);

/* Parameter budgets. method is "lora", "vera" or "uora". */
UORA_API uora_status uora_count_params(const char* method, uint64_t l_tuned,
                                       uint64_t d_model, uint64_t rank,
                                       uint64_t* count);
UORA_API uora_status uora_format_count(uint64_t count, char** text);

/* Experiments */
typedef struct uora_experiment uora_experiment;

UORA_API uora_status uora_experiment_load(const char* path, uora_experiment** out);
UORA_API uora_status uora_experiment_parse(const char* json_text, uora_experiment** out);
UORA_API void uora_experiment_destroy(uora_experiment* exp);

UORA_API uora_status uora_experiment_set_out(uora_experiment* exp, const char* dir);
/* "0,1,2" or "0-4" */
UORA_API uora_status uora_experiment_set_seeds(uora_experiment* exp, const char* list);
/* "KEY=V1,V2"; replaces an existing axis with the same key. */
UORA_API uora_status uora_experiment_add_grid(uora_experiment* exp, const char* flag);
/* "csv" or "jsonl" */
UORA_API uora_status uora_experiment_set_format(uora_experiment* exp, const char* format);
/* "final" or "best" */
UORA_API uora_status uora_experiment_set_selection(uora_experiment* exp, const char* sel);
UORA_API uora_status uora_experiment_set_jobs(uora_experiment* exp, size_t jobs);
/* JSON text of the resolved base config. */
UORA_API uora_status uora_experiment_config_json(const uora_experiment* exp, char** text);
UORA_API size_t uora_experiment_cell_count(const uora_experiment* exp);

/* Runs every cell and seed. Returns UORA_ERR_DIVERGENCE when any run
 * diverged; completed runs and the summary are still written. */
UORA_API uora_status uora_experiment_run(uora_experiment* exp, size_t* completed,
                                         size_t* diverged);

/* Summary CSV recomputed from the run files under dir. */
UORA_API uora_status uora_report(const char* dir, char** csv);

/* Checkpoint verification */
typedef struct uora_verify_report uora_verify_report;

UORA_API uora_status uora_verify_checkpoint(const char* path, uora_verify_report** out);
UORA_API void uora_verify_destroy(uora_verify_report* report);
/* 0 FULL, 1 COMPACT */
UORA_API int uora_verify_mode(const uora_verify_report* report);
UORA_API int uora_verify_all_pass(const uora_verify_report* report);
UORA_API size_t uora_verify_layer_count(const uora_verify_report* report);
/* Pointers stay valid until the report is destroyed. */
UORA_API uora_status uora_verify_layer(const uora_verify_report* report, size_t index,
                                       uint32_t* layer_id, const char** name,
                                       int* pass, int* replayed, const char** detail);

/* Single adapted linear layer over caller-supplied frozen weights. */
typedef struct uora_layer uora_layer;

typedef struct uora_layer_options {
  const char* method; /* "lora", "vera", "uora" */
  const char* init;   /* "orthogonal", "kaiming", "xavier", "random" */
  double gain;
  size_t rank;
  uint64_t seed;
  double alpha; /* interpolation factor used by uora_layer_reinit */
} uora_layer_options;

/* weight is d_out x d_in, row-major; bias may be NULL. */
UORA_API uora_status uora_layer_create(const double* weight, const double* bias,
                                       size_t d_out, size_t d_in,
                                       const uora_layer_options* options,
                                       uora_layer** out);
UORA_API void uora_layer_destroy(uora_layer* layer);
UORA_API size_t uora_layer_trainable_count(const uora_layer* layer);
/* x is n x d_in, y is n x d_out, both row-major. */
UORA_API uora_status uora_layer_forward(const uora_layer* layer, const double* x,
                                        size_t n, double* y);
UORA_API uora_status uora_layer_forward_merged(const uora_layer* layer, const double* x,
                                               size_t n, double* y);
/* VeRA/UORA scaling vectors. */
UORA_API uora_status uora_layer_set_vectors(uora_layer* layer, const double* d,
                                            const double* b);
/* Interpolates row dim of A and column dim of B toward a fresh draw. */
UORA_API uora_status uora_layer_reinit(uora_layer* layer, size_t dim, int64_t step);
UORA_API size_t uora_layer_event_count(const uora_layer* layer);
UORA_API uora_status uora_layer_save(const uora_layer* layer, const char* path,
                                     int compact);

#ifdef __cplusplus
}
#endif

#endif
