#ifndef R1POOL_H
#define R1POOL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define R1_OK 0

// Null pointer, bad UTF-8 or an index out of range.
#define R1_ERR_ARGUMENT 1

// Invalid configuration, input file or shape.
#define R1_ERR_CONFIG 2

// A loss or metric became NaN or infinite.
#define R1_ERR_NUMERIC 3

#define R1_ERR_IO 4

// The library panicked; the handle arguments should be discarded.
#define R1_ERR_PANIC 5

// Run configuration.
typedef struct R1Config R1Config;

// Accuracy matrix, `M[t][j]` in percent.
typedef struct R1Matrix R1Matrix;

// Generated task sequence.
typedef struct R1Tasks R1Tasks;

// Headline metrics. `transfer` is NaN when `has_transfer` is 0.
typedef struct R1Metrics {
  int32_t has_transfer;
  double transfer;
  double average;
  double last;
} R1Metrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. Owned by the
// library.
const char *r1_last_error(void);

// Library version as a static string.
const char *r1_version(void);

// Default configuration.
//
// # Safety
// `out` must be valid for writes.
int32_t r1_config_default(struct R1Config **out);

// Parses and validates a JSON configuration.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be valid for writes.
int32_t r1_config_from_json(const char *json, struct R1Config **out);

// Reads a JSON configuration file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for writes.
int32_t r1_config_load(const char *path, struct R1Config **out);

// Sets the training seed.
//
// # Safety
// `cfg` must be a live handle or null.
int32_t r1_config_set_seed(struct R1Config *cfg, uint64_t seed);

// Sets the task generator seed.
//
// # Safety
// `cfg` must be a live handle or null.
int32_t r1_config_set_task_seed(struct R1Config *cfg, uint64_t seed);

// Canonical JSON of the configuration. Free with `r1_string_free`.
//
// # Safety
// `cfg` must be a live handle; `out` must be valid for writes.
int32_t r1_config_to_json(const struct R1Config *cfg, char **out);

// # Safety
// `cfg` must be a handle from this library or null; it is invalid afterwards.
void r1_config_free(struct R1Config *cfg);

// Generates the task sequence described by `cfg`.
//
// # Safety
// `cfg` must be a live handle; `out` must be valid for writes.
int32_t r1_tasks_generate(const struct R1Config *cfg, struct R1Tasks **out);

// Number of tasks in the sequence, 0 for null.
//
// # Safety
// `tasks` must be a live handle or null.
size_t r1_tasks_count(const struct R1Tasks *tasks);

// # Safety
// `tasks` must be a handle from this library or null.
void r1_tasks_free(struct R1Tasks *tasks);

// Trains on every task in order and returns the accuracy matrix. When
// `out_dir` is non-null, checkpoints, `matrix.csv`, `metrics.json` and
// `collision.csv` are written there as well.
//
// # Safety
// `cfg` and `tasks` must be live handles; `out_dir` is null or a
// NUL-terminated string; `out` must be valid for writes.
int32_t r1_train(const struct R1Config *cfg,
                 const struct R1Tasks *tasks,
                 const char *out_dir,
                 struct R1Matrix **out);

// Builds a matrix from `tasks * tasks` row-major values.
//
// # Safety
// `data` must point to `tasks * tasks` doubles; `out` must be valid for
// writes.
int32_t r1_matrix_new(const double *data, size_t tasks, struct R1Matrix **out);

// Reads a matrix CSV with a `task_1,...` header.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for writes.
int32_t r1_matrix_load(const char *path, struct R1Matrix **out);

// Number of tasks, 0 for null.
//
// # Safety
// `m` must be a live handle or null.
size_t r1_matrix_tasks(const struct R1Matrix *m);

// Accuracy on task `j` after training through task `t` (both 0-based).
//
// # Safety
// `m` must be a live handle; `out` must be valid for writes.
int32_t r1_matrix_get(const struct R1Matrix *m, size_t t, size_t j, double *out);

// Transfer, Average and Last over the matrix as given.
//
// # Safety
// `m` must be a live handle; `out` must be valid for writes.
int32_t r1_matrix_metrics(const struct R1Matrix *m, struct R1Metrics *out);

// Full per-task report as pretty JSON, computed on the matrix rounded to
// two decimals. Free with `r1_string_free`.
//
// # Safety
// `m` must be a live handle; `out` must be valid for writes.
int32_t r1_matrix_report_json(const struct R1Matrix *m, char **out);

// Matrix as CSV text. Free with `r1_string_free`.
//
// # Safety
// `m` must be a live handle; `out` must be valid for writes.
int32_t r1_matrix_to_csv(const struct R1Matrix *m, char **out);

// # Safety
// `m` must be a handle from this library or null.
void r1_matrix_free(struct R1Matrix *m);

// # Safety
// `s` must be a string returned by this library or null.
void r1_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* R1POOL_H */
