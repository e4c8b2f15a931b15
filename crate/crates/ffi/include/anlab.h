#ifndef ANLAB_H
#define ANLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
typedef enum AnlabStatus {
  ANLAB_STATUS_OK = 0,
  // A required pointer argument was null.
  ANLAB_STATUS_NULL_POINTER = 1,
  ANLAB_STATUS_INVALID_ARGUMENT = 2,
  ANLAB_STATUS_CONFIG = 3,
  ANLAB_STATUS_SHAPE_MISMATCH = 4,
  ANLAB_STATUS_NUMERICAL = 5,
  ANLAB_STATUS_IO = 6,
  ANLAB_STATUS_FORMAT = 7,
  // Output buffer too small; the required size was reported.
  ANLAB_STATUS_BUFFER_TOO_SMALL = 8,
  // Internal error; the library caught a panic.
  ANLAB_STATUS_INTERNAL = 9,
} AnlabStatus;

// Opaque model handle.
typedef struct AnlabModel AnlabModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a
// success. Valid until the next call into the library.
const char *anlab_last_error(void);

// Residual factor `(1 − 2α + 2α²)^(−1/2)`.
double anlab_lerp_factor(double alpha);

// `1/√2`.
double anlab_classic_residual_factor(void);

// `√(d_in/d_out)`.
//
// # Safety
// `out` must be null or point to writable memory for one double.
enum AnlabStatus anlab_linear_factor(size_t d_in, size_t d_out, double *out);

// Parameter count of a model config given as JSON, without building it.
//
// # Safety
// `config_json` must be null or a NUL-terminated string; `out` null or
// writable.
enum AnlabStatus anlab_param_count_for_config(const char *config_json, uint64_t *out);

// Builds a freshly initialized model.
//
// # Safety
// `config_json` must be null or a NUL-terminated string; `out` null or
// writable. On success `*out` owns a handle for [`anlab_model_free`].
enum AnlabStatus anlab_model_new(const char *config_json, uint64_t seed, struct AnlabModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle from this library not yet freed.
void anlab_model_free(struct AnlabModel *model);

// # Safety
// `model` must be a live handle or null; `out` null or writable.
enum AnlabStatus anlab_model_param_count(const struct AnlabModel *model, uint64_t *out);

// # Safety
// `model` must be a live handle or null; `out` null or writable.
enum AnlabStatus anlab_model_vocab_size(const struct AnlabModel *model, size_t *out);

// Logits for `batch × seq` token ids, written row-major as
// `batch × seq × vocab` floats into `logits` of capacity `logits_len`.
//
// # Safety
// `tokens` must point to `batch·seq` ids and `logits` to `logits_len`
// writable floats.
enum AnlabStatus anlab_model_forward(const struct AnlabModel *model,
                                     const uint32_t *tokens,
                                     size_t batch,
                                     size_t seq,
                                     float *logits,
                                     size_t logits_len);

// Writes the model as a checkpoint file.
//
// # Safety
// `model` must be a live handle or null; `path` null or NUL-terminated.
enum AnlabStatus anlab_model_save(const struct AnlabModel *model, const char *path);

// Loads an f32 checkpoint; optimizer records are ignored.
//
// # Safety
// `path` must be null or NUL-terminated; `out` null or writable.
enum AnlabStatus anlab_model_load(const char *path, struct AnlabModel **out);

// Materialized model config as JSON. Writes at most `buf_len` bytes
// including the NUL; `*needed` receives the full size with NUL.
//
// # Safety
// `buf` must be null (size query) or hold `buf_len` bytes; `needed`
// null or writable.
enum AnlabStatus anlab_model_config_json(const struct AnlabModel *model,
                                         char *buf,
                                         size_t buf_len,
                                         size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ANLAB_H */
