#ifndef TOPW_H
#define TOPW_H

/* Generated by cbindgen from src/lib.rs. Do not edit by hand. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result code of every call.
typedef enum TopwStatus {
  TOPW_STATUS_OK = 0,
  // A required pointer argument was null.
  TOPW_STATUS_NULL_POINTER = 1,
  // A parameter or configuration value is out of range or malformed.
  TOPW_STATUS_INVALID_ARGUMENT = 2,
  // A configuration key is not recognized; the message lists valid keys.
  TOPW_STATUS_UNKNOWN_KEY = 3,
  // Buffer lengths disagree with each other or with the metric.
  TOPW_STATUS_DIMENSION = 4,
  // Input data is unusable (zero-norm row, non-finite value, no finite logit).
  TOPW_STATUS_INVALID_DATA = 5,
  // The handle was never issued or has already been released.
  TOPW_STATUS_INVALID_HANDLE = 6,
  // The crop did not fit into the caller's buffer; the report is still filled.
  TOPW_STATUS_BUFFER_TOO_SMALL = 7,
  // An internal panic was caught.
  TOPW_STATUS_INTERNAL = 8,
} TopwStatus;

// Final regime of a decode step.
typedef enum TopwRegime {
  TOPW_REGIME_PREFIX = 0,
  TOPW_REGIME_SINGLETON = 1,
} TopwRegime;

// Opaque metric handle. Zero is never issued.
typedef uint64_t TopwMetric;

// Per-step report filled by [`topw_process_logits`].
typedef struct TopwReport {
  size_t crop_len;
  size_t pool_size;
  size_t iterations_used;
  bool converged_early;
  enum TopwRegime regime;
  // Retained probability mass of the crop.
  double gamma;
  // Entropy of the renormalized crop, in nats.
  double crop_entropy;
  double elapsed_us;
} TopwReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on the calling thread, or an empty
// string after a successful call. Valid until the next call on this thread.
const char *topw_last_error(void);

// Library version as a static NUL-terminated string.
const char *topw_version(void);

// Comma-separated list of the keys accepted by [`topw_process_logits`], as a
// static NUL-terminated string.
const char *topw_config_keys(void);

// Builds a whitened metric from `n * m` row-major embeddings.
//
// `data_len` is the number of floats behind `data` and must equal `n * m`.
//
// # Safety
// `data` must be valid for reads of `data_len` floats and `out` valid for one write.
enum TopwStatus topw_metric_new(const float *data,
                                size_t data_len,
                                size_t n,
                                size_t m,
                                double epsilon,
                                TopwMetric *out);

// Releases a metric. Releasing an unknown or already released handle
// returns [`TopwStatus::InvalidHandle`] and has no other effect. Calls
// already running on the metric finish normally.
enum TopwStatus topw_metric_free(TopwMetric handle);

// Vocabulary size of a metric.
//
// # Safety
// `out` must be valid for one write.
enum TopwStatus topw_metric_len(TopwMetric handle, size_t *out);

// Distance between tokens `i` and `j`.
//
// # Safety
// `out` must be valid for one write.
enum TopwStatus topw_metric_distance(TopwMetric handle, size_t i, size_t j, double *out);

// Runs the Top-W decoder on one logits vector.
//
// Configuration is given as `n_pairs` key/value strings applied on top of
// the defaults; see [`topw_config_keys`]. `masked_out` receives `n_logits`
// floats: the original logit inside the crop and negative infinity outside.
// When `crop_out` is non-null it receives the crop in selection order; if
// `crop_capacity` is too small the call returns
// [`TopwStatus::BufferTooSmall`] with `masked_out` and `report` filled.
//
// # Safety
// Every non-null pointer must be valid for the stated number of elements;
// keys and values must be NUL-terminated strings.
enum TopwStatus topw_process_logits(TopwMetric handle,
                                    const float *logits,
                                    size_t n_logits,
                                    const char *const *keys,
                                    const char *const *values,
                                    size_t n_pairs,
                                    float *masked_out,
                                    size_t *crop_out,
                                    size_t crop_capacity,
                                    struct TopwReport *report);

// Applies a baseline truncation rule: `top_k:K`, `top_p:P`, `min_p:R` or
// `top_h:A`. Crop handling matches [`topw_process_logits`]; `crop_len`
// receives the crop size when non-null.
//
// # Safety
// As for [`topw_process_logits`]; `rule` must be a NUL-terminated string.
enum TopwStatus topw_apply_baseline(const float *logits,
                                    size_t n_logits,
                                    const char *rule,
                                    double sel_temperature,
                                    float *masked_out,
                                    size_t *crop_out,
                                    size_t crop_capacity,
                                    size_t *crop_len);

// Draws a token from the softmax of masked logits at `temperature`.
// Deterministic for a given seed.
//
// # Safety
// `masked` must be valid for `n` reads and `out` for one write.
enum TopwStatus topw_sample(const float *masked,
                            size_t n,
                            double temperature,
                            uint64_t seed,
                            size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TOPW_H */
