#ifndef MODALIGN_H
#define MODALIGN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every function.
typedef enum MaStatus {
  MA_STATUS_OK = 0,
  MA_STATUS_NULL_ARGUMENT = 1,
  MA_STATUS_INVALID_UTF8 = 2,
  // Rejected input: bad value, shape mismatch, unknown name.
  MA_STATUS_VALIDATION = 3,
  MA_STATUS_IO = 4,
  MA_STATUS_CHECKPOINT = 5,
  MA_STATUS_NUMERICAL = 6,
  // An output buffer is shorter than required.
  MA_STATUS_BUFFER_TOO_SMALL = 7,
  MA_STATUS_PANIC = 8,
} MaStatus;

// Detector loaded from a training run directory, with its token
// projection and registry.
typedef struct MaModel MaModel;

typedef struct MaRegistry MaRegistry;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *ma_version(void);

// Bytes needed to hold the last error message, including the terminator.
size_t ma_last_error_length(void);

// Copies the calling thread's last error message into `buf`. The message is
// empty after a successful call.
//
// # Safety
// `buf` must be valid for `len` bytes.
enum MaStatus ma_last_error(char *buf, size_t len);

// Loads the checkpoint and token registry of a training run directory.
//
// # Safety
// `run_dir` must be a NUL-terminated string; `out` must be writable.
enum MaStatus ma_model_load(const char *run_dir, struct MaModel **out);

// Releases a model; null is ignored.
//
// # Safety
// `model` must come from [`ma_model_load`] and not be used afterwards.
void ma_model_free(struct MaModel *model);

// # Safety
// `model` must be a live handle; the outputs must be writable.
enum MaStatus ma_model_dims(const struct MaModel *model,
                            size_t *num_queries,
                            size_t *num_classes,
                            size_t *d_model);

// Final-layer class probabilities (`N × C`, row-major) and `cxcywh` boxes
// (`N × 4`) for one row-major `height × width` image. With MoCA enabled,
// `modality` names the image's modality and the token averages its classes;
// it may be null otherwise.
//
// # Safety
// `image` must hold `height * width` values; `probs` and `boxes` must be
// writable for `probs_len` and `boxes_len` values.
enum MaStatus ma_model_predict(const struct MaModel *model,
                               const double *image,
                               size_t height,
                               size_t width,
                               const char *modality,
                               double *probs,
                               size_t probs_len,
                               double *boxes,
                               size_t boxes_len);

// Loads a token registry JSON file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MaStatus ma_registry_load(const char *path, struct MaRegistry **out);

// Releases a registry; null is ignored.
//
// # Safety
// `registry` must come from [`ma_registry_load`] and not be used afterwards.
void ma_registry_free(struct MaRegistry *registry);

// # Safety
// `registry` must be a live handle; the outputs must be writable.
enum MaStatus ma_registry_dims(const struct MaRegistry *registry, size_t *d_text, size_t *len);

// Copies the raw vector of `(modality, class)` into `out`.
//
// # Safety
// Strings must be NUL-terminated; `out` must be writable for `len` values.
enum MaStatus ma_registry_get(const struct MaRegistry *registry,
                              const char *modality,
                              const char *class_,
                              double *out,
                              size_t len);

// IoU of two `xyxy` boxes.
//
// # Safety
// `a` and `b` must hold 4 values; `out` must be writable.
enum MaStatus ma_iou(const double *a, const double *b, double *out);

// Mutual information (nats) of a row-major `nu × nv` joint table.
//
// # Safety
// `p` must hold `nu * nv` values; `out` must be writable.
enum MaStatus ma_exact_mi(const double *p, size_t nu, size_t nv, double *out);

// Exact InfoNCE bound `ln(1+K) − L` under the optimal critic, by
// enumeration. Small tables and `K` only.
//
// # Safety
// `p` must hold `nu * nv` values; `out` must be writable.
enum MaStatus ma_infonce_exact_bound(const double *p, size_t nu, size_t nv, size_t k, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MODALIGN_H */
