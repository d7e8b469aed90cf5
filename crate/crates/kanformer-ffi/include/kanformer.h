/* C interface for the kanformer library. */

#pragma once

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. Zero is success; negative values are errors.
 */
typedef enum KfStatus {
  Ok = 0,
  NullArgument = -1,
  InvalidArgument = -2,
  Io = -3,
  Format = -4,
  Incompatible = -5,
  Internal = -6,
} KfStatus;

/**
 * Loaded model plus its parameters and the configured frame count.
 */
typedef struct KfModel KfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *kf_last_error_message(void);

/**
 * Build the model described by an experiment config (JSON) and restore
 * the checkpoint into it. Returns null on failure; check
 * [`kf_last_error_message`].
 *
 * # Safety
 * `config_path` and `checkpoint_path` must be NUL-terminated strings.
 */
struct KfModel *kf_model_load(const char *config_path, const char *checkpoint_path);

/**
 * Release a model handle. Null is accepted and ignored.
 *
 * # Safety
 * `model` must have come from [`kf_model_load`] and not be freed twice.
 */
void kf_model_free(struct KfModel *model);

/**
 * Feature width the model expects, or 0 for a null handle.
 *
 * # Safety
 * `model` must be a live handle from [`kf_model_load`].
 */
uint32_t kf_model_feature_dim(const struct KfModel *model);

/**
 * Score one utterance. `features` is a row-major `n_frames x feature_dim`
 * matrix; the sequence is standardized to the configured frame count
 * (head-crop / repeat-tile) before scoring. Higher score = more bonafide.
 *
 * # Safety
 * `model` must be a live handle; `features` must point to
 * `n_frames * feature_dim` floats; `out_score` must be writable.
 */
enum KfStatus kf_model_score(struct KfModel *model,
                             const float *features,
                             uint64_t n_frames,
                             uint64_t feature_dim,
                             double *out_score);

/**
 * Equal error rate of a bonafide/spoof score partition (higher score =
 * more bonafide). Writes the interpolated rate and crossing threshold.
 *
 * # Safety
 * `bonafide` and `spoof` must point to `n_bonafide` / `n_spoof` doubles;
 * output pointers must be writable (either may be null to skip).
 */
enum KfStatus kf_eer(const double *bonafide,
                     uint64_t n_bonafide,
                     const double *spoof,
                     uint64_t n_spoof,
                     double *out_eer,
                     double *out_threshold);

/**
 * Library version as a static string.
 */
const char *kf_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
