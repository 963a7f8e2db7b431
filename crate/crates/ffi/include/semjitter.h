#ifndef SEMJITTER_H
#define SEMJITTER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SjStatus {
  SJ_STATUS_OK = 0,
  SJ_STATUS_NULL_POINTER = 1,
  SJ_STATUS_INVALID_INPUT = 2,
  SJ_STATUS_CONFIG = 3,
  SJ_STATUS_FORMAT = 4,
  SJ_STATUS_IO = 5,
  SJ_STATUS_NUMERICAL = 6,
  SJ_STATUS_INSUFFICIENT_DATA = 7,
  SJ_STATUS_UNSUPPORTED = 8,
  SJ_STATUS_PANIC = 9,
} SjStatus;

typedef enum SjModelKind {
  SJ_MODEL_KIND_RANKSVM_LINEAR = 0,
  SJ_MODEL_KIND_RANKSVM_LOCAL = 1,
  SJ_MODEL_KIND_RANKNET = 2,
  SJ_MODEL_KIND_CLASSIFIER = 3,
  SJ_MODEL_KIND_PRIOR = 4,
} SjModelKind;

/**
 * A model file loaded for scoring.
 */
typedef struct SjModel SjModel;

/**
 * Procedural world renderer.
 */
typedef struct SjWorld SjWorld;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *sj_last_error_message(void);

/**
 * Stable 64-bit seed for `label` under `master_seed`.
 *
 * # Safety
 * `label` must be a nul-terminated string; `out` must be writable.
 */
enum SjStatus sj_derive_seed(uint64_t master_seed, const char *label, uint64_t *out);

/**
 * World with the library's default configuration and the given JND
 * fraction.
 *
 * # Safety
 * `out` must be writable.
 */
enum SjStatus sj_world_new(double jnd_fraction, struct SjWorld **out);

/**
 * # Safety
 * `world` must come from [`sj_world_new`] and not be used afterwards.
 */
void sj_world_free(struct SjWorld *world);

/**
 * Image width, height, attribute count and latent count.
 *
 * # Safety
 * `world` must be live; every out pointer must be writable.
 */
enum SjStatus sj_world_shape(const struct SjWorld *world,
                             size_t *width,
                             size_t *height,
                             size_t *n_attributes,
                             size_t *n_latents);

/**
 * Renders `(y, z)` into `out_pixels`, which must hold `out_len ==
 * width * height * 3` values.
 *
 * # Safety
 * Buffers must be valid for their stated lengths.
 */
enum SjStatus sj_world_render(const struct SjWorld *world,
                              const double *y,
                              size_t n_y,
                              const double *z,
                              size_t n_z,
                              double *out_pixels,
                              size_t out_len);

/**
 * Ground-truth order of two strength vectors on `attribute`: 1 when A
 * shows more, -1 when B does, 0 when the gap is below the JND.
 *
 * # Safety
 * `y_a` and `y_b` hold `n_y` values; `out` is writable.
 */
enum SjStatus sj_world_compare(const struct SjWorld *world,
                               size_t attribute,
                               const double *y_a,
                               const double *y_b,
                               size_t n_y,
                               int32_t *out);

/**
 * Loads a model file written by the `semjitter` tool.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum SjStatus sj_model_load(const char *path, struct SjModel **out);

/**
 * # Safety
 * `model` must come from [`sj_model_load`] and not be used afterwards.
 */
void sj_model_free(struct SjModel *model);

/**
 * Model kind and ranked attribute (-1 when the model has none).
 *
 * # Safety
 * `model` must be live; out pointers must be writable.
 */
enum SjStatus sj_model_info(const struct SjModel *model,
                            enum SjModelKind *kind,
                            int64_t *attribute);

/**
 * Attribute score of one image. Local RankSVM models only compare pairs
 * and return `Unsupported` here.
 *
 * # Safety
 * `pixels` holds `width * height * 3` values; `out` is writable.
 */
enum SjStatus sj_model_score(const struct SjModel *model,
                             const double *pixels,
                             size_t width,
                             size_t height,
                             double *out);

/**
 * Writes 1 to `out` when image A is predicted to show the attribute more
 * than image B, otherwise 0.
 *
 * # Safety
 * `pixels_a` and `pixels_b` hold `width * height * 3` values each; `out`
 * is writable.
 */
enum SjStatus sj_model_compare(const struct SjModel *model,
                               const double *pixels_a,
                               const double *pixels_b,
                               size_t width,
                               size_t height,
                               int32_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEMJITTER_H */
