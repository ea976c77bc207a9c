#ifndef SNR_H
#define SNR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SnrStatus {
  SNR_STATUS_OK = 0,
  SNR_STATUS_NULL_POINTER = 1,
  SNR_STATUS_INVALID_ARGUMENT = 2,
  SNR_STATUS_SHAPE = 3,
  SNR_STATUS_IO = 4,
  SNR_STATUS_CHECKPOINT = 5,
  SNR_STATUS_NUMERIC = 6,
  SNR_STATUS_EMPTY = 7,
  SNR_STATUS_PANIC = 8,
  SNR_STATUS_OTHER = 9,
} SnrStatus;

/**
 * Opaque model handle.
 */
typedef struct SnrModel SnrModel;

/**
 * Retrieval summary filled by [`snr_evaluate`].
 */
typedef struct SnrRetrieval {
  double map;
  double rank1;
  double rank5;
  double rank10;
  double rank20;
} SnrRetrieval;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *snr_last_error(void);

/**
 * Loads the checkpoint directory `dir` into `*out`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SnrStatus snr_model_load(const char *dir, struct SnrModel **out);

/**
 * Releases a handle from [`snr_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must come from [`snr_model_load`] and not be used afterwards.
 */
void snr_model_free(struct SnrModel *model);

/**
 * Writes `[channels, height, width]` of the expected input to `out[0..3]`.
 *
 * # Safety
 * `model` must be a live handle and `out` must hold 3 values.
 */
enum SnrStatus snr_model_input_shape(const struct SnrModel *model, size_t *out);

/**
 * Width of the retrieval features returned by [`snr_model_embed`].
 *
 * # Safety
 * `model` must be a live handle and `out` valid.
 */
enum SnrStatus snr_model_embedding_dim(const struct SnrModel *model, size_t *out);

/**
 * Number of trainable scalars.
 *
 * # Safety
 * `model` must be a live handle and `out` valid.
 */
enum SnrStatus snr_model_parameter_count(const struct SnrModel *model, uint64_t *out);

/**
 * Embeds `n` images stored row-major as `[n, c, h, w]` into `out`,
 * which must hold `n * embedding_dim` values (`out_len`).
 *
 * # Safety
 * `images` must hold `n * c * h * w` values and `out` `out_len` values.
 */
enum SnrStatus snr_model_embed(const struct SnrModel *model,
                               const float *images,
                               size_t n,
                               float *out,
                               size_t out_len);

/**
 * Learning rate at `epoch` under the default schedule.
 */
double snr_lr_schedule(uint32_t epoch);

/**
 * Cosine distance `0.5 - a.b / (2 |a| |b|)` of two length-`len` vectors.
 *
 * # Safety
 * `a` and `b` must hold `len` values and `out` must be valid.
 */
enum SnrStatus snr_cosine_distance(const double *a, const double *b, size_t len, double *out);

/**
 * mAP and CMC of `nq` query rows against `ng` gallery rows (`dim` wide)
 * under cosine distance.
 *
 * # Safety
 * Feature buffers must hold `nq * dim` and `ng * dim` values, label
 * buffers `nq` and `ng` values, and `out` must be valid.
 */
enum SnrStatus snr_evaluate(const float *query,
                            const uint64_t *query_labels,
                            size_t nq,
                            const float *gallery,
                            const uint64_t *gallery_labels,
                            size_t ng,
                            size_t dim,
                            struct SnrRetrieval *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SNR_H */
