#ifndef MGSD_H
#define MGSD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MgsdStatus {
  MGSD_STATUS_OK = 0,
  MGSD_STATUS_NULL_POINTER = 1,
  MGSD_STATUS_INVALID_ARGUMENT = 2,
  MGSD_STATUS_IO = 3,
  /**
   * Malformed checkpoint or feature file.
   */
  MGSD_STATUS_FORMAT = 4,
  MGSD_STATUS_CONFIG = 5,
  MGSD_STATUS_SHAPE = 6,
  MGSD_STATUS_DATA = 7,
  MGSD_STATUS_DEGENERATE = 8,
  MGSD_STATUS_PANIC = 9,
} MgsdStatus;

/**
 * A loaded model. Opaque to C.
 */
typedef struct MgsdModel MgsdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint. On success `*out` owns a model to be released with
 * [`mgsd_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MgsdStatus mgsd_model_load(const char *path, struct MgsdModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`mgsd_model_load`] and not be used afterwards.
 */
void mgsd_model_free(struct MgsdModel *model);

/**
 * Number of SSL layers and feature width the model expects.
 *
 * # Safety
 * All pointers must be valid.
 */
enum MgsdStatus mgsd_model_dims(const struct MgsdModel *model, size_t *layers, size_t *dim);

/**
 * Scores one utterance given as `[layers][frames][dim]` float32 values,
 * writing its log-likelihood ratio (bona fide over spoof) to `out_llr`.
 *
 * # Safety
 * `features` must hold `layers * frames * dim` floats.
 */
enum MgsdStatus mgsd_model_score(const struct MgsdModel *model,
                                 const float *features,
                                 size_t layers,
                                 size_t frames,
                                 size_t dim,
                                 double *out_llr);

/**
 * Scores a feature file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; the other pointers must be valid.
 */
enum MgsdStatus mgsd_model_score_file(const struct MgsdModel *model,
                                      const char *path,
                                      double *out_llr);

/**
 * Equal error rate (a fraction) of bona fide and spoof scores, higher
 * meaning more bona fide. `out_threshold` may be null.
 *
 * # Safety
 * Arrays must hold the stated number of values.
 */
enum MgsdStatus mgsd_eer(const double *bona,
                         size_t n_bona,
                         const double *spoof,
                         size_t n_spoof,
                         double *out_eer,
                         double *out_threshold);

/**
 * Linear CKA between row-major `rows × cols_a` and `rows × cols_b`
 * matrices.
 *
 * # Safety
 * Arrays must hold the stated number of values.
 */
enum MgsdStatus mgsd_linear_cka(const double *a,
                                size_t cols_a,
                                const double *b,
                                size_t cols_b,
                                size_t rows,
                                double *out);

/**
 * Message of the last failed call on this thread, empty after a success.
 * Valid until the next call on the same thread.
 */
const char *mgsd_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *mgsd_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MGSD_H */
