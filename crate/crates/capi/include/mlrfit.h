#ifndef MLRFIT_H
#define MLRFIT_H

/* Generated with cbindgen:0.29.4 */

/* Generated by cbindgen from crates/capi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum MlrStatus {
  MLR_STATUS_OK = 0,
  MLR_STATUS_NULL_POINTER = 1,
  MLR_STATUS_INVALID_ARGUMENT = 2,
  MLR_STATUS_DIMENSION = 3,
  MLR_STATUS_STRUCTURAL = 4,
  MLR_STATUS_NUMERICAL = 5,
  MLR_STATUS_IO = 6,
  MLR_STATUS_PARSE = 7,
  MLR_STATUS_NOT_CONVERGED = 8,
  MLR_STATUS_PANIC = 9,
} MlrStatus;

/**
 * Opaque inverse of a model, with its log-determinant.
 */
typedef struct MlrInverse MlrInverse;

/**
 * Opaque PSD MLR covariance model.
 */
typedef struct MlrModel MlrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *mlr_last_error_message(void);

/**
 * Loads a model JSON file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MlrStatus mlr_model_load(const char *path, struct MlrModel **out);

/**
 * Writes a model JSON file.
 *
 * # Safety
 * `model` must come from this library and `path` be NUL-terminated.
 */
enum MlrStatus mlr_model_save(const struct MlrModel *model, const char *path);

/**
 * Builds a model from its compressed form.
 *
 * `block_counts[l]` is the number of blocks of level `l` and
 * `block_sizes` lists all block sizes level after level. The singleton
 * level may be omitted. `ranks` has one entry per level including the
 * singleton level, whose rank must be 1. `fbar` is `n × (r − 1)` row-major
 * and `d` has length `n`.
 *
 * # Safety
 * All arrays must have the lengths implied above.
 */
enum MlrStatus mlr_model_from_compressed(size_t num_levels,
                                         const size_t *block_counts,
                                         const size_t *block_sizes,
                                         const size_t *ranks,
                                         const double *fbar,
                                         const double *d,
                                         struct MlrModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void mlr_model_free(struct MlrModel *model);

/**
 * Number of features, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
size_t mlr_model_n(const struct MlrModel *model);

/**
 * `out = Σx`.
 *
 * # Safety
 * `x` and `out` must hold `len` doubles.
 */
enum MlrStatus mlr_model_matvec(const struct MlrModel *model,
                                const double *x,
                                size_t len,
                                double *out);

/**
 * Computes the inverse and log-determinant.
 *
 * # Safety
 * `model` must come from this library and `out` be valid.
 */
enum MlrStatus mlr_model_invert(const struct MlrModel *model, struct MlrInverse **out);

/**
 * Releases an inverse. Null is ignored.
 *
 * # Safety
 * `inverse` must come from this library and not be used afterwards.
 */
void mlr_inverse_free(struct MlrInverse *inverse);

/**
 * `out = Σ⁻¹x`.
 *
 * # Safety
 * `x` and `out` must hold `len` doubles.
 */
enum MlrStatus mlr_inverse_apply(const struct MlrInverse *inverse,
                                 const double *x,
                                 size_t len,
                                 double *out);

/**
 * `log det Σ`.
 *
 * # Safety
 * `inverse` must come from this library and `out` be valid.
 */
enum MlrStatus mlr_inverse_logdet(const struct MlrInverse *inverse, double *out);

/**
 * Observed-data log-likelihood of `n_samples × n_features` data `y`.
 *
 * # Safety
 * `y` must hold `n_samples · n_features` doubles.
 */
enum MlrStatus mlr_model_log_likelihood(const struct MlrModel *model,
                                        const double *y,
                                        size_t n_samples,
                                        size_t n_features,
                                        double *out);

/**
 * Fits a model by EM from the Frobenius-sweep start. The hierarchy is
 * given as in [`mlr_model_from_compressed`]. Returns
 * `MLR_STATUS_NOT_CONVERGED` (with the model still written to `out`) when
 * `max_iters` was reached.
 *
 * # Safety
 * Arrays must have the implied lengths and `out` be valid.
 */
enum MlrStatus mlr_fit(size_t num_levels,
                       const size_t *block_counts,
                       const size_t *block_sizes,
                       const size_t *ranks,
                       const double *y,
                       size_t n_samples,
                       size_t n_features,
                       size_t max_iters,
                       double rel_tol,
                       struct MlrModel **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MLRFIT_H */
