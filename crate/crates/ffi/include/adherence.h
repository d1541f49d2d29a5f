#ifndef ADHERENCE_H
#define ADHERENCE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every fallible function.
 */
typedef enum AdhStatus {
  ADH_STATUS_OK = 0,
  ADH_STATUS_NULL_POINTER = 1,
  ADH_STATUS_INVALID_UTF8 = 2,
  /**
   * The model file is missing, unreadable or malformed.
   */
  ADH_STATUS_LOAD = 3,
  /**
   * The row length or input kind does not fit the model.
   */
  ADH_STATUS_WRONG_INPUT = 4,
  ADH_STATUS_CONFIG = 5,
  /**
   * Claims loading, labeling or feature building failed.
   */
  ADH_STATUS_PIPELINE = 6,
  /**
   * The output buffer is smaller than the number of scores.
   */
  ADH_STATUS_BUFFER_TOO_SMALL = 7,
  ADH_STATUS_PANIC = 8,
} AdhStatus;

/**
 * A fitted model loaded from a `.model` file.
 */
typedef struct AdhModel AdhModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *adh_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into the library on this thread.
 */
const char *adh_last_error(void);

/**
 * Loads a model file into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AdhStatus adh_model_load(const char *path, struct AdhModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`adh_model_load`] not yet freed.
 */
void adh_model_free(struct AdhModel *model);

/**
 * Short family name ("logistic", "tree", "gbt", "mlp", "lstm"), static.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
const char *adh_model_family(const struct AdhModel *model);

/**
 * Number of phase-level features the model expects per row; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t adh_model_n_features(const struct AdhModel *model);

/**
 * Risk for one unscaled feature row laid out as in features.csv.
 * Tabular models only.
 *
 * # Safety
 * `model` must be a live handle, `row` must point to `len` doubles and
 * `risk` must be valid for a write.
 */
enum AdhStatus adh_model_score_row(const struct AdhModel *model,
                                   const double *row,
                                   size_t len,
                                   double *risk);

/**
 * Scores a claims directory: one risk per phase for tabular models, one
 * per transaction for the recurrent model, in scores.csv row order.
 * `config_path` may be null for the default configuration. The number of
 * scores is stored in `*written` even when `capacity` is too small, so a
 * first call with `capacity` 0 sizes the buffer.
 *
 * # Safety
 * `model` must be a live handle, the strings NUL-terminated (or
 * `config_path` null), `out` valid for `capacity` doubles (may be null
 * when `capacity` is 0) and `written` valid for a write.
 */
enum AdhStatus adh_model_score_claims(const struct AdhModel *model,
                                      const char *config_path,
                                      const char *claims_dir,
                                      double *out,
                                      size_t capacity,
                                      size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADHERENCE_H */
