#ifndef DICE_H
#define DICE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every function.
 */
typedef enum DiceStatus {
  DICE_STATUS_OK = 0,
  DICE_STATUS_NULL_POINTER = 1,
  DICE_STATUS_INVALID_ARGUMENT = 2,
  DICE_STATUS_SHAPE_MISMATCH = 3,
  DICE_STATUS_DATA = 4,
  DICE_STATUS_IO = 5,
  DICE_STATUS_UNDEFINED_METRIC = 6,
  DICE_STATUS_CONFIG = 7,
  DICE_STATUS_PANIC = 8,
} DiceStatus;

/**
 * A loaded feature bundle (class token plus patch grid).
 */
typedef struct DiceFeatureBundle DiceFeatureBundle;

/**
 * Averaged normal/anomalous text tokens with their temperature.
 */
typedef struct DiceTextTokens DiceTextTokens;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *dice_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dice_version(void);

/**
 * Loads a feature bundle directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DiceStatus dice_bundle_load(const char *dir, struct DiceFeatureBundle **out);

/**
 * Releases a bundle; null is ignored.
 *
 * # Safety
 * `bundle` must come from [`dice_bundle_load`] and not be used afterwards.
 */
void dice_bundle_free(struct DiceFeatureBundle *bundle);

/**
 * Patch grid height, width and token dimension.
 *
 * # Safety
 * All pointers must be valid.
 */
enum DiceStatus dice_bundle_dims(const struct DiceFeatureBundle *bundle,
                                 size_t *h,
                                 size_t *w,
                                 size_t *d);

/**
 * Builds text tokens from two `d`-vectors; both are renormalized.
 *
 * # Safety
 * `normal` and `anomalous` must point to `d` doubles; `out` must be valid.
 */
enum DiceStatus dice_text_tokens_new(const double *normal,
                                     const double *anomalous,
                                     size_t d,
                                     double tau,
                                     struct DiceTextTokens **out);

/**
 * Releases text tokens; null is ignored.
 *
 * # Safety
 * `text` must come from [`dice_text_tokens_new`] and not be used afterwards.
 */
void dice_text_tokens_free(struct DiceTextTokens *text);

/**
 * Image-level language score of the bundle's class token.
 *
 * # Safety
 * All pointers must be valid.
 */
enum DiceStatus dice_language_score(const struct DiceFeatureBundle *bundle,
                                    const struct DiceTextTokens *text,
                                    double *out);

/**
 * Per-patch language scores, row-major into `out` (`len` must be `h*w`).
 *
 * # Safety
 * `out` must point to `len` writable doubles.
 */
enum DiceStatus dice_language_map(const struct DiceFeatureBundle *bundle,
                                  const struct DiceTextTokens *text,
                                  double *out,
                                  size_t len);

/**
 * Nearest-reference cosine distance per query patch, row-major into `out`.
 *
 * # Safety
 * `refs` must point to `n_refs` valid bundle pointers; `out` to `len`
 * writable doubles.
 */
enum DiceStatus dice_visual_reference_map(const struct DiceFeatureBundle *query,
                                          const struct DiceFeatureBundle *const *refs,
                                          size_t n_refs,
                                          double *out,
                                          size_t len);

/**
 * Area under the ROC curve; ties count one half.
 *
 * # Safety
 * `scores` and `labels` must point to `n` elements; `out` must be valid.
 */
enum DiceStatus dice_auroc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Step-wise average precision.
 *
 * # Safety
 * `scores` and `labels` must point to `n` elements; `out` must be valid.
 */
enum DiceStatus dice_average_precision(const double *scores,
                                       const uint8_t *labels,
                                       size_t n,
                                       double *out);

/**
 * Maximum F1 over all thresholds.
 *
 * # Safety
 * `scores` and `labels` must point to `n` elements; `out` must be valid.
 */
enum DiceStatus dice_f1_max(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Runs a full evaluation from a JSON config file. When `out_path` is not
 * null it overrides the config's report path.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string; `out_path` may be null.
 */
enum DiceStatus dice_run_eval(const char *config_path, const char *out_path);

/**
 * Like [`dice_run_eval`] but hands the report JSON back as a string that
 * must be released with [`dice_string_free`].
 *
 * # Safety
 * `config_path` must be a NUL-terminated string; `out_json` must be valid.
 */
enum DiceStatus dice_run_eval_json(const char *config_path, char **out_json);

/**
 * Releases a string returned by this library; null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void dice_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DICE_H */
