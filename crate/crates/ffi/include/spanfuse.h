#ifndef SPANFUSE_H
#define SPANFUSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SfAggregation {
  SF_AGGREGATION_MAX = 0,
  SF_AGGREGATION_RECIPROCAL_RANK_SUM = 1,
  SF_AGGREGATION_EXPONENTIAL_SUM = 2,
  SF_AGGREGATION_NOISY_OR = 3,
} SfAggregation;

typedef enum SfCalibration {
  SF_CALIBRATION_IDENTITY = 0,
  SF_CALIBRATION_LOGISTIC = 1,
} SfCalibration;

/**
 * Result of every fallible call.
 */
typedef enum SfStatus {
  SF_STATUS_OK = 0,
  /**
   * Null pointer, bad UTF-8 or an out-of-range option.
   */
  SF_STATUS_INVALID_ARGUMENT = 1,
  SF_STATUS_IO = 2,
  SF_STATUS_PARSE = 3,
  /**
   * Input data broke an invariant (bad span, unsorted scores, coverage mismatch...).
   */
  SF_STATUS_VALIDATION = 4,
  /**
   * Calibration failed numerically.
   */
  SF_STATUS_NUMERIC = 5,
  SF_STATUS_CONFIG = 6,
  /**
   * A Rust panic was caught at the boundary.
   */
  SF_STATUS_PANIC = 7,
} SfStatus;

typedef struct SfGoldSet SfGoldSet;

typedef struct SfModelRun SfModelRun;

typedef struct SfPredictions SfPredictions;

typedef struct SfCombineOptions {
  enum SfAggregation long_aggregation;
  enum SfCalibration long_calibration;
  enum SfAggregation short_aggregation;
  enum SfCalibration short_calibration;
  /**
   * Decay for exponential sum.
   */
  double beta;
  /**
   * 0 means the default of 20.
   */
  size_t top_m;
  bool require_containment;
} SfCombineOptions;

/**
 * Metrics at the optimal threshold. A threshold of -INFINITY means every
 * non-null answer is attempted.
 */
typedef struct SfEvalReport {
  double long_f1;
  double long_precision;
  double long_recall;
  double long_threshold;
  double short_f1;
  double short_precision;
  double short_recall;
  double short_threshold;
  size_t n_examples;
} SfEvalReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sf_version(void);

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next `sf_*` call on the same thread.
 */
const char *sf_last_error_message(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library, not yet freed.
 */
void sf_string_free(char *s);

/**
 * Options equal to the library default: raw max for both answer types.
 */
struct SfCombineOptions sf_combine_options_default(void);

/**
 * Loads a prediction JSONL file. `model_id` may be NULL to use the file stem.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum SfStatus sf_model_run_load(const char *path,
                                const char *model_id,
                                size_t top_m,
                                struct SfModelRun **out);

/**
 * # Safety
 * `run` must be NULL or a handle from this library, not yet freed.
 */
void sf_model_run_free(struct SfModelRun *run);

/**
 * Number of examples in a run (0 for NULL).
 *
 * # Safety
 * `run` must be NULL or a live handle.
 */
size_t sf_model_run_len(const struct SfModelRun *run);

/**
 * Loads and merges gold JSONL files.
 *
 * # Safety
 * `paths` must point to `n_paths` NUL-terminated strings; `out` must be writable.
 */
enum SfStatus sf_gold_load(const char *const *paths,
                           size_t n_paths,
                           size_t min_agreement,
                           struct SfGoldSet **out);

/**
 * # Safety
 * `gold` must be NULL or a handle from this library, not yet freed.
 */
void sf_gold_free(struct SfGoldSet *gold);

/**
 * # Safety
 * `gold` must be NULL or a live handle.
 */
size_t sf_gold_len(const struct SfGoldSet *gold);

/**
 * Combines `n_runs` runs into final predictions. `options` may be NULL for
 * the defaults. `calibrators_json` (a table written by `spanfuse calibrate`)
 * is required only when an answer type uses logistic calibration.
 *
 * # Safety
 * `runs` must point to `n_runs` live handles; `out` must be writable.
 */
enum SfStatus sf_combine(const struct SfModelRun *const *runs,
                         size_t n_runs,
                         const struct SfCombineOptions *options,
                         const char *calibrators_json,
                         struct SfPredictions **out);

/**
 * Loads final predictions written by `sf_predictions_save` or `spanfuse combine`.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum SfStatus sf_predictions_load(const char *path, struct SfPredictions **out);

/**
 * # Safety
 * `preds` must be a live handle; `path` must be NUL-terminated.
 */
enum SfStatus sf_predictions_save(const struct SfPredictions *preds, const char *path);

/**
 * # Safety
 * `preds` must be NULL or a handle from this library, not yet freed.
 */
void sf_predictions_free(struct SfPredictions *preds);

/**
 * # Safety
 * `preds` must be NULL or a live handle.
 */
size_t sf_predictions_len(const struct SfPredictions *preds);

/**
 * Optimal-threshold F1 of `preds` against `gold`.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum SfStatus sf_evaluate(const struct SfPredictions *preds,
                          const struct SfGoldSet *gold,
                          struct SfEvalReport *out);

/**
 * Aggregates the scores of one span's duplicate predictions. The scores
 * need not be sorted.
 *
 * # Safety
 * `scores` must point to `n` doubles; `out` must be writable.
 */
enum SfStatus sf_aggregate_score(const double *scores,
                                 size_t n,
                                 enum SfAggregation aggregation,
                                 double beta,
                                 double *out);

/**
 * Runs an ensemble search over `n_runs` runs against `gold_train` and writes
 * the result as JSON to `out_json` (free with `sf_string_free`).
 * `config_json` holds a search configuration object; NULL selects greedy
 * search on short F1 with k = 4. Logistic calibrators, when the
 * configuration needs them, are fitted on `gold_train`.
 *
 * # Safety
 * `runs` must point to `n_runs` live handles; `gold_train` must be live;
 * `out_json` must be writable.
 */
enum SfStatus sf_search(const struct SfModelRun *const *runs,
                        size_t n_runs,
                        const struct SfGoldSet *gold_train,
                        const char *config_json,
                        char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPANFUSE_H */
