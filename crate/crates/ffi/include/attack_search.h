#ifndef ATTACK_SEARCH_H
#define ATTACK_SEARCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum AsStatus {
  AS_STATUS_OK = 0,
  AS_STATUS_NULL_ARGUMENT = 1,
  AS_STATUS_INVALID_UTF8 = 2,
  AS_STATUS_PARSE = 3,
  AS_STATUS_RANGE = 4,
  AS_STATUS_CONFIG = 5,
  AS_STATUS_IO = 6,
  AS_STATUS_RUNTIME = 7,
  AS_STATUS_PANIC = 8,
} AsStatus;

/**
 * Labeled samples.
 */
typedef struct AsDataset AsDataset;

/**
 * Classifier, optionally with a detector.
 */
typedef struct AsModel AsModel;

/**
 * Parsed attack program.
 */
typedef struct AsProgram AsProgram;

/**
 * Evaluation options. Non-positive `budget_seconds` and zero
 * `budget_queries` mean "no limit"; with both unset the limit is one
 * second per sample and attack.
 */
typedef struct AsEvalOptions {
  double eps;
  uint64_t seed;
  size_t draws;
  double budget_seconds;
  uint64_t budget_queries;
  size_t jobs;
} AsEvalOptions;

/**
 * Headline numbers of an evaluation.
 */
typedef struct AsEvalSummary {
  double rerr;
  double robust_accuracy;
  double clean_accuracy;
  /**
   * NaN when no sample was attacked.
   */
  double asr;
  size_t samples;
} AsEvalSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after success.
 * Valid until the next call into this library on the same thread.
 */
const char *as_last_error(void);

/**
 * Library version as a static string.
 */
const char *as_version(void);

/**
 * Frees a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void as_string_free(char *s);

/**
 * Parses and validates an attack program.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum AsStatus as_program_parse(const char *text, struct AsProgram **out);

/**
 * Canonical text of a program.
 *
 * # Safety
 * `program` must be a live handle; `out` must be writable.
 */
enum AsStatus as_program_format(const struct AsProgram *program, char **out);

/**
 * Number of attacks in a program; 0 for null.
 *
 * # Safety
 * `program` must be null or a live handle.
 */
size_t as_program_len(const struct AsProgram *program);

/**
 * # Safety
 * `program` must be null or a live handle, not used afterwards.
 */
void as_program_free(struct AsProgram *program);

/**
 * Loads a model file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum AsStatus as_model_load(const char *path, struct AsModel **out);

/**
 * Number of classes of a model; 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t as_model_num_classes(const struct AsModel *model);

/**
 * # Safety
 * `model` must be null or a live handle, not used afterwards.
 */
void as_model_free(struct AsModel *model);

/**
 * Loads a dataset file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum AsStatus as_dataset_load(const char *path, struct AsDataset **out);

/**
 * Number of samples; 0 for null.
 *
 * # Safety
 * `data` must be null or a live handle.
 */
size_t as_dataset_len(const struct AsDataset *data);

/**
 * # Safety
 * `data` must be null or a live handle, not used afterwards.
 */
void as_dataset_free(struct AsDataset *data);

/**
 * Runs `program` against `model` on `data` and fills `summary`. The
 * attack differentiates `surrogate` when given, else the model itself.
 * When `report_json` is non-null it receives the full report as JSON.
 *
 * # Safety
 * Handles must be live (`surrogate` may be null); `options` and
 * `summary` must be valid pointers; `report_json` may be null.
 */
enum AsStatus as_evaluate(const struct AsModel *model,
                          const struct AsModel *surrogate,
                          const struct AsProgram *program,
                          const struct AsDataset *data,
                          const struct AsEvalOptions *options,
                          struct AsEvalSummary *summary,
                          char **report_json);

/**
 * Runs the full search. `config_toml` (nullable) holds search settings in
 * the same form as the CLI's `--config` file. On success `program`
 * receives the winning sequence and `surrogate` the transformed model.
 * `report_json` (nullable) receives the search report.
 *
 * # Safety
 * Handles must be live; out-pointers must be writable or, for
 * `surrogate` and `report_json`, null.
 */
enum AsStatus as_search(const struct AsModel *model,
                        const struct AsDataset *data,
                        const char *config_toml,
                        struct AsProgram **program,
                        struct AsModel **surrogate,
                        char **report_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATTACK_SEARCH_H */
