#ifndef FHPM_H
#define FHPM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Call outcome. Anything but OK leaves a message for
 * `fhpm_last_error_message`.
 */
typedef enum {
  FHPM_STATUS_OK = 0,
  FHPM_STATUS_NULL_POINTER = 1,
  FHPM_STATUS_INVALID_UTF8 = 2,
  FHPM_STATUS_PARSE_ERROR = 3,
  FHPM_STATUS_VALIDATION_ERROR = 4,
  FHPM_STATUS_IO_ERROR = 5,
  FHPM_STATUS_RUN_ERROR = 6,
} FhpmStatus;

/**
 * Opaque experiment handle; create with `fhpm_experiment_from_json` or
 * `fhpm_experiment_from_file`, release with `fhpm_experiment_free`.
 */
typedef struct FhpmExperiment FhpmExperiment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Parse and validate an experiment config from a JSON string.
 *
 * # Safety
 * `json` must be a valid NUL-terminated string; `out` must be a valid
 * pointer to receive the handle.
 */
FhpmStatus fhpm_experiment_from_json(const char *json, FhpmExperiment **out);

/**
 * Load and validate an experiment config from a JSON file.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be a valid
 * pointer to receive the handle.
 */
FhpmStatus fhpm_experiment_from_file(const char *path, FhpmExperiment **out);

/**
 * Override the experiment seed.
 *
 * # Safety
 * `handle` must be a live handle from this library.
 */
FhpmStatus fhpm_experiment_set_seed(FhpmExperiment *handle, uint64_t seed);

/**
 * Run the experiment, writing its report files under `out_dir`.
 *
 * # Safety
 * `handle` must be a live handle; `out_dir` a valid NUL-terminated string.
 */
FhpmStatus fhpm_experiment_run(const FhpmExperiment *handle, const char *out_dir);

/**
 * Release a handle. Passing null is a no-op.
 *
 * # Safety
 * `handle` must be null or a handle not freed before.
 */
void fhpm_experiment_free(FhpmExperiment *handle);

/**
 * Registered experiment names as a JSON array. Free with
 * `fhpm_string_free`.
 */
char *fhpm_experiment_names_json(void);

/**
 * Generate a binary trace file from a trace-spec JSON string.
 *
 * # Safety
 * Both arguments must be valid NUL-terminated strings.
 */
FhpmStatus fhpm_trace_generate(const char *spec_json, const char *out_path);

/**
 * Message from the most recent failure on this thread, or null. Free with
 * `fhpm_string_free`.
 */
char *fhpm_last_error_message(void);

/**
 * Free a string returned by this library. Passing null is a no-op.
 *
 * # Safety
 * `s` must be null or a string returned by this library, freed once.
 */
void fhpm_string_free(char *s);

/**
 * Library version as a static string; do not free.
 */
const char *fhpm_version(void);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* FHPM_H */
