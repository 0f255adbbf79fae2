/* C interface to the msgat accident-risk pipeline. */

#pragma once

/* Generated with cbindgen:0.27.0 */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes; non-zero mirrors the CLI exit codes.
typedef enum MsgatStatus {
  MsgatStatus_Ok = 0,
  MsgatStatus_Failure = 1,
  MsgatStatus_ConfigError = 2,
  MsgatStatus_GenerationError = 3,
  MsgatStatus_IngestionError = 4,
  MsgatStatus_MissingArtifact = 5,
  MsgatStatus_NullArgument = 6,
} MsgatStatus;

// Opaque handle to a loaded checkpoint.
typedef struct MsgatModel MsgatModel;

// Closed-form cost-model output.
typedef struct MsgatCostReport {
  uint64_t spatial_units_per_step;
  uint64_t temporal_units;
  uint64_t total_units;
  uint64_t baseline_total_units;
  double ratio_to_baseline;
} MsgatCostReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static string; do not free.
const char *msgat_version(void);

// Message of the most recent error on this thread. The pointer stays valid
// until the next failing call on the same thread; do not free.
const char *msgat_last_error(void);

// Release a string returned by this library.
//
// # Safety
// `s` must be a pointer previously returned by a `msgat_*` function that
// documents caller ownership, and must not be used afterwards.
void msgat_string_free(char *s);

// Generate a synthetic dataset bundle under `out_dir`.
//
// # Safety
// `config_json` may be null (defaults); `out_dir` must be a valid
// NUL-terminated UTF-8 path.
enum MsgatStatus msgat_synth(const char *config_json, const char *out_dir);

// Ingest + interpolate + sample + split `data_dir` into `out_dir`.
//
// # Safety
// `config_json` may be null; `data_dir` and `out_dir` must be valid
// NUL-terminated UTF-8 paths.
enum MsgatStatus msgat_prepare(const char *config_json, const char *data_dir, const char *out_dir);

// Train against a prepared dataset; writes the run directory under
// `out_root` (optionally named `run_id`).
//
// # Safety
// `config_json` and `run_id` may be null; `prepared_dir` and `out_root`
// must be valid NUL-terminated UTF-8 paths.
enum MsgatStatus msgat_train(const char *config_json,
                             const char *prepared_dir,
                             const char *out_root,
                             const char *run_id);

// Evaluate a checkpoint on one partition ("train", "val" or "test").
// A negative `threshold` selects the checkpoint's own. On success,
// `metrics_json_out` (if non-null) receives a JSON report the caller must
// free with [`msgat_string_free`].
//
// # Safety
// Path and partition pointers must be valid NUL-terminated UTF-8;
// `config_json`, `run_id` and `metrics_json_out` may be null.
enum MsgatStatus msgat_evaluate(const char *config_json,
                                const char *checkpoint,
                                const char *prepared_dir,
                                const char *partition,
                                double threshold,
                                const char *out_root,
                                const char *run_id,
                                char **metrics_json_out);

// Fill `out` with the closed-form cost model for the configured model and
// a graph of `nodes`/`edges`.
//
// # Safety
// `config_json` may be null; `out` must point to writable memory for one
// `MsgatCostReport`.
enum MsgatStatus msgat_estimate_cost(const char *config_json,
                                     uint64_t nodes,
                                     uint64_t edges,
                                     struct MsgatCostReport *out);

// Load a checkpoint into an opaque model handle; null on failure (see
// [`msgat_last_error`]). Release with [`msgat_model_free`].
//
// # Safety
// `checkpoint_path` must be a valid NUL-terminated UTF-8 path.
struct MsgatModel *msgat_model_load(const char *checkpoint_path);

// Release a model handle.
//
// # Safety
// `model` must come from [`msgat_model_load`] and not be used afterwards.
void msgat_model_free(struct MsgatModel *model);

// Number of learnable scalars in the loaded model; 0 for a null handle.
//
// # Safety
// `model` must be a live handle from [`msgat_model_load`] or null.
uint64_t msgat_model_parameter_count(const struct MsgatModel *model);

// The model's configuration as JSON; caller frees with
// [`msgat_string_free`]. Null for a null handle.
//
// # Safety
// `model` must be a live handle from [`msgat_model_load`] or null.
char *msgat_model_config_json(const struct MsgatModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
