#ifndef OSSE_FFI_H
#define OSSE_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OsseStatus {
  OSSE_STATUS_OK = 0,
  OSSE_STATUS_NULL_POINTER = 1,
  OSSE_STATUS_INVALID_ARGUMENT = 2,
  OSSE_STATUS_NUMERICAL = 3,
  OSSE_STATUS_IO = 4,
  /**
   * The result is mathematically undefined, e.g. CSI of two dry maps.
   */
  OSSE_STATUS_UNDEFINED = 5,
  OSSE_STATUS_PANIC = 6,
} OsseStatus;

/**
 * Loaded domain case.
 */
typedef struct OsseCase OsseCase;

/**
 * Parsed experiment configuration.
 */
typedef struct OsseConfig OsseConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `cap`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t osse_last_error(char *buf, size_t cap);

/**
 * Build the default synthetic reach.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum OsseStatus osse_case_build_default(struct OsseCase **out);

/**
 * Read a case directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum OsseStatus osse_case_read(const char *dir, struct OsseCase **out);

/**
 * Write a case to a directory.
 *
 * # Safety
 * `case` must come from this library; `dir` must be NUL-terminated.
 */
enum OsseStatus osse_case_write(const struct OsseCase *case_, const char *dir);

/**
 * Grid dimensions plus the number of friction zones and floodplain
 * subdomains. Any output pointer may be null.
 *
 * # Safety
 * `case` must come from this library.
 */
enum OsseStatus osse_case_dims(const struct OsseCase *case_,
                               size_t *nx,
                               size_t *ny,
                               size_t *zones,
                               size_t *subdomains);

/**
 * # Safety
 * `case` must be null or a handle from this library not yet freed.
 */
void osse_case_free(struct OsseCase *case_);

/**
 * Load a TOML experiment configuration. Relative directories resolve
 * against the file's directory.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` a valid handle slot.
 */
enum OsseStatus osse_config_load(const char *path, struct OsseConfig **out);

/**
 * Apply one `key.path=value` override to a loaded configuration.
 *
 * # Safety
 * `cfg` must come from this library; `assignment` must be NUL-terminated.
 */
enum OsseStatus osse_config_set(struct OsseConfig *cfg, const char *assignment);

/**
 * # Safety
 * `cfg` must be null or a handle from this library not yet freed.
 */
void osse_config_free(struct OsseConfig *cfg);

/**
 * Reference run with the configured true control, written to `out_dir`.
 *
 * # Safety
 * Handles must come from this library; `case_dir` and `out_dir` must be
 * NUL-terminated. The case is re-read from `case_dir` so the truth manifest
 * can point at it.
 */
enum OsseStatus osse_truth_run(const struct OsseConfig *cfg,
                               const char *case_dir,
                               const char *out_dir);

/**
 * Synthetic observations of the truth in `truth_dir`, written to `out_dir`.
 *
 * # Safety
 * `cfg` must come from this library; paths must be NUL-terminated.
 */
enum OsseStatus osse_obs_generate(const struct OsseConfig *cfg,
                                  const char *truth_dir,
                                  const char *out_dir);

/**
 * Run the configured experiment against the config's truth and
 * observation directories, writing the run tree to `out_dir`.
 *
 * # Safety
 * `cfg` must come from this library; `out_dir` must be NUL-terminated.
 */
enum OsseStatus osse_experiment_run(const struct OsseConfig *cfg, const char *out_dir);

/**
 * Stochastic EnKF analysis on raw row-major arrays.
 *
 * `x` is N x d (one member per row), `y_eq` is N x m with NaN marking a
 * missing equivalent, `y` and `r` have m entries, `seeds` has N entries.
 * The analysed controls are written to `x_out` (N x d, row-major, no
 * clipping).
 *
 * # Safety
 * All pointers must reference arrays of the stated sizes.
 */
enum OsseStatus osse_enkf_analysis(size_t n,
                                   size_t d,
                                   size_t m,
                                   const double *x,
                                   const double *y_eq,
                                   const double *y,
                                   const double *r,
                                   const uint64_t *seeds,
                                   double *x_out);

/**
 * Kalman gain (d x m, row-major) of a batch with no missing equivalents.
 *
 * # Safety
 * All pointers must reference arrays of the stated sizes.
 */
enum OsseStatus osse_enkf_gain(size_t n,
                               size_t d,
                               size_t m,
                               const double *x,
                               const double *y_eq,
                               const double *r,
                               double *k_out);

/**
 * RMSE of a predicted series against a truth series; the prediction is
 * linearly interpolated onto the truth times.
 *
 * # Safety
 * All pointers must reference arrays of the stated sizes.
 */
enum OsseStatus osse_rmse(const double *pred_t,
                          const double *pred_v,
                          size_t n_pred,
                          const double *truth_t,
                          const double *truth_v,
                          size_t n_truth,
                          double *out);

/**
 * Contingency counts and CSI of two wet/dry maps of `n` cells (nonzero =
 * wet). `mask` may be null to score every cell. `counts` receives hits,
 * misses, false alarms and correct negatives. Returns `Undefined` with
 * `csi` set to NaN when both maps are dry inside the mask.
 *
 * # Safety
 * Arrays must hold `n` entries; `counts` must hold 4.
 */
enum OsseStatus osse_csi(const uint8_t *pred,
                         const uint8_t *truth,
                         const uint8_t *mask,
                         size_t n,
                         size_t *counts,
                         double *csi);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OSSE_FFI_H */
