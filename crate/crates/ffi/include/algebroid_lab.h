#ifndef ALGEBROID_LAB_H
#define ALGEBROID_LAB_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. The first four match the command-line exit codes.
 */
typedef enum {
  AL_STATUS_OK = 0,
  /**
   * A validation check failed or an integration blew up.
   */
  AL_STATUS_FAILED = 1,
  /**
   * Schema, shape or usage error, including underdetermined searches.
   */
  AL_STATUS_INVALID = 2,
  /**
   * Relaxation stopped before reaching its tolerance.
   */
  AL_STATUS_NOT_CONVERGED = 3,
  AL_STATUS_NULL_POINTER = 4,
  AL_STATUS_BUFFER_TOO_SMALL = 5,
  AL_STATUS_PANIC = 6,
} AlStatus;

/**
 * A loaded and validated model.
 */
typedef struct AlModel AlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *al_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL, or 0
 * when there is no error.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t al_last_error(char *buf, size_t len);

/**
 * Parses a model from JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
AlStatus al_model_from_json(const char *json, AlModel **out);

/**
 * Loads one of the bundled models by name.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
AlStatus al_model_bundled(const char *name, AlModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `m` must come from this library and not be used afterwards.
 */
void al_model_free(AlModel *m);

/**
 * Base dimension and fiber rank.
 *
 * # Safety
 * `m` must be a live handle; outputs may be null.
 */
AlStatus al_model_shape(const AlModel *m, size_t *dim, size_t *rank);

/**
 * Axiom residuals and Levi-Civita certification. Writes the largest
 * residual relative to its tolerance to `worst_ratio`; returns `Failed`
 * when it is not below 1.
 *
 * # Safety
 * `m` must be a live handle; `worst_ratio` may be null.
 */
AlStatus al_validate(const AlModel *m, size_t samples, uint64_t seed, double *worst_ratio);

/**
 * Integrates the geodesic flow `(x, y)` and writes the final state
 * (`dim + rank` values) and the maximum energy drift.
 *
 * # Safety
 * `x0` and `y0` must hold `dim` and `rank` values; `state_out` must hold
 * `state_len` values; `drift` may be null.
 */
AlStatus al_geodesic(const AlModel *m,
                     const double *x0,
                     const double *y0,
                     double t_end,
                     double h,
                     double *state_out,
                     size_t state_len,
                     double *drift);

/**
 * Killing test of a named section. `residuals` receives the lemma,
 * Poisson and connection residuals, normalized.
 *
 * # Safety
 * `section` must be NUL-terminated; `residuals` null or valid for 3 values.
 */
AlStatus al_killing_check(const AlModel *m,
                          const char *section,
                          size_t samples,
                          uint64_t seed,
                          int *is_killing,
                          double *residuals);

/**
 * Dimension of the Killing algebra within polynomials up to `degree`, with
 * the bound `n(n+1)/2` and the closure residual of the structure constants.
 *
 * # Safety
 * Outputs may be null.
 */
AlStatus al_killing_find(const AlModel *m,
                         size_t degree,
                         size_t *dim,
                         size_t *bound,
                         double *closure_residual);

/**
 * Relaxes the model's sigma configuration. Writes the final action and
 * maximum tension; returns `NotConverged` if the tolerance was not reached.
 *
 * # Safety
 * Outputs may be null.
 */
AlStatus al_sigma_solve(const AlModel *m,
                        double step,
                        size_t iters,
                        double *action,
                        double *max_tension);

/**
 * Runs the command-line tool in-process with `argv[0..argc]` and returns
 * its exit code. Output goes to the process's stdout and stderr.
 *
 * # Safety
 * `argv` must hold `argc` NUL-terminated strings.
 */
int al_cli_run(int argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ALGEBROID_LAB_H */
