#ifndef STEINLAB_H
#define STEINLAB_H

/* Generated by cbindgen from steinlab-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum SteinStatus {
  STEIN_STATUS_OK = 0,
  /**
   * A pointer argument was null or a buffer length was wrong.
   */
  STEIN_STATUS_NULL_POINTER = 1,
  STEIN_STATUS_CONFIG_INVALID = 2,
  STEIN_STATUS_NO_CONVERGENCE = 3,
  STEIN_STATUS_NON_FINITE = 4,
  STEIN_STATUS_IO = 5,
  STEIN_STATUS_DIAGONAL_UNDEFINED = 6,
  STEIN_STATUS_NOT_POSITIVE_SEMIDEFINITE = 7,
  /**
   * Numeric failure (mass defect, ill conditioning, unsupported op).
   */
  STEIN_STATUS_NUMERIC = 8,
  /**
   * A string argument was not valid UTF-8.
   */
  STEIN_STATUS_INVALID_UTF8 = 9,
  /**
   * The library panicked; state may be inconsistent.
   */
  STEIN_STATUS_PANIC = 10,
} SteinStatus;

/**
 * Opaque ensemble handle.
 */
typedef struct SteinlabEnsemble SteinlabEnsemble;

/**
 * Opaque kernel handle.
 */
typedef struct SteinlabKernel SteinlabKernel;

/**
 * Opaque target handle.
 */
typedef struct SteinlabTarget SteinlabTarget;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; do not free.
 */
const char *steinlab_version(void);

/**
 * Last error message for this thread, or null when none was recorded.
 * The caller owns the returned string (`steinlab_string_free`).
 */
char *steinlab_last_error_message(void);

/**
 * Free a string previously returned by this library.
 *
 * # Safety
 * `s` must be a pointer returned by a steinlab function and not yet
 * freed; null is accepted and ignored.
 */
void steinlab_string_free(char *s);

/**
 * Parse a kernel from its JSON spec, e.g.
 * `{"family":"exp-power","p":2.0,"sigma":1.0}`.
 *
 * # Safety
 * `json` must be a valid NUL-terminated string and `out` a valid
 * location to store the handle.
 */
enum SteinStatus steinlab_kernel_from_json(const char *json, struct SteinlabKernel **out);

/**
 * # Safety
 * `kernel` must come from `steinlab_kernel_from_json` and not be freed
 * twice; null is ignored.
 */
void steinlab_kernel_free(struct SteinlabKernel *kernel);

/**
 * Evaluate `k(x, y)` for `dim`-dimensional points.
 *
 * # Safety
 * `x` and `y` must point to `dim` readable doubles; `out` to one
 * writable double.
 */
enum SteinStatus steinlab_kernel_eval(const struct SteinlabKernel *kernel,
                                      const double *x,
                                      const double *y,
                                      uintptr_t dim,
                                      double *out);

/**
 * Write `∇_y k(x,y)` into `out` (`dim` doubles).
 *
 * # Safety
 * As for `steinlab_kernel_eval`, with `out` holding `dim` doubles.
 */
enum SteinStatus steinlab_kernel_grad_y(const struct SteinlabKernel *kernel,
                                        const double *x,
                                        const double *y,
                                        uintptr_t dim,
                                        double *out);

/**
 * `∇_x · ∇_y k(x,y)`; errors when undefined on the diagonal.
 *
 * # Safety
 * As for `steinlab_kernel_eval`.
 */
enum SteinStatus steinlab_kernel_cross_trace(const struct SteinlabKernel *kernel,
                                             const double *x,
                                             const double *y,
                                             uintptr_t dim,
                                             double *out);

/**
 * Parse a target from its JSON spec, e.g.
 * `{"family":"gaussian","mean":[0,0],"cov":[[1,0],[0,1]]}`.
 *
 * # Safety
 * As for `steinlab_kernel_from_json`.
 */
enum SteinStatus steinlab_target_from_json(const char *json, struct SteinlabTarget **out);

/**
 * # Safety
 * `target` must come from `steinlab_target_from_json`; null is ignored.
 */
void steinlab_target_free(struct SteinlabTarget *target);

/**
 * Dimension of a target.
 *
 * # Safety
 * `target` must be a live handle.
 */
uintptr_t steinlab_target_dim(const struct SteinlabTarget *target);

/**
 * Potential `V(x)`.
 *
 * # Safety
 * `x` must hold `dim` doubles matching the target's dimension.
 */
enum SteinStatus steinlab_target_potential(const struct SteinlabTarget *target,
                                           const double *x,
                                           uintptr_t dim,
                                           double *out);

/**
 * Score `∇V(x)` written into `out` (`dim` doubles).
 *
 * # Safety
 * As for `steinlab_target_potential`.
 */
enum SteinStatus steinlab_target_score(const struct SteinlabTarget *target,
                                       const double *x,
                                       uintptr_t dim,
                                       double *out);

/**
 * Create an ensemble of `n` particles in `dim` dimensions from a
 * particle-major buffer.
 *
 * # Safety
 * `data` must hold `n*dim` readable doubles.
 */
enum SteinStatus steinlab_ensemble_new(const double *data,
                                       uintptr_t n,
                                       uintptr_t dim,
                                       struct SteinlabEnsemble **out);

/**
 * # Safety
 * `ensemble` must come from this library; null is ignored.
 */
void steinlab_ensemble_free(struct SteinlabEnsemble *ensemble);

/**
 * Number of particles.
 *
 * # Safety
 * `ensemble` must be a live handle.
 */
uintptr_t steinlab_ensemble_len(const struct SteinlabEnsemble *ensemble);

/**
 * Dimension of the particles.
 *
 * # Safety
 * `ensemble` must be a live handle.
 */
uintptr_t steinlab_ensemble_dim(const struct SteinlabEnsemble *ensemble);

/**
 * Copy the positions into a particle-major buffer of `n*dim` doubles.
 *
 * # Safety
 * `out` must hold `n*dim` writable doubles.
 */
enum SteinStatus steinlab_ensemble_positions(const struct SteinlabEnsemble *ensemble, double *out);

/**
 * Squared kernelised Stein discrepancy of the ensemble's empirical
 * measure; `use_ustat != 0` selects the diagonal-free U-statistic.
 *
 * # Safety
 * All handles must be live; `out` must be writable.
 */
enum SteinStatus steinlab_ksd_squared(const struct SteinlabKernel *kernel,
                                      const struct SteinlabTarget *target,
                                      const struct SteinlabEnsemble *ensemble,
                                      int use_ustat,
                                      double *out);

/**
 * Squared RKHS norm of the SVGD drift (equal to the V-statistic KSD²).
 *
 * # Safety
 * As for `steinlab_ksd_squared`.
 */
enum SteinStatus steinlab_drift_rkhs_norm_squared(const struct SteinlabKernel *kernel,
                                                  const struct SteinlabTarget *target,
                                                  const struct SteinlabEnsemble *ensemble,
                                                  double *out);

/**
 * Integrate the ensemble in place: `mode` 0 = Euler ODE, 1 = RK4 ODE,
 * 2 = Euler–Maruyama SDE (seeded).
 *
 * # Safety
 * All handles must be live; the ensemble is mutated.
 */
enum SteinStatus steinlab_run(const struct SteinlabKernel *kernel,
                              const struct SteinlabTarget *target,
                              struct SteinlabEnsemble *ensemble,
                              int mode,
                              double dt,
                              uintptr_t steps,
                              uint64_t seed);

/**
 * Run a full experiment from a config JSON (same schema as the CLI);
 * returns the run summary as JSON in `summary_out` (caller frees with
 * `steinlab_string_free`). Artefact files are written as configured.
 *
 * # Safety
 * `config_json` must be a valid NUL-terminated string; `summary_out`
 * may be null when the summary is not wanted.
 */
enum SteinStatus steinlab_run_experiment(const char *config_json, char **summary_out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* STEINLAB_H */
