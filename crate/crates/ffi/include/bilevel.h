#ifndef BILEVEL_H
#define BILEVEL_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BlStatus {
  BL_STATUS_OK = 0,
  BL_STATUS_NULL_POINTER = 1,
  BL_STATUS_INVALID_ARGUMENT = 2,
  BL_STATUS_CONFIG = 3,
  BL_STATUS_NUMERICAL = 4,
  BL_STATUS_IO = 5,
  BL_STATUS_BUFFER_TOO_SMALL = 6,
  BL_STATUS_PANIC = 7,
} BlStatus;

typedef enum BlDynamicsKind {
  BL_DYNAMICS_KIND_GD = 0,
  /**
   * Gradient descent with the step size learned as a hyperparameter.
   */
  BL_DYNAMICS_KIND_HYPER_LR = 1,
  BL_DYNAMICS_KIND_MOMENTUM = 2,
} BlDynamicsKind;

typedef enum BlMode {
  BL_MODE_REVERSE = 0,
  BL_MODE_FORWARD = 1,
  BL_MODE_FINITE_DIFF = 2,
} BlMode;

/**
 * Opaque problem handle.
 */
typedef struct BlProblem BlProblem;

/**
 * Inner optimizer. `mu` is read only for momentum.
 */
typedef struct BlDynamics {
  enum BlDynamicsKind kind;
  double eta;
  double mu;
} BlDynamics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next `bl_*` call on the same thread.
 */
const char *bl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *bl_version(void);

/**
 * Ridge regression with the penalty as hyperparameter. Matrices are
 * row-major: `x` is `n × p`, `x_val` is `n_val × p`.
 *
 * # Safety
 * Array arguments must point to at least the stated number of elements and
 * `out` must be writable.
 */
enum BlStatus bl_ridge_new(const double *x,
                           const double *y,
                           size_t n,
                           size_t p,
                           const double *x_val,
                           const double *y_val,
                           size_t n_val,
                           double reg,
                           struct BlDynamics dynamics,
                           size_t horizon,
                           struct BlProblem **out);

/**
 * Binary hyper-cleaning with one weight in `[0, 1]` per training example.
 * Labels are 0 or 1.
 *
 * # Safety
 * Array arguments must point to at least the stated number of elements and
 * `out` must be writable.
 */
enum BlStatus bl_hyperclean_new(const double *x,
                                const uint32_t *labels_train,
                                size_t n,
                                size_t p,
                                const double *x_val,
                                const uint32_t *labels_val,
                                size_t n_val,
                                struct BlDynamics dynamics,
                                size_t horizon,
                                struct BlProblem **out);

/**
 * Hyper-cleaning on two synthetic Gaussians with a fraction `corruption`
 * of flipped training labels.
 *
 * # Safety
 * `out` must be writable.
 */
enum BlStatus bl_hyperclean_synthetic_new(size_t n_train,
                                          size_t n_val,
                                          size_t features,
                                          double corruption,
                                          uint64_t seed,
                                          struct BlDynamics dynamics,
                                          size_t horizon,
                                          struct BlProblem **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `problem` must come from a `bl_*_new` call and not be freed twice.
 */
void bl_problem_free(struct BlProblem *problem);

/**
 * Number of hyperparameters.
 *
 * # Safety
 * `problem` must be a live handle and `out` writable.
 */
enum BlStatus bl_problem_hyper_dim(const struct BlProblem *problem, size_t *out);

/**
 * Writes the initial hyperparameters into `out[0..len]`; `len` must equal
 * the hyperparameter dimension.
 *
 * # Safety
 * `problem` must be a live handle and `out` must hold `len` doubles.
 */
enum BlStatus bl_problem_initial_hyper(const struct BlProblem *problem, double *out, size_t len);

/**
 * Truncated outer objective at `hyper`.
 *
 * # Safety
 * `problem` must be a live handle, `hyper` must hold `len` doubles and
 * `value` must be writable.
 */
enum BlStatus bl_problem_value(const struct BlProblem *problem,
                               const double *hyper,
                               size_t len,
                               double *value);

/**
 * Hypergradient at `hyper` in the requested mode. `value` may be null.
 *
 * # Safety
 * `problem` must be a live handle, `hyper` and `grad` must hold `len`
 * doubles and `value` must be null or writable.
 */
enum BlStatus bl_problem_hypergrad(const struct BlProblem *problem,
                                   const double *hyper,
                                   size_t len,
                                   enum BlMode mode,
                                   double *value,
                                   double *grad);

/**
 * Runs the experiment described by a TOML config. `output_dir` may be null
 * to use the config's own resolution. `passed` receives 1 when every
 * verdict passed and 0 otherwise.
 *
 * # Safety
 * Strings must be NUL-terminated and `passed` writable.
 */
enum BlStatus bl_run_config(const char *config_path, const char *output_dir, int32_t *passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BILEVEL_H */
