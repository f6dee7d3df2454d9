#ifndef SBRIDGE_DIMF_H
#define SBRIDGE_DIMF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum SbdStatus {
  SBD_STATUS_OK = 0,
  SBD_STATUS_NULL_POINTER = 1,
  SBD_STATUS_INVALID_ARGUMENT = 2,
  SBD_STATUS_DIMENSION_MISMATCH = 3,
  SBD_STATUS_NOT_POSITIVE_DEFINITE = 4,
  SBD_STATUS_NON_CONVERGENCE = 5,
  SBD_STATUS_NUMERICAL = 6,
  SBD_STATUS_BUFFER_TOO_SMALL = 7,
  SBD_STATUS_INTERNAL = 8,
} SbdStatus;

/**
 * Opaque Gaussian coupling on `R^D × R^D`.
 */
typedef struct SbdCoupling SbdCoupling;

/**
 * Opaque result of [`sbd_dimf_run`].
 */
typedef struct SbdDimfResult SbdDimfResult;

/**
 * Opaque Gaussian distribution on `R^D`.
 */
typedef struct SbdGaussian SbdGaussian;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread; empty after a success.
 * Valid until the next `sbd_*` call on the same thread.
 */
const char *sbd_last_error(void);

/**
 * Creates `N(mean, cov)` from `dim` means and a `dim × dim` covariance.
 *
 * # Safety
 * `mean` must hold `dim` values, `cov` `dim * dim` values, `out` must be writable.
 */
enum SbdStatus sbd_gaussian_new(size_t dim,
                                const double *mean,
                                const double *cov,
                                struct SbdGaussian **out);

/**
 * Draws the seeded benchmark pair used by the convergence experiments.
 *
 * # Safety
 * `out_p0` and `out_p1` must be writable.
 */
enum SbdStatus sbd_benchmark_gaussians(size_t dim,
                                       uint64_t seed,
                                       struct SbdGaussian **out_p0,
                                       struct SbdGaussian **out_p1);

/**
 * # Safety
 * `g` must be null or a handle from this library that has not been freed.
 */
void sbd_gaussian_free(struct SbdGaussian *g);

/**
 * Dimension of `g`, or 0 when `g` is null.
 *
 * # Safety
 * `g` must be null or a live handle.
 */
size_t sbd_gaussian_dim(const struct SbdGaussian *g);

/**
 * `KL(p ‖ q)` in nats.
 *
 * # Safety
 * `p`, `q` must be live handles and `out` writable.
 */
enum SbdStatus sbd_gaussian_kl(const struct SbdGaussian *p,
                               const struct SbdGaussian *q,
                               double *out);

/**
 * Squared Bures-Wasserstein distance and its unexplained-variance percentage relative to `p`.
 *
 * # Safety
 * `p`, `q` must be live handles; `out_bw2` and `out_uvp_percent` writable.
 */
enum SbdStatus sbd_gaussian_bw2(const struct SbdGaussian *p,
                                const struct SbdGaussian *q,
                                double *out_bw2,
                                double *out_uvp_percent);

/**
 * Closed-form entropic optimal coupling of `p0` and `p1` at noise level `epsilon`.
 *
 * # Safety
 * `p0`, `p1` must be live handles and `out` writable.
 */
enum SbdStatus sbd_coupling_sb_plan(const struct SbdGaussian *p0,
                                    const struct SbdGaussian *p1,
                                    double epsilon,
                                    struct SbdCoupling **out);

/**
 * Product coupling `p0 ⊗ p1`.
 *
 * # Safety
 * `p0`, `p1` must be live handles and `out` writable.
 */
enum SbdStatus sbd_coupling_independent(const struct SbdGaussian *p0,
                                        const struct SbdGaussian *p1,
                                        struct SbdCoupling **out);

/**
 * # Safety
 * `c` must be null or a live handle.
 */
void sbd_coupling_free(struct SbdCoupling *c);

/**
 * Per-endpoint dimension `D`; the joint has dimension `2D`. Zero when `c` is null.
 *
 * # Safety
 * `c` must be null or a live handle.
 */
size_t sbd_coupling_dim(const struct SbdCoupling *c);

/**
 * Copies the `2D` joint mean into `out`.
 *
 * # Safety
 * `c` must be a live handle and `out` hold `len` writable values.
 */
enum SbdStatus sbd_coupling_mean(const struct SbdCoupling *c, double *out, size_t len);

/**
 * Copies the `2D × 2D` joint covariance, row-major, into `out`.
 *
 * # Safety
 * `c` must be a live handle and `out` hold `len` writable values.
 */
enum SbdStatus sbd_coupling_cov(const struct SbdCoupling *c, double *out, size_t len);

/**
 * `KL(a ‖ b)` between joint laws, in nats.
 *
 * # Safety
 * `a`, `b` must be live handles and `out` writable.
 */
enum SbdStatus sbd_coupling_kl(const struct SbdCoupling *a,
                               const struct SbdCoupling *b,
                               double *out);

/**
 * Runs Gaussian D-IMF from `init` on a uniform grid with `n_inner` interior
 * times, tracking KL to the closed-form optimum, until it drops below
 * `threshold` or `max_iters` iterations have run.
 *
 * # Safety
 * `p0`, `p1`, `init` must be live handles and `out` writable.
 */
enum SbdStatus sbd_dimf_run(const struct SbdGaussian *p0,
                            const struct SbdGaussian *p1,
                            const struct SbdCoupling *init,
                            size_t n_inner,
                            double epsilon,
                            double threshold,
                            size_t max_iters,
                            struct SbdDimfResult **out);

/**
 * # Safety
 * `r` must be null or a live handle.
 */
void sbd_dimf_result_free(struct SbdDimfResult *r);

/**
 * Number of iterations run; zero when `r` is null.
 *
 * # Safety
 * `r` must be null or a live handle.
 */
size_t sbd_dimf_result_iterations(const struct SbdDimfResult *r);

/**
 * Whether the threshold was reached.
 *
 * # Safety
 * `r` must be null or a live handle.
 */
bool sbd_dimf_result_converged(const struct SbdDimfResult *r);

/**
 * Copies the per-iteration KL to the optimum and KL between consecutive
 * iterates. Either output may be null to skip it.
 *
 * # Safety
 * `r` must be a live handle; non-null outputs must hold `len` writable values.
 */
enum SbdStatus sbd_dimf_result_trace(const struct SbdDimfResult *r,
                                     double *kl_to_oracle,
                                     double *kl_step,
                                     size_t len);

/**
 * Final coupling of the run, as a new handle.
 *
 * # Safety
 * `r` must be a live handle and `out` writable.
 */
enum SbdStatus sbd_dimf_result_coupling(const struct SbdDimfResult *r, struct SbdCoupling **out);

/**
 * Entropic optimal coupling of two pmfs on `n` evenly spaced points of
 * `[lo, hi]`, written row-major into `out_pi` (`n * n` values).
 *
 * # Safety
 * `p0`, `p1` must hold `n` values and `out_pi` `n * n` writable values.
 */
enum SbdStatus sbd_grid_sinkhorn_1d(size_t n,
                                    double lo,
                                    double hi,
                                    const double *p0,
                                    const double *p1,
                                    double epsilon,
                                    double tol,
                                    double *out_pi);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SBRIDGE_DIMF_H */
