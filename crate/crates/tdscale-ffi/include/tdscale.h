#ifndef TDSCALE_H
#define TDSCALE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible function.
 */
enum TdscaleStatus
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  /**
   * Success.
   */
  TDSCALE_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  TDSCALE_STATUS_NULL_POINTER = -1,
  /**
   * An input or internal value was NaN or infinite.
   */
  TDSCALE_STATUS_NON_FINITE = -2,
  /**
   * Not enough observations to answer the query.
   */
  TDSCALE_STATUS_INSUFFICIENT_SAMPLES = -3,
  /**
   * A parameter was out of its documented range.
   */
  TDSCALE_STATUS_INVALID_PARAM = -4,
  /**
   * Two array arguments had different lengths.
   */
  TDSCALE_STATUS_LENGTH_MISMATCH = -5,
  /**
   * Any other error.
   */
  TDSCALE_STATUS_INTERNAL = -99,
};
#ifndef __cplusplus
typedef int32_t TdscaleStatus;
#endif // __cplusplus

/**
 * Opaque streaming mean/variance accumulator.
 */
typedef struct TdscaleMoments TdscaleMoments;

/**
 * Opaque Pop-Art target-normalization state.
 */
typedef struct TdscalePopart TdscalePopart;

/**
 * Opaque accumulator of reward/discount/return moments over episodes.
 */
typedef struct TdscaleReturnStats TdscaleReturnStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Create an empty moments accumulator. Never fails.
 */
struct TdscaleMoments *tdscale_moments_new(void);

/**
 * Release an accumulator. NULL is a no-op.
 */
void tdscale_moments_free(struct TdscaleMoments *m);

/**
 * Fold one observation into the accumulator.
 */
TdscaleStatus tdscale_moments_update(struct TdscaleMoments *m, double x);

/**
 * Merge `other` into `m` (parallel-reduction step); `other` is unchanged.
 */
TdscaleStatus tdscale_moments_merge(struct TdscaleMoments *m, const struct TdscaleMoments *other);

/**
 * Number of observations folded in so far.
 */
TdscaleStatus tdscale_moments_count(const struct TdscaleMoments *m, uint64_t *out);

/**
 * Mean of the observations; needs at least one sample.
 */
TdscaleStatus tdscale_moments_mean(const struct TdscaleMoments *m, double *out);

/**
 * Population variance; needs at least one sample.
 */
TdscaleStatus tdscale_moments_variance(const struct TdscaleMoments *m, double *out);

/**
 * Create an empty return-statistics accumulator. Never fails.
 */
struct TdscaleReturnStats *tdscale_return_stats_new(void);

/**
 * Release the accumulator. NULL is a no-op.
 */
void tdscale_return_stats_free(struct TdscaleReturnStats *s);

/**
 * Fold one complete episode into the statistics. `rewards` and
 * `discounts` are arrays of length `len`; `truncated` nonzero marks an
 * episode cut off by a time-out rather than termination (its returns
 * are excluded from the G moments).
 */
TdscaleStatus tdscale_return_stats_accumulate(struct TdscaleReturnStats *s,
                                              const double *rewards,
                                              const double *discounts,
                                              uintptr_t len,
                                              int32_t truncated);

/**
 * Merge `other` into `s`; `other` is unchanged.
 */
TdscaleStatus tdscale_return_stats_merge(struct TdscaleReturnStats *s,
                                         const struct TdscaleReturnStats *other);

/**
 * The scale estimate sigma^2 = V[R] + V[gamma]·E[G^2] and its parts.
 * Any out pointer may be NULL to skip that component.
 */
TdscaleStatus tdscale_return_stats_sigma(const struct TdscaleReturnStats *s,
                                         double *out_sigma,
                                         double *out_var_r,
                                         double *out_var_gamma,
                                         double *out_e_g2);

/**
 * The effective scale max(sigma, sigma_v, sigma_batch) used as the
 * TD-error divisor.
 */
TdscaleStatus tdscale_return_stats_sigma_effective(const struct TdscaleReturnStats *s,
                                                   double sigma_v,
                                                   double sigma_batch,
                                                   double *out);

/**
 * Create a Pop-Art state; `step_size` in (0,1], `0 < lower <= upper`.
 * Returns NULL on invalid parameters.
 */
struct TdscalePopart *tdscale_popart_new(double step_size, double lower, double upper);

/**
 * Create a Pop-Art state with the customary parameters
 * (step size 1e-3, bounds [1e-3, 1e3]). Never fails.
 */
struct TdscalePopart *tdscale_popart_new_default(void);

/**
 * Release the state. NULL is a no-op.
 */
void tdscale_popart_free(struct TdscalePopart *p);

/**
 * Observe one unnormalized target, update (mu, nu, sigma), and rescale
 * the `len` last-layer weights `w` and bias `*b` in place so that
 * unnormalized outputs are preserved. `w`/`b` may be NULL when there
 * are no parameters to correct.
 */
TdscaleStatus tdscale_popart_observe_preserve(struct TdscalePopart *p,
                                              double target,
                                              double *w,
                                              uintptr_t len,
                                              double *b);

/**
 * Current normalization statistics. Out pointers may be NULL.
 */
TdscaleStatus tdscale_popart_stats(const struct TdscalePopart *p,
                                   double *out_mu,
                                   double *out_sigma);

/**
 * Clamp a reward to [-1, 1].
 */
double tdscale_clip_reward(double r);

/**
 * Signed hyperbolic squashing sign(x)(sqrt(|x|+1)-1).
 */
double tdscale_signed_hyperbolic(double x);

/**
 * Inverse of the signed hyperbolic squashing.
 */
double tdscale_signed_hyperbolic_inv(double y);

/**
 * Closed-form V[gamma] for complete episodes of `episode_len` steps
 * with constant in-episode discount `gamma` and a terminal zero.
 */
TdscaleStatus tdscale_var_gamma_closed_form(double gamma, uint64_t episode_len, double *out);

/**
 * Brownian-motion return-variance approximation V[G] = V[R]/(1-gamma_bar).
 */
TdscaleStatus tdscale_brownian_var_g(double var_r, double gamma_bar, double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* TDSCALE_H */
