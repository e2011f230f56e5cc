/* C interface for the stable-velocity sampling and training toolkit.
 *
 * Every function that can fail returns an sv_status; SV_STATUS_OK means
 * success and anything else leaves a human-readable explanation in
 * sv_last_error_message() for the calling thread.  Pointers returned by
 * sv_*_new constructors own their object and must be released with the
 * matching sv_*_free.  All array arguments are row-major f64 buffers
 * owned by the caller. */

#ifndef STABLE_VELOCITY_H
#define STABLE_VELOCITY_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of an FFI call. Everything except `Ok` sets the thread-local
// message readable through `sv_last_error_message`.
typedef enum sv_status {
  // The call succeeded.
  SV_STATUS_OK = 0,
  // A required pointer argument was null.
  SV_STATUS_NULL_POINTER = 1,
  // An argument was out of range or inconsistent.
  SV_STATUS_INVALID_ARGUMENT = 2,
  // An output buffer was shorter than the result; the required length
  // was written to the size out-parameter when the signature has one.
  SV_STATUS_BUFFER_TOO_SMALL = 3,
  // A schedule was built or queried outside its valid domain.
  SV_STATUS_SCHEDULE_ERROR = 4,
  // A mixture specification failed validation.
  SV_STATUS_INVALID_SPEC = 5,
  // Array dimensions disagree.
  SV_STATUS_SHAPE_MISMATCH = 6,
  // A sampling plan or integration step was invalid.
  SV_STATUS_SOLVER_ERROR = 7,
  // A computation produced a non-finite value.
  SV_STATUS_NON_FINITE = 8,
  // A configuration value was inconsistent (for example, drawing from
  // an empty queue).
  SV_STATUS_CONFIG_ERROR = 9,
  // A file violated its format contract.
  SV_STATUS_FORMAT_ERROR = 10,
  // An operating-system I/O error.
  SV_STATUS_IO_ERROR = 11,
  // A serialization error.
  SV_STATUS_JSON_ERROR = 12,
  // An internal panic was caught at the boundary.
  SV_STATUS_PANIC = 13,
} sv_status;

// Interpolant schedule shape.
typedef enum sv_schedule_kind {
  // `alpha = 1 - t`, `sigma = t`.
  SV_SCHEDULE_KIND_LINEAR = 0,
  // `alpha = cos(pi t / 2)`, `sigma = sin(pi t / 2)`.
  SV_SCHEDULE_KIND_VP_COSINE = 1,
} sv_schedule_kind;

// Integrator for the high-time segment.
typedef enum sv_base_kind {
  // Deterministic probability-flow Euler steps.
  SV_BASE_KIND_EULER_ODE = 0,
  // Stochastic reverse-SDE Euler-Maruyama steps.
  SV_BASE_KIND_EULER_MARUYAMA = 1,
} sv_base_kind;

// Diffusion-coefficient choice for stochastic base steps.
typedef enum sv_wt_coefficient {
  // Coefficient equal to the schedule's noise scale.
  SV_WT_COEFFICIENT_SIGMA = 0,
  // Zero coefficient; the stochastic step degenerates to the
  // deterministic one.
  SV_WT_COEFFICIENT_ZERO = 1,
} sv_wt_coefficient;

// Per-class FIFO store of reference points with classifier-free-guidance
// label dropout on draws.
typedef struct sv_bank sv_bank;

// A Gaussian mixture with diagonal covariances, optionally labeled.
typedef struct sv_gmm sv_gmm;

// A two-regime sampling plan: a base solver from `t_max` down to `xi`,
// then posterior-transport steps from `xi` down to `t_min`.
typedef struct sv_plan sv_plan;

// An interpolant schedule together with its evaluation window.
typedef struct sv_schedule sv_schedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Explanation of the most recent failure on the calling thread. Never
// null; empty before the first failure. The pointer stays valid until
// the next failing call on the same thread.
const char *sv_last_error_message(void);

// Library version as a static nul-terminated string.
const char *sv_version(void);

// Linear schedule with the default time clamps.
struct sv_schedule *sv_schedule_linear(void);

// Variance-preserving cosine schedule with the default time clamps.
struct sv_schedule *sv_schedule_vp_cosine(void);

// Schedule with explicit time clamps `0 < t_min < t_max < 1`.
enum sv_status sv_schedule_new(enum sv_schedule_kind kind,
                               double t_min,
                               double t_max,
                               struct sv_schedule **out);

// Coefficients at time `t` inside the clamp window. Each out-pointer is
// optional; pass null to skip it.
enum sv_status sv_schedule_eval(const struct sv_schedule *schedule,
                                double t,
                                double *out_alpha,
                                double *out_sigma,
                                double *out_alpha_dot,
                                double *out_sigma_dot);

// Clamp window of a schedule.
enum sv_status sv_schedule_clamp_range(const struct sv_schedule *schedule,
                                       double *out_t_min,
                                       double *out_t_max);

// Releases a schedule. Accepts null.
void sv_schedule_free(struct sv_schedule *schedule);

// Builds a mixture from flat buffers. `weights` has `modes` entries
// summing to 1; `means` and `variances` are `modes x dim` row-major;
// `labels` is either null (unlabeled mixture) or `modes` class ids.
enum sv_status sv_gmm_new(size_t dim,
                          size_t modes,
                          const double *weights,
                          const double *means,
                          const double *variances,
                          const uint32_t *labels,
                          struct sv_gmm **out);

// Draws a random well-separated mixture: means uniform in `[-1, 1]`,
// per-coordinate variances uniform in `[0.01, 0.1]`. Deterministic in
// `seed`.
enum sv_status sv_gmm_random(size_t dim, size_t modes, uint64_t seed, struct sv_gmm **out);

// Dimension of a mixture; 0 for a null handle.
size_t sv_gmm_dim(const struct sv_gmm *gmm);

// Number of mixture components; 0 for a null handle.
size_t sv_gmm_modes(const struct sv_gmm *gmm);

// Draws `count` points into `out_points` (`count x dim`, row-major).
// For labeled mixtures, `out_labels` (length `count`) receives the class
// of each point when non-null; it must be null for unlabeled mixtures.
enum sv_status sv_gmm_sample(const struct sv_gmm *gmm,
                             uint64_t seed,
                             size_t count,
                             double *out_points,
                             uint32_t *out_labels);

// Exact velocity field of the mixture under `schedule` at `(xt, t)`.
// `xt` and `out` both have length `dim`, which must match the mixture.
enum sv_status sv_gmm_exact_velocity(const struct sv_gmm *gmm,
                                     const struct sv_schedule *schedule,
                                     double t,
                                     const double *xt,
                                     size_t dim,
                                     double *out);

// Log-density of the corrupted marginal at `(xt, t)`.
enum sv_status sv_gmm_log_density(const struct sv_gmm *gmm,
                                  const struct sv_schedule *schedule,
                                  double t,
                                  const double *xt,
                                  size_t dim,
                                  double *out);

// Releases a mixture. Accepts null.
void sv_gmm_free(struct sv_gmm *gmm);

// Velocity regression target built from a batch of reference points:
// each reference is weighted by its posterior probability of having
// produced `xt`, and the weighted average of the per-reference
// velocities is written to `out` (length `dim`). `refs` is
// `n_refs x dim`, row-major, with `n_refs >= 1`.
enum sv_status sv_weighted_target(const struct sv_schedule *schedule,
                                  const double *refs,
                                  size_t n_refs,
                                  size_t dim,
                                  const double *xt,
                                  double t,
                                  double *out);

// Bank with `capacity` rows per queue, one queue per class plus an
// unconditional queue under label `num_classes`, storing `dim`-vectors.
// `p_cfg` is the probability that a conditional draw is redirected to
// the unconditional queue.
enum sv_status sv_bank_new(size_t capacity,
                           uint32_t num_classes,
                           size_t dim,
                           double p_cfg,
                           struct sv_bank **out);

// Pushes one point (length `dim`) into the queue for `label` and into
// the unconditional queue, evicting the oldest row at capacity.
enum sv_status sv_bank_push(struct sv_bank *bank, const double *x0, size_t dim, uint32_t label);

// Current number of rows queued under `label` (the unconditional queue
// is label `num_classes`).
enum sv_status sv_bank_queue_len(const struct sv_bank *bank, uint32_t label, size_t *out_len);

// Label of the unconditional queue (`num_classes`); 0 for null.
uint32_t sv_bank_unconditional_label(const struct sv_bank *bank);

// Snapshot draw: resolves `label` through the guidance coin (a
// conditional label is redirected to the unconditional queue with
// probability `p_cfg`), then copies the resolved queue oldest-first into
// `buf` (`buf_rows x dim`, row-major). Writes the resolved label to
// `out_label` and the row count to `out_rows`. When `buf_rows` is too
// small, returns `BufferTooSmall` with the required count in `out_rows`
// and leaves `buf` untouched; `buf` may be null only in that probing
// mode.
enum sv_status sv_bank_draw(const struct sv_bank *bank,
                            uint32_t label,
                            uint64_t seed,
                            double *buf,
                            size_t buf_rows,
                            uint32_t *out_label,
                            size_t *out_rows);

// Releases a bank. Accepts null.
void sv_bank_free(struct sv_bank *bank);

// Plan with the library's default segmentation and integrators.
enum sv_status sv_plan_default(struct sv_plan **out);

// Fully specified plan. `xi` splits the two regimes and must lie inside
// the schedule's clamp window at sampling time; `high_steps` counts base
// steps on `[xi, t_max]`, `low_steps` transport steps on `[t_min, xi]`.
// A base-only plan sets `low_steps` to 0 with `xi` equal to the
// schedule's `t_min`, so the base segment covers the whole window.
// `f_beta` in `[0, 1]` is the noise fraction of transport steps. Times
// are spaced uniformly within each segment. Validation that depends on
// the schedule happens when the plan is used.
enum sv_status sv_plan_new(double xi,
                           size_t high_steps,
                           size_t low_steps,
                           enum sv_base_kind base,
                           double f_beta,
                           enum sv_wt_coefficient w_t,
                           struct sv_plan **out);

// Releases a plan. Accepts null.
void sv_plan_free(struct sv_plan *plan);

// Runs the plan end to end against the mixture's exact velocity field
// and writes `count` generated points to `out_points` (`count x dim`,
// row-major). Deterministic in `seed`: each generated row consumes its
// own substream, so results are independent of thread scheduling.
enum sv_status sv_sample_oracle(const struct sv_gmm *gmm,
                                const struct sv_schedule *schedule,
                                const struct sv_plan *plan,
                                uint64_t seed,
                                size_t count,
                                double *out_points);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STABLE_VELOCITY_H */
