#ifndef SWITCHCTL_H
#define SWITCHCTL_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum ScStatus {
  SC_STATUS_OK = 0,
  SC_STATUS_NULL_POINTER = 1,
  SC_STATUS_DIMENSION = 2,
  SC_STATUS_INVALID_ARGUMENT = 3,
  SC_STATUS_CONFIG = 4,
  SC_STATUS_WARM_START = 5,
  SC_STATUS_UNSTABLE = 6,
  SC_STATUS_NUMERICAL = 7,
  SC_STATUS_IO = 8,
  SC_STATUS_PANIC = 9,
} ScStatus;

// Outcome of a synthesis call.
typedef enum ScSdpStatus {
  SC_SDP_STATUS_OPTIMAL = 0,
  SC_SDP_STATUS_INFEASIBLE = 1,
  SC_SDP_STATUS_NUMERICAL_FAILURE = 2,
} ScSdpStatus;

// Online supervisor state.
typedef struct ScController ScController;

// A completed closed-loop run.
typedef struct ScRun ScRun;

// Sliding window of input-state samples.
typedef struct ScWindow ScWindow;

// Supervisor parameters. `delta_x < 0` means unset; `window == 0` selects
// the minimal window.
typedef struct ScSupervisorParams {
  double lambda0;
  double delta_v;
  double delta_eps;
  double delta_x;
  double alpha;
  size_t window;
  uint64_t excitation_seed;
  double pe_target;
} ScSupervisorParams;

typedef struct ScStepResult {
  bool solved_sdp;
  double aux_value;
  // 0 excite, 1 solve, 2 hold, 3 dormant; phase after the step.
  uint32_t phase;
} ScStepResult;

typedef struct ScRunSummary {
  size_t steps;
  size_t n_x;
  size_t n_u;
  double sup_norm;
  double max_gain_norm;
  // -1 when no ISpS report was produced.
  int32_t isps_verdict;
} ScRunSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` as a
// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
// message length without the terminator.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t sc_last_error_message(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *sc_version(void);

// Writes `N` and the minimal window `2N - 1` for the given dimensions.
//
// # Safety
// `n_excite` and `window` must be valid for writes.
enum ScStatus sc_compute_n(size_t n_x, size_t n_u, size_t *n_excite, size_t *window);

// Spectral radius of the `n x n` matrix `a`.
//
// # Safety
// `a` must hold `n * n` doubles and `out` must be valid for writes.
enum ScStatus sc_spectral_radius(const double *a, size_t n, double *out);

// Solves `A' P A - P + beta I = 0` for a Schur stable `A`.
//
// # Safety
// `a` must hold `n * n` doubles and `p_out` room for `n * n` doubles.
enum ScStatus sc_discrete_lyapunov(const double *a, size_t n, double beta, double *p_out);

// Solves the robust program on `U- (n_u x t)`, `X- (n_x x t)` and
// `X+ (n_x x t)`. On `Optimal` the gain is written to `k_out (n_u x n_x)`
// and the cost to `gamma_out`; otherwise both are left untouched.
//
// # Safety
// Input arrays must hold the stated number of doubles; output pointers
// must be valid for writes.
enum ScStatus sc_solve_robust_sdp(const double *u_minus,
                                  const double *x_minus,
                                  const double *x_plus,
                                  size_t n_x,
                                  size_t n_u,
                                  size_t t,
                                  double alpha,
                                  enum ScSdpStatus *status_out,
                                  double *k_out,
                                  double *gamma_out);

// Creates an empty window of `capacity` samples whose latest state is
// `x0 (n_x)` at time `k0`.
//
// # Safety
// `x0` must hold `n_x` doubles and `out` must be valid for writes.
enum ScStatus sc_window_new(size_t capacity,
                            size_t n_x,
                            size_t n_u,
                            int64_t k0,
                            const double *x0,
                            struct ScWindow **out);

// # Safety
// `w` must be null or a handle from [`sc_window_new`] not freed before.
void sc_window_free(struct ScWindow *w);

// Appends the input applied at the latest time and the state it led to.
//
// # Safety
// `w` must be a live handle; `u` and `x_next` must hold `n_u` and `n_x`
// doubles.
enum ScStatus sc_window_push(struct ScWindow *w, const double *u, const double *x_next);

// Number of samples currently held.
//
// # Safety
// `w` must be a live handle and `out` valid for writes.
enum ScStatus sc_window_len(const struct ScWindow *w, size_t *out);

// Rank test on `W = [U-; X-]` of the held samples.
//
// # Safety
// `w` must be a live handle; `full_rank` and `sigma_min` valid for writes.
enum ScStatus sc_window_rank_condition(const struct ScWindow *w,
                                       bool *full_rank,
                                       double *sigma_min);

// Builds a controller from a full window of offline data.
//
// # Safety
// `offline` must be a live handle, `params` readable and `out` valid for
// writes.
enum ScStatus sc_controller_new(const struct ScWindow *offline,
                                const struct ScSupervisorParams *params,
                                struct ScController **out);

// # Safety
// `c` must be null or a handle from [`sc_controller_new`] not freed before.
void sc_controller_free(struct ScController *c);

// Computes the input for state `x (n_x)` given the current window and
// writes it to `u_out (n_u)`. The caller then pushes `(u, x_next)` into
// the window.
//
// # Safety
// Handles must be live; `x` must hold `n_x` doubles, `u_out` room for
// `n_u`, and `result` must be null or valid for writes.
enum ScStatus sc_controller_step(struct ScController *c,
                                 const struct ScWindow *window,
                                 const double *x,
                                 double *u_out,
                                 struct ScStepResult *result);

// Current gain `K (n_u x n_x)`.
//
// # Safety
// `c` must be a live handle and `k_out` have room for `n_u * n_x` doubles.
enum ScStatus sc_controller_gain(const struct ScController *c, double *k_out);

// Runs the experiment described by the TOML text `config`.
//
// # Safety
// `config` must be a NUL-terminated string and `out` valid for writes.
enum ScStatus sc_run_new(const char *config, struct ScRun **out);

// # Safety
// `r` must be null or a handle from [`sc_run_new`] not freed before.
void sc_run_free(struct ScRun *r);

// # Safety
// `r` must be a live handle and `out` valid for writes.
enum ScStatus sc_run_summary(const struct ScRun *r, struct ScRunSummary *out);

// State at record `index` (0 for `k = 0`), written to `x_out (n_x)`.
//
// # Safety
// `r` must be a live handle and `x_out` have room for `n_x` doubles.
enum ScStatus sc_run_state(const struct ScRun *r, size_t index, double *x_out);

// Writes the CSV, summary and plots of a run into `dir`.
//
// # Safety
// `r` must be a live handle and `dir` a NUL-terminated string.
enum ScStatus sc_run_write(const struct ScRun *r, const char *dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SWITCHCTL_H */
