#ifndef CHEMOKIN_H
#define CHEMOKIN_H

/* Generated by cbindgen from the chemokin-ffi crate; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Call succeeded.
 */
#define CHEMOKIN_OK 0

/**
 * The configuration was rejected; see `chemokin_last_error`.
 */
#define CHEMOKIN_ERR_CONFIG 2

/**
 * The run failed at runtime; see `chemokin_last_error`.
 */
#define CHEMOKIN_ERR_RUNTIME 3

/**
 * A required pointer argument was null.
 */
#define CHEMOKIN_ERR_NULL 4

/**
 * A string argument was not valid UTF-8.
 */
#define CHEMOKIN_ERR_UTF8 5

/**
 * Opaque, fully validated scenario.
 */
typedef struct ChemokinScenario ChemokinScenario;

/**
 * Aggregate results of a completed run.
 */
typedef struct {
  uint64_t steps;
  uint64_t recorded_rows;
  double final_mass;
  double mass_drift;
  uint64_t violations;
  /**
   * Maximum kinetic-agent L1 distance for comparison runs; NaN
   * otherwise.
   */
  double max_l1_distance;
  double wall_seconds;
} ChemokinRunSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (truncated,
 * always NUL-terminated when `len > 0`) and returns the full message
 * length in bytes.
 */
uintptr_t chemokin_last_error(char *buf, uintptr_t len);

/**
 * Loads and validates a scenario file. On success writes a handle into
 * `out` and returns `CHEMOKIN_OK`; the handle must be released with
 * `chemokin_scenario_free`.
 */
int32_t chemokin_scenario_load(const char *path, ChemokinScenario **out);

/**
 * Releases a scenario handle. Null is allowed.
 */
void chemokin_scenario_free(ChemokinScenario *scenario);

/**
 * Runs the scenario, writing all output files into `out_dir`. `summary`
 * may be null.
 */
int32_t chemokin_run(const ChemokinScenario *scenario,
                     const char *out_dir,
                     ChemokinRunSummary *summary);

/**
 * Renders the growth-hypothesis validation report into `buf` (truncated,
 * NUL-terminated) and returns the full length in bytes.
 */
uintptr_t chemokin_validation_report(const ChemokinScenario *scenario, char *buf, uintptr_t len);

/**
 * Solves the single-component elliptic signal equation
 * `d S'' + k n - k0 S = 0` on the periodic domain `[0, length)` for a
 * nodal density of `len` values. `s_out` and `dx_out` must hold `len`
 * doubles each; `dx_out` may be null.
 */
int32_t chemokin_solve_elliptic(const double *n,
                                uintptr_t len,
                                double length,
                                double diffusion,
                                double production,
                                double decay,
                                double *s_out,
                                double *dx_out);

/**
 * Library version as a static NUL-terminated string.
 */
const char *chemokin_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CHEMOKIN_H */
