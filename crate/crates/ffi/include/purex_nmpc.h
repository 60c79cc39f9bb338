#ifndef PUREX_NMPC_H
#define PUREX_NMPC_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PxStatus {
  PX_STATUS_OK = 0,
  PX_STATUS_NULL_POINTER = 1,
  PX_STATUS_INVALID_ARGUMENT = 2,
  PX_STATUS_IO = 3,
  PX_STATUS_CONFIG = 4,
  PX_STATUS_SOLVER = 5,
  PX_STATUS_INFEASIBLE = 6,
  PX_STATUS_SCENARIO_ABORTED = 7,
  PX_STATUS_BUFFER_TOO_SMALL = 8,
  PX_STATUS_PANIC = 99,
} PxStatus;

/**
 * Plant simulator handle.
 */
typedef struct PxPlant PxPlant;

/**
 * Trained surrogate handle.
 */
typedef struct PxSurrogate PxSurrogate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t px_last_error(char *buf, size_t len);

/**
 * Creates a plant at steady state for feed `u` and solvent `q`, or empty
 * (start-up) when `startup` is true. A null `config_path` uses the
 * built-in nominal configuration.
 *
 * # Safety
 * `config_path` must be null or a NUL-terminated string; `out` must be valid.
 */
enum PxStatus px_plant_new(const char *config_path,
                           double u,
                           double q,
                           bool startup,
                           struct PxPlant **out);

/**
 * # Safety
 * `plant` must be null or a handle from [`px_plant_new`] not yet freed.
 */
void px_plant_free(struct PxPlant *plant);

/**
 * Advances the plant by one control period.
 *
 * # Safety
 * `plant` must be a live handle.
 */
enum PxStatus px_plant_step(struct PxPlant *plant, double u, double q);

/**
 * Current time, product output y and raffinate leakage z.
 *
 * # Safety
 * `plant` must be a live handle; the out pointers must be valid or null.
 */
enum PxStatus px_plant_outputs(const struct PxPlant *plant, double *t, double *y, double *z);

/**
 * Aqueous uranium in each settler, stage 1 first. `len` must be at least
 * [`px_n_stages`].
 *
 * # Safety
 * `plant` must be a live handle and `buf` must point to `len` doubles.
 */
enum PxStatus px_plant_profile(const struct PxPlant *plant, double *buf, size_t len);

size_t px_n_stages(void);

/**
 * Loads surrogate weights written by `purex-nmpc train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid.
 */
enum PxStatus px_surrogate_load(const char *path, struct PxSurrogate **out);

/**
 * # Safety
 * `s` must be null or a handle from [`px_surrogate_load`] not yet freed.
 */
void px_surrogate_free(struct PxSurrogate *s);

/**
 * Number of past periods N in the regressor; each signal window holds N+1
 * values.
 *
 * # Safety
 * `s` must be a live handle.
 */
size_t px_surrogate_history(const struct PxSurrogate *s);

/**
 * One-step prediction. `y`, `u` and `q` each hold `len` = N+1 values,
 * oldest first. Writes ŷ(k+1) and the classifier verdict (1 when z stays
 * within tolerance).
 *
 * # Safety
 * `s` must be a live handle; `y`, `u`, `q` must point to `len` doubles;
 * the out pointers must be valid or null.
 */
enum PxStatus px_surrogate_predict(const struct PxSurrogate *s,
                                   const double *y,
                                   const double *u,
                                   const double *q,
                                   size_t len,
                                   double *y_next,
                                   int32_t *z_ok);

/**
 * Runs a named scenario ("startup", "critical", "perturbed", "custom")
 * and writes its record to `out_dir`. A negative `seed` keeps the
 * configured seed. On abort the partial record is still written and
 * `PX_STATUS_SCENARIO_ABORTED` is returned.
 *
 * # Safety
 * String arguments must be NUL-terminated; `config_path` may be null.
 */
enum PxStatus px_run_scenario(const char *scenario,
                              const char *config_path,
                              const char *weights_path,
                              const char *out_dir,
                              bool open_loop,
                              int64_t seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PUREX_NMPC_H */
