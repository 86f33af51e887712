#ifndef REFRACTOR_FORGE_H
#define REFRACTOR_FORGE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum {
  RF_STATUS_OK = 0,
  RF_STATUS_NULL_POINTER = 1,
  RF_STATUS_INVALID_UTF8 = 2,
  /**
   * Malformed or inconsistent input.
   */
  RF_STATUS_CONFIG = 3,
  RF_STATUS_ASSUMPTION_H1 = 4,
  RF_STATUS_ASSUMPTION_H2 = 5,
  RF_STATUS_ASSUMPTION_H3 = 6,
  RF_STATUS_ASSUMPTION_H4 = 7,
  RF_STATUS_CONSERVATION = 8,
  RF_STATUS_INFEASIBLE_ANCHOR = 9,
  RF_STATUS_NON_CONVERGENCE = 10,
  RF_STATUS_OUTSIDE_APERTURE = 11,
  RF_STATUS_TOTAL_INTERNAL_REFLECTION = 12,
  RF_STATUS_BUFFER_TOO_SMALL = 13,
  RF_STATUS_PANIC = 14,
} RfStatus;

/**
 * Parsed scene.
 */
typedef struct RfScene RfScene;

/**
 * Solved scene.
 */
typedef struct RfSolution RfSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *rf_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into the library from the same thread.
 */
const char *rf_last_error_message(void);

/**
 * Parses a scene document.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
RfStatus rf_scene_from_json(const char *json, RfScene **out);

/**
 * # Safety
 * `scene` must come from [`rf_scene_from_json`] or be NULL.
 */
void rf_scene_free(RfScene *scene);

/**
 * Checks the scene; the status names the violated assumption.
 *
 * # Safety
 * `scene` must be a live handle.
 */
RfStatus rf_scene_validate(const RfScene *scene);

/**
 * Solves the scene with the anchor given in its solver block.
 *
 * # Safety
 * `scene` must be a live handle and `out` a valid pointer.
 */
RfStatus rf_scene_solve(const RfScene *scene, RfSolution **out);

/**
 * Loads a solution document written by the command line tool.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
RfStatus rf_solution_from_json(const char *json, RfSolution **out);

/**
 * # Safety
 * `sol` must come from this library or be NULL.
 */
void rf_solution_free(RfSolution *sol);

/**
 * Number of targets (0 for NULL).
 *
 * # Safety
 * `sol` must be a live handle or NULL.
 */
size_t rf_solution_len(const RfSolution *sol);

/**
 * Copies the block parameters into `out[0..len]`.
 *
 * # Safety
 * `sol` must be a live handle and `out` must hold `len` doubles.
 */
RfStatus rf_solution_params(const RfSolution *sol, double *out, size_t len);

/**
 * Copies the energy received by each target into `out[0..len]`.
 *
 * # Safety
 * `sol` must be a live handle and `out` must hold `len` doubles.
 */
RfStatus rf_solution_masses(const RfSolution *sol, double *out, size_t len);

/**
 * Solution document as a NUL-terminated JSON string; release it with
 * [`rf_string_free`]. NULL on failure.
 *
 * # Safety
 * `sol` must be a live handle.
 */
char *rf_solution_to_json(const RfSolution *sol);

/**
 * # Safety
 * `s` must come from this library or be NULL.
 */
void rf_string_free(char *s);

/**
 * Radius of the solved surface in direction `x`.
 *
 * # Safety
 * `sol` must be a live handle, `x` must point to 3 doubles, `out` to one.
 */
RfStatus rf_solution_radius(const RfSolution *sol, const double *x, double *out);

/**
 * Monte-Carlo ray trace of the solution. `masses` receives the energy per
 * target; `miss` and `tir` may be NULL.
 *
 * # Safety
 * `sol` must be a live handle and `masses` must hold `len` doubles.
 */
RfStatus rf_solution_raytrace(const RfSolution *sol,
                              uint64_t n_rays,
                              double capture_radius,
                              uint64_t seed,
                              double *masses,
                              size_t len,
                              double *miss,
                              double *tir);

/**
 * Radius in direction `x` of the oval `|X| + kappa |X - P| = b`.
 *
 * # Safety
 * `p` and `x` must point to 3 doubles, `out` to one.
 */
RfStatus rf_oval_radius(const double *p, double b, double kappa, const double *x, double *out);

/**
 * Refracted unit direction of the ray `x` at a surface with unit normal `nu`.
 *
 * # Safety
 * `x`, `nu` and `m_out` must point to 3 doubles.
 */
RfStatus rf_refract(const double *x, const double *nu, double kappa, double *m_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REFRACTOR_FORGE_H */
