#ifndef FRAX_H
#define FRAX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Linear solver for the condensed flow system.
 */
typedef enum FraxSolver {
  FRAX_SOLVER_CHOLESKY = 0,
  FRAX_SOLVER_CG = 1,
} FraxSolver;

typedef enum FraxStatus {
  FRAX_STATUS_OK = 0,
  FRAX_STATUS_NULL_POINTER = 1,
  FRAX_STATUS_INVALID_ARGUMENT = 2,
  FRAX_STATUS_IO = 3,
  FRAX_STATUS_GEOMETRY = 4,
  FRAX_STATUS_MESH = 5,
  FRAX_STATUS_FLOW = 6,
  FRAX_STATUS_SOLVER = 7,
  FRAX_STATUS_TRANSPORT = 8,
  FRAX_STATUS_PANIC = 9,
} FraxStatus;

/**
 * A flow problem with optional transport data.
 */
typedef struct FraxProblem FraxProblem;

/**
 * A solved flow field.
 */
typedef struct FraxSolution FraxSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next frax call on the same thread.
 */
const char *frax_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *frax_version(void);

/**
 * Builds a built-in benchmark such as `"regular2d-conductive"`.
 *
 * # Safety
 * `id` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FraxStatus frax_benchmark_new(const char *id, uint32_t level, struct FraxProblem **out);

/**
 * Builds a problem from a run configuration file (`[flow]` and optional
 * `[transport]` sections). Relative paths resolve against the file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FraxStatus frax_problem_from_config(const char *path, struct FraxProblem **out);

/**
 * # Safety
 * `problem` must come from a frax constructor and not be used afterwards.
 */
void frax_problem_free(struct FraxProblem *problem);

/**
 * # Safety
 * `problem` and `out` must be valid pointers.
 */
enum FraxStatus frax_problem_num_cells(const struct FraxProblem *problem, size_t *out);

/**
 * Solves the flow problem. `cg_tol` is ignored for the direct solver.
 *
 * # Safety
 * `problem` and `out` must be valid pointers.
 */
enum FraxStatus frax_flow_solve(const struct FraxProblem *problem,
                                enum FraxSolver solver,
                                double cg_tol,
                                struct FraxSolution **out);

/**
 * # Safety
 * `solution` must come from [`frax_flow_solve`] and not be used afterwards.
 */
void frax_solution_free(struct FraxSolution *solution);

/**
 * # Safety
 * `solution` and `out` must be valid pointers.
 */
enum FraxStatus frax_solution_num_cells(const struct FraxSolution *solution, size_t *out);

/**
 * Number of globally coupled unknowns of the condensed system.
 *
 * # Safety
 * `solution` and `out` must be valid pointers.
 */
enum FraxStatus frax_solution_num_dofs(const struct FraxSolution *solution, size_t *out);

/**
 * Copies the cell pressures into `buf`, which must hold exactly `len`
 * values with `len` equal to the cell count.
 *
 * # Safety
 * `buf` must point to `len` writable doubles.
 */
enum FraxStatus frax_solution_cell_pressure(const struct FraxSolution *solution,
                                            double *buf,
                                            size_t len);

/**
 * Largest `|∫_∂K u·n − ∫_K f|` over the cells.
 *
 * # Safety
 * `solution` and `out` must be valid pointers.
 */
enum FraxStatus frax_solution_max_mass_residual(const struct FraxSolution *solution, double *out);

/**
 * Postprocessed pressure at `(x, y)`.
 *
 * # Safety
 * `solution` and `out` must be valid pointers.
 */
enum FraxStatus frax_solution_pressure_at(const struct FraxSolution *solution,
                                          double x,
                                          double y,
                                          double *out);

/**
 * Samples the postprocessed pressure at `n ≥ 2` evenly spaced points from
 * `(x0, y0)` to `(x1, y1)`, writing arc lengths to `s` and values to `values`.
 *
 * # Safety
 * `s` and `values` must each point to `n` writable doubles.
 */
enum FraxStatus frax_solution_pressure_profile(const struct FraxSolution *solution,
                                               double x0,
                                               double y0,
                                               double x1,
                                               double y1,
                                               size_t n,
                                               double *s,
                                               double *values);

/**
 * Runs the problem's transport to its final time on the solved flow and
 * writes the final cell concentrations to `buf` (`len` = cell count).
 * `max_mass_defect` receives the worst relative per-step mass defect and
 * may be null.
 *
 * # Safety
 * `buf` must point to `len` writable doubles.
 */
enum FraxStatus frax_transport_run(const struct FraxProblem *problem,
                                   const struct FraxSolution *solution,
                                   double *buf,
                                   size_t len,
                                   double *max_mass_defect);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FRAX_H */
