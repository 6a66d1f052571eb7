#ifndef HPSEM_H
#define HPSEM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HpsemStatus {
  HPSEM_STATUS_OK = 0,
  HPSEM_STATUS_NULL_POINTER = 1,
  HPSEM_STATUS_INVALID_UTF8 = 2,
  // Malformed or inconsistent problem description.
  HPSEM_STATUS_SPEC = 3,
  // Singular system or another failure of the discrete problem.
  HPSEM_STATUS_NUMERICAL = 4,
  // Evaluation point outside the domain.
  HPSEM_STATUS_OUTSIDE = 5,
  // The requested quantity needs a known exact solution.
  HPSEM_STATUS_UNAVAILABLE = 6,
  HPSEM_STATUS_BUFFER_TOO_SMALL = 7,
  HPSEM_STATUS_PANIC = 8,
} HpsemStatus;

// A problem description, possibly tied to a builtin manufactured case.
typedef struct HpsemProblem HpsemProblem;

typedef struct HpsemSolution HpsemSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or an empty string.
// The pointer stays valid until the next call into this library on the
// same thread.
const char *hpsem_last_error(void);

// Parses a JSON problem spec.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum HpsemStatus hpsem_problem_from_json(const char *json, struct HpsemProblem **out);

// Loads one of the builtin manufactured cases by name.
//
// # Safety
// `name` must be a NUL-terminated string and `out` a valid pointer.
enum HpsemStatus hpsem_problem_from_case(const char *name, struct HpsemProblem **out);

// Sets the layer count `m` and polynomial degree `w`.
//
// # Safety
// `problem` must come from `hpsem_problem_from_*` and not be freed.
enum HpsemStatus hpsem_problem_set_discretization(struct HpsemProblem *problem, size_t m, size_t w);

// # Safety
// `problem` must be null or a handle not yet freed.
void hpsem_problem_free(struct HpsemProblem *problem);

// Assembles and solves the least-squares system. For builtin cases the
// data is spot-checked against the exact solution first and the broken
// H¹ error is recorded.
//
// # Safety
// `problem` must be a live handle and `out` a valid pointer.
enum HpsemStatus hpsem_solve(const struct HpsemProblem *problem, struct HpsemSolution **out);

// Number of unknowns of the solved system, 0 for a null handle.
//
// # Safety
// `solution` must be null or a live handle.
size_t hpsem_solution_unknowns(const struct HpsemSolution *solution);

// Value of the least-squares functional at the solution.
//
// # Safety
// `solution` must be a live handle and `out` a valid pointer.
enum HpsemStatus hpsem_solution_functional(const struct HpsemSolution *solution, double *out);

// Broken H¹ error against the exact solution; `Unavailable` when the
// problem did not come from a builtin case.
//
// # Safety
// `solution` must be a live handle and `out` a valid pointer.
enum HpsemStatus hpsem_solution_h1_error(const struct HpsemSolution *solution, double *out);

// Value at `(x, y)`. On element boundaries the one-sided values are
// averaged.
//
// # Safety
// `solution` must be a live handle and `out` a valid pointer.
enum HpsemStatus hpsem_solution_eval(const struct HpsemSolution *solution,
                                     double x,
                                     double y,
                                     double *out);

// Copies the unknown vector into `buf`. `needed` always receives its
// length; with a short or null buffer the call returns `BufferTooSmall`.
//
// # Safety
// `buf` must hold `len` doubles (or be null), `needed` must be valid.
enum HpsemStatus hpsem_solution_coefficients(const struct HpsemSolution *solution,
                                             double *buf,
                                             size_t len,
                                             size_t *needed);

// # Safety
// `solution` must be null or a handle not yet freed.
void hpsem_solution_free(struct HpsemSolution *solution);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HPSEM_H */
