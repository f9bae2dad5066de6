#ifndef VCREG_H
#define VCREG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VcregStatus {
  VCREG_STATUS_OK = 0,
  VCREG_STATUS_PARSE = 2,
  VCREG_STATUS_INVALID_INPUT = 3,
  VCREG_STATUS_RANK_DEFICIENT = 4,
  VCREG_STATUS_INSUFFICIENT_REPLICATES = 5,
  VCREG_STATUS_INFEASIBLE = 6,
  VCREG_STATUS_BUDGET_EXCEEDED = 7,
  VCREG_STATUS_NUMERICAL = 8,
  VCREG_STATUS_IO = 9,
  VCREG_STATUS_NULL_POINTER = 10,
  VCREG_STATUS_BUFFER_TOO_SMALL = 11,
  VCREG_STATUS_PANIC = 12,
} VcregStatus;

// How counts become a design matrix.
typedef enum VcregCorrection {
  // `log(W + 1/2)`.
  VCREG_CORRECTION_MULTINOMIAL = 0,
  // Dirichlet-multinomial offset with one shared concentration.
  VCREG_CORRECTION_DIRICHLET_MULTINOMIAL = 1,
  // Dirichlet-multinomial offset with concentrations estimated from
  // rows `i` and `i + n/2` as replicate pairs.
  VCREG_CORRECTION_DIRICHLET_MULTINOMIAL_PAIRED = 2,
  // `log(max(W, c))`.
  VCREG_CORRECTION_ZERO_REPLACE = 3,
} VcregCorrection;

typedef struct VcregCounts VcregCounts;

typedef struct VcregFit VcregFit;

typedef struct VcregSimulation VcregSimulation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next call into this library on the same thread.
const char *vcreg_last_error(void);

// Builds a count table from `n * p` row-major counts.
//
// # Safety
// `data` must point to `n * p` readable values and `out` must be writable.
enum VcregStatus vcreg_counts_new(const uint64_t *data,
                                  size_t n,
                                  size_t p,
                                  struct VcregCounts **out);

// Reads a count table from a CSV file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` must be writable.
enum VcregStatus vcreg_counts_load(const char *path, struct VcregCounts **out);

// # Safety
// `counts` must be a live handle; `n` and `p` must be writable or null.
enum VcregStatus vcreg_counts_shape(const struct VcregCounts *counts, size_t *n, size_t *p);

// # Safety
// `counts` must come from this library and not be used afterwards.
void vcreg_counts_free(struct VcregCounts *counts);

// Writes the corrected `n * p` design, row-major, into `design`.
// `param` is the concentration for `DirichletMultinomial` (infinity allowed)
// and the replacement constant for `ZeroReplace`; it is ignored otherwise.
//
// # Safety
// `counts` must be a live handle and `design` must hold `len` values.
enum VcregStatus vcreg_correct(const struct VcregCounts *counts,
                               enum VcregCorrection method,
                               double param,
                               double *design,
                               size_t len);

// Fits the constrained Lasso at a fixed `lambda`. `constraint` is a
// row-major `p * k` matrix `C` imposing `C^T beta = 0`; pass null for the
// sum-to-zero constraint.
//
// # Safety
// Pointers must reference arrays of the stated sizes and `out` must be writable.
enum VcregStatus vcreg_fit(const double *design,
                           size_t n,
                           size_t p,
                           const double *response,
                           const double *constraint,
                           size_t k,
                           double lambda,
                           struct VcregFit **out);

// Chooses `lambda` by K-fold cross-validation and refits on all rows.
//
// # Safety
// Same contract as [`vcreg_fit`].
enum VcregStatus vcreg_fit_cv(const double *design,
                              size_t n,
                              size_t p,
                              const double *response,
                              const double *constraint,
                              size_t k,
                              size_t folds,
                              uint64_t seed,
                              struct VcregFit **out);

// Copies the coefficients into `beta`, which must hold at least `p` values.
//
// # Safety
// `fit` must be a live handle and `beta` must hold `len` values.
enum VcregStatus vcreg_fit_coefficients(const struct VcregFit *fit, double *beta, size_t len);

// Number of coefficients, or zero for a null handle.
//
// # Safety
// `fit` must be a live handle or null.
size_t vcreg_fit_len(const struct VcregFit *fit);

// Penalty the fit was solved at, or NaN for a null handle.
//
// # Safety
// `fit` must be a live handle or null.
double vcreg_fit_lambda(const struct VcregFit *fit);

// KKT certificate of the fit, or NaN for a null handle.
//
// # Safety
// `fit` must be a live handle or null.
double vcreg_fit_kkt_gap(const struct VcregFit *fit);

// # Safety
// `fit` must come from this library and not be used afterwards.
void vcreg_fit_free(struct VcregFit *fit);

// Draws the reference synthetic dataset: paired rows, negative binomial
// depths, noise sd 0.5. `alpha` may be infinity for multinomial counts.
//
// # Safety
// `out` must be writable.
enum VcregStatus vcreg_simulate(size_t n,
                                size_t p,
                                double alpha,
                                uint64_t seed,
                                struct VcregSimulation **out);

// Copies the simulated counts into a new handle.
//
// # Safety
// `sim` must be a live handle and `out` must be writable.
enum VcregStatus vcreg_simulation_counts(const struct VcregSimulation *sim,
                                         struct VcregCounts **out);

// Copies the `n` responses.
//
// # Safety
// `sim` must be a live handle and `y` must hold `len` values.
enum VcregStatus vcreg_simulation_response(const struct VcregSimulation *sim,
                                           double *y,
                                           size_t len);

// Copies the `p` true coefficients.
//
// # Safety
// `sim` must be a live handle and `beta` must hold `len` values.
enum VcregStatus vcreg_simulation_beta(const struct VcregSimulation *sim, double *beta, size_t len);

// # Safety
// `sim` must come from this library and not be used afterwards.
void vcreg_simulation_free(struct VcregSimulation *sim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VCREG_H */
