#ifndef PGD_H
#define PGD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PgdGenerator {
  PGD_GENERATOR_R2_ANCHORED = 0,
  PGD_GENERATOR_R100_SPARSE = 1,
  PGD_GENERATOR_SYMMETRIC_PAIR = 2,
} PgdGenerator;

typedef enum PgdLoss {
  PGD_LOSS_EXPONENTIAL = 0,
  PGD_LOSS_LOGISTIC = 1,
} PgdLoss;

typedef enum PgdStatus {
  PGD_STATUS_OK = 0,
  PGD_STATUS_NULL_POINTER = 1,
  PGD_STATUS_INVALID_ARGUMENT = 2,
  PGD_STATUS_NOT_SEPARABLE = 3,
  PGD_STATUS_TIMEOUT = 4,
  PGD_STATUS_DIVERGED = 5,
  PGD_STATUS_INTERNAL = 6,
} PgdStatus;

/**
 * Opaque labelled dataset.
 */
typedef struct PgdDataset PgdDataset;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *pgd_last_error_message(void);

/**
 * Builds a dataset from `n` row-major points of dimension `dim` and `n`
 * labels in {-1, +1}.
 *
 * # Safety
 * `x` must point to `n * dim` doubles, `y` to `n`, `out` to writable storage.
 */
enum PgdStatus pgd_dataset_new(size_t dim,
                               size_t n,
                               const double *x,
                               const double *y,
                               struct PgdDataset **out);

/**
 * Builds one of the built-in fixtures.
 *
 * # Safety
 * `out` must point to writable storage.
 */
enum PgdStatus pgd_dataset_generate(enum PgdGenerator kind, uint64_t seed, struct PgdDataset **out);

/**
 * Releases a dataset. Null is ignored.
 *
 * # Safety
 * `ds` must come from this library and not be used afterwards.
 */
void pgd_dataset_free(struct PgdDataset *ds);

/**
 * Dimension of the dataset, 0 for null.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t pgd_dataset_dim(const struct PgdDataset *ds);

/**
 * Number of points, 0 for null.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t pgd_dataset_len(const struct PgdDataset *ds);

/**
 * Trains with p-GD from `w0` for `iterations` full-batch steps and writes
 * the final iterate to `w_out`. Both arrays hold `pgd_dataset_dim(ds)` doubles.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum PgdStatus pgd_train(const struct PgdDataset *ds,
                         double p,
                         double eta,
                         uint64_t iterations,
                         enum PgdLoss loss,
                         const double *w0,
                         double *w_out);

/**
 * Unit lp-norm max-margin direction, written to `direction_out`
 * (`pgd_dataset_dim(ds)` doubles), and its margin.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum PgdStatus pgd_max_margin(const struct PgdDataset *ds,
                              double p,
                              double tol,
                              double *direction_out,
                              double *margin_out);

/**
 * Bregman divergence of `(1/p) ||.||_p^p` between `x` and `y`.
 *
 * # Safety
 * `x` and `y` must hold `dim` doubles, `out` must be writable.
 */
enum PgdStatus pgd_bregman(double p, const double *x, const double *y, size_t dim, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PGD_H */
