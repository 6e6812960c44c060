#ifndef VARBAND_H
#define VARBAND_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VbStatus {
  VB_STATUS_OK = 0,
  VB_STATUS_NULL_POINTER = 1,
  VB_STATUS_INVALID_PARAMETER = 2,
  VB_STATUS_DIMENSION_MISMATCH = 3,
  VB_STATUS_EMPTY_DECISION_SET = 4,
  VB_STATUS_INTERNAL = 5,
  /**
   * No pending selection to update from.
   */
  VB_STATUS_NO_PENDING_CHOICE = 6,
  VB_STATUS_PANIC = 7,
} VbStatus;

typedef enum VbBranch {
  VB_BRANCH_EXPLOIT = 0,
  VB_BRANCH_EXPLORE = 1,
  VB_BRANCH_UCB = 2,
  VB_BRANCH_ORACLE = 3,
} VbBranch;

/**
 * Opaque weighted ridge accumulator.
 */
typedef struct VbAccumulator VbAccumulator;

/**
 * Opaque SAVE learner; remembers its last selection until it is updated.
 */
typedef struct VbSave VbSave;

/**
 * Result of one SAVE selection.
 */
typedef struct VbChoice {
  size_t arm;
  enum VbBranch branch;
  /**
   * 1-based layer at which the selection stopped.
   */
  size_t layer;
  /**
   * Insertion weight, or 0 when the round is not explored.
   */
  double weight;
} VbChoice;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *vb_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *vb_version(void);

/**
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle pointer.
 */
enum VbStatus vb_accumulator_new(size_t dim, double reg, struct VbAccumulator **out);

/**
 * # Safety
 * `acc` must be null or a handle from [`vb_accumulator_new`] not yet freed.
 */
void vb_accumulator_free(struct VbAccumulator *acc);

/**
 * Adds `w^2 x x^T` to the Gram matrix and `w^2 y x` to the moment vector.
 *
 * # Safety
 * `acc` must be a live handle and `x` must point to `dim` readable doubles.
 */
enum VbStatus vb_accumulator_update(struct VbAccumulator *acc,
                                    double w,
                                    const double *x,
                                    size_t dim,
                                    double y);

/**
 * `sqrt(x^T Sigma^{-1} x)`.
 *
 * # Safety
 * `acc` must be a live handle, `x` must point to `dim` doubles and `out` to one.
 */
enum VbStatus vb_accumulator_norm(const struct VbAccumulator *acc,
                                  const double *x,
                                  size_t dim,
                                  double *out);

/**
 * Writes the ridge estimate `Sigma^{-1} b` into `out[0..dim]`.
 *
 * # Safety
 * `acc` must be a live handle and `out` must point to `dim` writable doubles.
 */
enum VbStatus vb_accumulator_theta(const struct VbAccumulator *acc, double *out, size_t dim);

/**
 * Number of updates applied so far, or 0 for a null handle.
 *
 * # Safety
 * `acc` must be null or a live handle.
 */
uint64_t vb_accumulator_count(const struct VbAccumulator *acc);

/**
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle pointer.
 */
enum VbStatus vb_save_new(size_t dim,
                          double alpha,
                          double delta,
                          double big_r,
                          struct VbSave **out);

/**
 * # Safety
 * `save` must be null or a handle from [`vb_save_new`] not yet freed.
 */
void vb_save_free(struct VbSave *save);

/**
 * Number of layers, or 0 for a null handle.
 *
 * # Safety
 * `save` must be null or a live handle.
 */
size_t vb_save_layers(const struct VbSave *save);

/**
 * Picks an arm from `n_arms` row-major arms of length `dim` each. The choice
 * is kept until the matching [`vb_save_update`].
 *
 * # Safety
 * `save` must be a live handle, `arms` must point to `n_arms * dim` doubles
 * and `out` to one writable [`VbChoice`].
 */
enum VbStatus vb_save_select(struct VbSave *save,
                             const double *arms,
                             size_t n_arms,
                             size_t dim,
                             struct VbChoice *out);

/**
 * Feeds back the reward of the arm returned by the last [`vb_save_select`] at
 * round `k`. `arm` holds that arm's `dim` coordinates.
 *
 * # Safety
 * `save` must be a live handle and `arm` must point to `dim` doubles.
 */
enum VbStatus vb_save_update(struct VbSave *save,
                             uint64_t k,
                             const double *arm,
                             size_t dim,
                             double reward);

/**
 * Writes per-layer sample counts into `out[0..len]`; `len` must equal the layer count.
 *
 * # Safety
 * `save` must be a live handle and `out` must point to `len` writable integers.
 */
enum VbStatus vb_save_counts(const struct VbSave *save, uint64_t *out, size_t len);

/**
 * Confidence radius of SAVE layer `ell` after round `k`.
 *
 * # Safety
 * `out` must point to one writable double.
 */
enum VbStatus vb_save_radius(size_t ell,
                             uint64_t k,
                             size_t big_l,
                             double delta,
                             double big_r,
                             double varhat,
                             uint64_t psi_count,
                             double *out);

/**
 * Confidence radius of UCRL-AVE layer `ell` at episode `k`.
 *
 * # Safety
 * `out` must point to one writable double.
 */
enum VbStatus vb_mdp_radius(size_t ell,
                            uint64_t k,
                            size_t big_l,
                            double delta,
                            size_t big_h,
                            double lambda,
                            double big_b,
                            double varhat,
                            uint64_t psi_count,
                            double *out);

/**
 * Freedman-style deviation bound for variance proxy `v` and increment bound `m`.
 *
 * # Safety
 * `out` must point to one writable double.
 */
enum VbStatus vb_freedman_radius(double v, double m, double delta, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VARBAND_H */
