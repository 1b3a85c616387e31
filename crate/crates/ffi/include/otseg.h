#ifndef OTSEG_H
#define OTSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OtsegStatus {
  OTSEG_STATUS_OK = 0,
  OTSEG_STATUS_NULL_POINTER = 1,
  OTSEG_STATUS_INVALID_ARGUMENT = 2,
  OTSEG_STATUS_CONFIG = 3,
  OTSEG_STATUS_DEGENERATE_KERNEL = 4,
  OTSEG_STATUS_PARSE = 5,
  OTSEG_STATUS_FORMAT = 6,
  OTSEG_STATUS_IO = 7,
  /**
   * The output buffer length does not match the result.
   */
  OTSEG_STATUS_BUFFER_SIZE = 8,
  OTSEG_STATUS_PANIC = 9,
} OtsegStatus;

/**
 * Unit-norm subclass centers, `classes * clusters_per_class` rows.
 */
typedef struct OtsegCenterBank OtsegCenterBank;

/**
 * Result of one clustering pass.
 */
typedef struct OtsegClusterOutcome OtsegClusterOutcome;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *otseg_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated, always
 * NUL-terminated when `len > 0`). Returns the full message length including
 * the terminator, or 0 if the last call succeeded.
 *
 * # Safety
 * `buf` must be null or valid for `len` writes.
 */
size_t otseg_last_error_message(char *buf, size_t len);

/**
 * Solves the entropic transport problem on the `m x n` similarity matrix.
 * `out_plan` (`m * n`) is required; `out_u` (`m`), `out_v` (`n`),
 * `out_iters` and `out_converged` may be null.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum OtsegStatus otseg_sinkhorn_solve(const double *similarity,
                                      size_t m,
                                      size_t n,
                                      double lambda,
                                      size_t max_iters,
                                      double tolerance,
                                      double *out_plan,
                                      double *out_u,
                                      double *out_v,
                                      size_t *out_iters,
                                      bool *out_converged);

/**
 * Seeded random centers.
 *
 * # Safety
 * `out` must be valid for one write.
 */
enum OtsegStatus otseg_center_bank_new(size_t classes,
                                       size_t clusters_per_class,
                                       size_t dim,
                                       uint64_t seed,
                                       struct OtsegCenterBank **out);

/**
 * Wraps caller-provided centers (`classes * clusters_per_class` rows of
 * `dim`); rows are renormalized.
 *
 * # Safety
 * `centers` must be valid for the stated size, `out` for one write.
 */
enum OtsegStatus otseg_center_bank_from_centers(size_t classes,
                                                size_t clusters_per_class,
                                                size_t dim,
                                                const double *centers,
                                                struct OtsegCenterBank **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string, `out` valid for one write.
 */
enum OtsegStatus otseg_center_bank_load(const char *path, struct OtsegCenterBank **out);

/**
 * # Safety
 * `bank` must be a live handle and `path` a NUL-terminated string.
 */
enum OtsegStatus otseg_center_bank_save(const struct OtsegCenterBank *bank,
                                        const char *path,
                                        uint64_t seed,
                                        uint64_t step);

/**
 * # Safety
 * `bank` must be null or a handle not yet freed.
 */
void otseg_center_bank_free(struct OtsegCenterBank *bank);

/**
 * Any of the outputs may be null.
 *
 * # Safety
 * `bank` must be a live handle; outputs null or valid for one write.
 */
enum OtsegStatus otseg_center_bank_shape(const struct OtsegCenterBank *bank,
                                         size_t *classes,
                                         size_t *clusters_per_class,
                                         size_t *dim);

/**
 * Copies every center, row-major, into `out` (`len` must equal rows * dim).
 *
 * # Safety
 * `bank` must be a live handle, `out` valid for `len` writes.
 */
enum OtsegStatus otseg_center_bank_centers(const struct OtsegCenterBank *bank,
                                           double *out,
                                           size_t len);

/**
 * Clusters the points of every class against the bank. `embeddings` is
 * `n x dim` with unit-norm rows; `class_labels` has `n` entries.
 *
 * # Safety
 * Pointers must be valid for the stated sizes; `out` for one write.
 */
enum OtsegStatus otseg_center_bank_assign(const struct OtsegCenterBank *bank,
                                          const double *embeddings,
                                          size_t n,
                                          size_t dim,
                                          const uint32_t *class_labels,
                                          double lambda,
                                          size_t max_iters,
                                          double tolerance,
                                          struct OtsegClusterOutcome **out);

/**
 * Blends the outcome's batch means into the centers with momentum `mu`.
 *
 * # Safety
 * Both handles must be live.
 */
enum OtsegStatus otseg_center_bank_momentum_update(struct OtsegCenterBank *bank,
                                                   const struct OtsegClusterOutcome *outcome,
                                                   double mu);

/**
 * Number of points in the outcome.
 *
 * # Safety
 * `outcome` must be null or a live handle.
 */
size_t otseg_cluster_outcome_len(const struct OtsegClusterOutcome *outcome);

/**
 * Copies the global subclass id (`class * M + cluster`) of each point.
 *
 * # Safety
 * `outcome` must be a live handle and `out` valid for `len` writes.
 */
enum OtsegStatus otseg_cluster_outcome_labels(const struct OtsegClusterOutcome *outcome,
                                              uint32_t *out,
                                              size_t len);

/**
 * Number of per-class solves that hit the iteration cap.
 *
 * # Safety
 * `outcome` must be null or a live handle.
 */
size_t otseg_cluster_outcome_unconverged(const struct OtsegClusterOutcome *outcome);

/**
 * # Safety
 * `outcome` must be null or a handle not yet freed.
 */
void otseg_cluster_outcome_free(struct OtsegClusterOutcome *outcome);

/**
 * Mean softmax cross-entropy of `n x classes` logits. `out_grad` may be null.
 *
 * # Safety
 * Pointers must be valid for the stated sizes.
 */
enum OtsegStatus otseg_ce_loss(const double *logits,
                               size_t n,
                               size_t classes,
                               const uint32_t *labels_,
                               double *out_value,
                               double *out_grad);

/**
 * Point-point contrast of `n` anchors against a pool of `p` rows.
 * `all_contrasts` puts every non-anchor pool entry in the denominator
 * instead of the positive plus the negatives. With `anchors_lead_pool` the
 * first `n` pool rows are the anchors themselves. Gradient outputs may be
 * null.
 *
 * # Safety
 * Pointers must be valid for the stated sizes.
 */
enum OtsegStatus otseg_ppc_loss(const double *anchors,
                                size_t n,
                                size_t dim,
                                const uint32_t *anchor_labels,
                                const double *pool,
                                size_t p,
                                const uint32_t *pool_labels,
                                double tau,
                                bool all_contrasts,
                                bool anchors_lead_pool,
                                double *out_value,
                                double *out_grad_anchors,
                                double *out_grad_pool);

/**
 * Point-center contrast against `g` centers. `out_grad` may be null.
 *
 * # Safety
 * Pointers must be valid for the stated sizes.
 */
enum OtsegStatus otseg_pcc_loss(const double *embeddings,
                                size_t n,
                                size_t dim,
                                const uint32_t *subclass,
                                const double *centers,
                                size_t g,
                                double tau,
                                double *out_value,
                                double *out_grad);

/**
 * Mean IoU over classes present in prediction or truth.
 *
 * # Safety
 * `pred` and `truth` must be valid for `n` reads, `out` for one write.
 */
enum OtsegStatus otseg_miou(const uint32_t *pred,
                            const uint32_t *truth,
                            size_t n,
                            size_t classes,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OTSEG_H */
