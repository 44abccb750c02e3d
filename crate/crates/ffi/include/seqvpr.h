#ifndef SEQVPR_H
#define SEQVPR_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum SeqvprStatus {
  SEQVPR_STATUS_OK = 0,
  SEQVPR_STATUS_NULL_POINTER = 1,
  SEQVPR_STATUS_INVALID_INPUT = 2,
  SEQVPR_STATUS_FORMAT = 3,
  SEQVPR_STATUS_NUMERIC = 4,
  SEQVPR_STATUS_IO = 5,
  SEQVPR_STATUS_PANIC = 6,
} SeqvprStatus;

/**
 * Trained model loaded from a checkpoint.
 */
typedef struct SeqvprModel SeqvprModel;

/**
 * Exact nearest-neighbour store over normalized `f32` descriptor rows.
 */
typedef struct SeqvprStore SeqvprStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays valid
 * until the next failing call on the same thread.
 */
const char *seqvpr_last_error(void);

/**
 * SeqGeM over `len` frames of `dim` values (row-major) with exponent `p`, clamped
 * input. Writes `dim` values to `out`.
 *
 * # Safety
 * `frames` must hold `len * dim` doubles and `out` must have room for `dim`.
 */
enum SeqvprStatus seqvpr_seqgem(const double *frames,
                                size_t len,
                                size_t dim,
                                double p,
                                double *out);

/**
 * `n_sequences * dim * bytes_per_value`, overflow-checked.
 *
 * # Safety
 * `out` must be a valid pointer to a `u64`.
 */
enum SeqvprStatus seqvpr_storage_estimate(uint64_t n_sequences,
                                          uint64_t dim,
                                          uint64_t bytes_per_value,
                                          uint64_t *out);

/**
 * Builds a store from `n` descriptor rows of `dim` doubles. Rows are L2-normalized
 * and stored as `f32`; a zero row is rejected.
 *
 * # Safety
 * `rows` must hold `n * dim` doubles; `out` must be a valid handle pointer.
 */
enum SeqvprStatus seqvpr_store_new(const double *rows,
                                   size_t n,
                                   size_t dim,
                                   struct SeqvprStore **out);

/**
 * Number of rows in the store, 0 for null.
 *
 * # Safety
 * `store` must be null or a live handle.
 */
size_t seqvpr_store_len(const struct SeqvprStore *store);

/**
 * Exact `k` nearest rows to `query` by Euclidean distance, ties to the lower index.
 * Writes up to `k` indices and distances and the number written to `out_count`.
 *
 * # Safety
 * `store` must be a live handle, `query` must hold `dim` doubles, and both output
 * arrays must have room for `k` values.
 */
enum SeqvprStatus seqvpr_store_knn(const struct SeqvprStore *store,
                                   const double *query,
                                   size_t dim,
                                   size_t k,
                                   size_t *out_indices,
                                   double *out_distances,
                                   size_t *out_count);

/**
 * Releases a store; null is ignored.
 *
 * # Safety
 * `store` must be null or a handle from [`seqvpr_store_new`] not yet freed.
 */
void seqvpr_store_free(struct SeqvprStore *store);

/**
 * Loads the model stored in a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid handle pointer.
 */
enum SeqvprStatus seqvpr_model_load(const char *path, struct SeqvprModel **out);

/**
 * Raw frame feature dimension the model expects, 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t seqvpr_model_raw_dim(const struct SeqvprModel *model);

/**
 * Descriptor dimension, 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t seqvpr_model_out_dim(const struct SeqvprModel *model);

/**
 * Sequence descriptor of `len` raw frames of `raw_dim` values. `out_len` must equal
 * the model's descriptor dimension.
 *
 * # Safety
 * `model` must be a live handle, `frames` must hold `len * raw_dim` doubles and `out`
 * must have room for `out_len`.
 */
enum SeqvprStatus seqvpr_model_seq_descriptor(const struct SeqvprModel *model,
                                              const double *frames,
                                              size_t len,
                                              size_t raw_dim,
                                              double *out,
                                              size_t out_len);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`seqvpr_model_load`] not yet freed.
 */
void seqvpr_model_free(struct SeqvprModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEQVPR_H */
