#ifndef IMPLICIT_CE_H
#define IMPLICIT_CE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IceStatus {
  ICE_STATUS_OK = 0,
  ICE_STATUS_NULL_POINTER = 1,
  ICE_STATUS_INVALID_ARGUMENT = 2,
  ICE_STATUS_IO = 3,
  ICE_STATUS_PARSE = 4,
  ICE_STATUS_CHECKPOINT = 5,
  ICE_STATUS_NUMERICAL = 6,
  ICE_STATUS_BUFFER_TOO_SMALL = 7,
  ICE_STATUS_PANIC = 8,
} IceStatus;

/**
 * An ingested cross-domain dataset.
 */
typedef struct IceDataset IceDataset;

/**
 * A loaded checkpoint.
 */
typedef struct IceModel IceModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ice_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated and
 * NUL-terminated when `len > 0`). Returns the full message length without
 * the NUL, or 0 when the last call succeeded.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t ice_last_error_message(char *buf, size_t len);

/**
 * Loads a checkpoint file into a new model handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum IceStatus ice_model_load(const char *path, struct IceModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`ice_model_load`] and not be used afterwards.
 */
void ice_model_free(struct IceModel *model);

/**
 * Writes the auxiliary item count, target item count and embedding width.
 *
 * # Safety
 * All pointers must be valid.
 */
enum IceStatus ice_model_dims(const struct IceModel *model,
                              size_t *n_aux_items,
                              size_t *n_target_items,
                              size_t *dim);

/**
 * Copies the id of target item `index` into `buf` as a NUL-terminated
 * string and writes its length (without NUL) to `needed`. Returns
 * `ICE_STATUS_BUFFER_TOO_SMALL` when `len <= needed`.
 *
 * # Safety
 * `buf` must point to `len` writable bytes; other pointers must be valid.
 */
enum IceStatus ice_model_target_item_id(const struct IceModel *model,
                                        size_t index,
                                        char *buf,
                                        size_t len,
                                        size_t *needed);

/**
 * Target-space embedding of a new user from `n` (aux item index, count)
 * pairs. Writes `dim` values to `out`.
 *
 * # Safety
 * `aux_items` and `counts` must hold `n` values, `out` `out_len` values.
 */
enum IceStatus ice_model_user_embedding(const struct IceModel *model,
                                        const size_t *aux_items,
                                        const double *counts,
                                        size_t n,
                                        double *out,
                                        size_t out_len);

/**
 * Scores every target item for a new user. Writes `n_target_items` values.
 *
 * # Safety
 * As for [`ice_model_user_embedding`].
 */
enum IceStatus ice_model_score(const struct IceModel *model,
                               const size_t *aux_items,
                               const double *counts,
                               size_t n,
                               double *scores,
                               size_t scores_len);

/**
 * Top `k` target items for a new user, best first with ties broken by
 * lower index. Writes `min(k, n_target_items)` entries and their count to
 * `written`.
 *
 * # Safety
 * `items_out` and `scores_out` must hold `k` values; inputs as for
 * [`ice_model_user_embedding`].
 */
enum IceStatus ice_model_recommend(const struct IceModel *model,
                                   const size_t *aux_items,
                                   const double *counts,
                                   size_t n,
                                   size_t k,
                                   size_t *items_out,
                                   double *scores_out,
                                   size_t *written);

/**
 * Ingests paired `user<TAB>item<TAB>count` files.
 *
 * # Safety
 * Paths must be NUL-terminated strings and `out` a valid pointer.
 */
enum IceStatus ice_dataset_load_tsv(const char *aux_path,
                                    const char *target_path,
                                    size_t min_aux,
                                    size_t min_target,
                                    struct IceDataset **out);

/**
 * Releases a dataset handle. Null is ignored.
 *
 * # Safety
 * `dataset` must come from [`ice_dataset_load_tsv`] and not be used afterwards.
 */
void ice_dataset_free(struct IceDataset *dataset);

/**
 * Writes the user, auxiliary item and target item counts.
 *
 * # Safety
 * All pointers must be valid.
 */
enum IceStatus ice_dataset_dims(const struct IceDataset *dataset,
                                size_t *n_users,
                                size_t *n_aux_items,
                                size_t *n_target_items);

/**
 * Pearson correlation of two length-`n` vectors.
 *
 * # Safety
 * `x` and `y` must hold `n` values; `out` must be valid.
 */
enum IceStatus ice_metrics_pearson(const double *x, const double *y, size_t n, double *out);

/**
 * NDCG of `scores` against nonnegative `truth`, both of length `n`.
 *
 * # Safety
 * `scores` and `truth` must hold `n` values; `out` must be valid.
 */
enum IceStatus ice_metrics_ndcg(const double *scores, const double *truth, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IMPLICIT_CE_H */
