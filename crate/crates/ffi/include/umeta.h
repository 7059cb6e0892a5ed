#ifndef UMETA_H
#define UMETA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UmetaStatus {
  UMETA_STATUS_OK = 0,
  UMETA_STATUS_CONFIG = 2,
  UMETA_STATUS_DATA = 3,
  UMETA_STATUS_NUMERIC = 4,
  /**
   * Null pointer, bad UTF-8 or undersized output buffer.
   */
  UMETA_STATUS_INVALID_ARGUMENT = 5,
  UMETA_STATUS_PANIC = 6,
} UmetaStatus;

/**
 * A loaded or generated dataset.
 */
typedef struct UmetaDataset UmetaDataset;

/**
 * A feed-forward model read from a checkpoint.
 */
typedef struct UmetaModel UmetaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread. Valid until the next
 * failing call on the same thread; never null.
 */
const char *umeta_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *umeta_version(void);

/**
 * Loads an `EMB1` (or `.csv`) dataset.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum UmetaStatus umeta_dataset_load(const char *path, struct UmetaDataset **out);

/**
 * Generates a synthetic Gaussian-mixture dataset (all rows meta-train).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum UmetaStatus umeta_dataset_synth(uintptr_t num_classes,
                                     uintptr_t per_class,
                                     uintptr_t d_in,
                                     uintptr_t d_z,
                                     double noise,
                                     uint64_t seed,
                                     struct UmetaDataset **out);

/**
 * Writes a dataset; the format follows the file extension.
 *
 * # Safety
 * `ds` must come from this library; `path` must be NUL-terminated.
 */
enum UmetaStatus umeta_dataset_save(const struct UmetaDataset *ds, const char *path);

/**
 * # Safety
 * `ds` must be null or come from this library.
 */
uintptr_t umeta_dataset_rows(const struct UmetaDataset *ds);

/**
 * # Safety
 * `ds` must be null or come from this library.
 */
uintptr_t umeta_dataset_raw_dim(const struct UmetaDataset *ds);

/**
 * Zero when the dataset has no embeddings.
 *
 * # Safety
 * `ds` must be null or come from this library.
 */
uintptr_t umeta_dataset_embedding_dim(const struct UmetaDataset *ds);

/**
 * Copies the row-major embedding matrix into `out` (`rows * dim` values).
 *
 * # Safety
 * `out` must point to `out_len` writable doubles.
 */
enum UmetaStatus umeta_dataset_embeddings(const struct UmetaDataset *ds,
                                          double *out,
                                          uintptr_t out_len);

/**
 * # Safety
 * `ds` must be null or come from this library, and not be used afterwards.
 */
void umeta_dataset_free(struct UmetaDataset *ds);

/**
 * Reads a `CMP1` checkpoint.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` a valid pointer.
 */
enum UmetaStatus umeta_model_load(const char *path, struct UmetaModel **out);

/**
 * # Safety
 * `m` must be null or come from this library.
 */
uintptr_t umeta_model_in_dim(const struct UmetaModel *m);

/**
 * # Safety
 * `m` must be null or come from this library.
 */
uintptr_t umeta_model_out_dim(const struct UmetaModel *m);

/**
 * Forward pass on `rows` row-major inputs of width `cols`; writes
 * `rows * out_dim` outputs.
 *
 * # Safety
 * `inputs` must hold `rows * cols` doubles and `out` `out_len` writable doubles.
 */
enum UmetaStatus umeta_model_forward(const struct UmetaModel *m,
                                     const double *inputs,
                                     uintptr_t rows,
                                     uintptr_t cols,
                                     double *out,
                                     uintptr_t out_len);

/**
 * # Safety
 * `m` must be null or come from this library, and not be used afterwards.
 */
void umeta_model_free(struct UmetaModel *m);

/**
 * Lloyd k-means on `rows` row-major points of width `cols` with diagonal
 * metric `scaling` (null for all ones). Writes one cluster id per row and,
 * if `objective` is non-null, the final objective.
 *
 * # Safety
 * `points` must hold `rows * cols` doubles, `scaling` null or `cols`
 * doubles, `assignment` `rows` writable integers.
 */
enum UmetaStatus umeta_kmeans(const double *points,
                              uintptr_t rows,
                              uintptr_t cols,
                              uintptr_t k,
                              const double *scaling,
                              uint64_t seed,
                              int64_t *assignment,
                              double *objective);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UMETA_H */
