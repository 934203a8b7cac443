#ifndef QNN_H
#define QNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum QnnStatus {
  QNN_STATUS_OK = 0,
  QNN_STATUS_NULL_POINTER = 1,
  QNN_STATUS_INVALID_ARGUMENT = 2,
  QNN_STATUS_CONFIG = 3,
  QNN_STATUS_DATA = 4,
  QNN_STATUS_FORMAT = 5,
  QNN_STATUS_INTEGRITY = 6,
  QNN_STATUS_VERSION = 7,
  QNN_STATUS_IO = 8,
  QNN_STATUS_NUMERIC = 9,
  QNN_STATUS_PANIC = 10,
} QnnStatus;

/**
 * Opaque model handle.
 */
typedef struct QnnModel QnnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Owned by the library.
 */
const char *qnn_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *qnn_version(void);

/**
 * Loads a checkpoint written by `qnn train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum QnnStatus qnn_model_load(const char *path, struct QnnModel **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from [`qnn_model_load`] and not be used afterwards.
 */
void qnn_model_free(struct QnnModel *model);

/**
 * Number of categorical fields per row (0 for dense-input models).
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t qnn_model_num_fields(const struct QnnModel *model);

/**
 * Number of dense features per row (0 for embedding models).
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t qnn_model_num_features(const struct QnnModel *model);

/**
 * Vocabulary size of field `field`, or 0 when out of range.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t qnn_model_vocab_size(const struct QnnModel *model, size_t field);

/**
 * Click probabilities for `rows` rows of vocabulary indices (`rows * fields`
 * values, row-major). Writes `rows` doubles to `out`.
 *
 * # Safety
 * `indices` must hold `rows * qnn_model_num_fields(model)` values and `out`
 * room for `rows` doubles.
 */
enum QnnStatus qnn_model_predict(const struct QnnModel *model,
                                 const uint32_t *indices,
                                 size_t rows,
                                 double *out);

/**
 * Click probabilities for `rows` dense rows (`rows * features` values).
 *
 * # Safety
 * `x` must hold `rows * qnn_model_num_features(model)` values and `out` room
 * for `rows` doubles.
 */
enum QnnStatus qnn_model_predict_dense(const struct QnnModel *model,
                                       const double *x,
                                       size_t rows,
                                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QNN_H */
