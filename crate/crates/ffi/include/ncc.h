#ifndef NCC_H
#define NCC_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum NccStatus {
  NCC_STATUS_OK = 0,
  NCC_STATUS_NULL_POINTER = 1,
  NCC_STATUS_INVALID_ARGUMENT = 2,
  NCC_STATUS_SHAPE = 3,
  NCC_STATUS_DOMAIN = 4,
  NCC_STATUS_NON_FINITE = 5,
  NCC_STATUS_PARSE = 6,
  NCC_STATUS_IO = 7,
  NCC_STATUS_CONFIG = 8,
  NCC_STATUS_BUFFER_TOO_SMALL = 9,
  NCC_STATUS_PANIC = 10,
} NccStatus;

// A trained model loaded from a checkpoint.
typedef struct NccModel NccModel;

// Collapse metrics of one embedding matrix. `nc2`–`nc4` are NaN when no
// classifier was supplied.
typedef struct NccNcReport {
  double nc1;
  double nc2;
  double nc3;
  double nc4;
  double rankme;
  double entropy;
} NccNcReport;

typedef struct NccFprResult {
  double threshold;
  double fpr;
} NccFprResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static nul-terminated string.
const char *ncc_version(void);

// Message of the last failed call on this thread, or NULL. The pointer stays
// valid until the next call on the same thread.
const char *ncc_last_error_message(void);

// Writes the `order × order` simplex ETF into `out`.
//
// # Safety
// `out` must point to `out_len` writable doubles.
enum NccStatus ncc_simplex_etf(size_t order, double *out, size_t out_len);

// Writes the `rows × cols` fixed-ETF weight block into `out`.
//
// # Safety
// `out` must point to `out_len` writable doubles.
enum NccStatus ncc_etf_weight(size_t rows, size_t cols, double *out, size_t out_len);

// Collapse metrics of `z` (`n × d`) with labels in `[0, k)`. `weight`
// (`k × d`) and `bias` (`k`) may both be NULL to skip `nc2`–`nc4`.
//
// # Safety
// Buffers must match the stated sizes; `out` must be writable.
enum NccStatus ncc_nc_report(const double *z,
                             size_t n,
                             size_t d,
                             const size_t *labels,
                             size_t k,
                             const double *weight,
                             const double *bias,
                             struct NccNcReport *out);

// Effective rank of `z` (`rows × cols`).
//
// # Safety
// `z` must hold `rows * cols` doubles; `out` must be writable.
enum NccStatus ncc_rankme(const double *z, size_t rows, size_t cols, double epsilon, double *out);

// Nearest-neighbor differential entropy estimate of the rows of `z`.
//
// # Safety
// `z` must hold `rows * cols` doubles; `out` must be writable.
enum NccStatus ncc_knn_entropy(const double *z, size_t rows, size_t cols, double *out);

// Row-wise energy score `log Σ exp(logits)` into `out` (`rows` values).
//
// # Safety
// `logits` must hold `rows * cols` doubles; `out` must hold `out_len`.
enum NccStatus ncc_energy_scores(const double *logits,
                                 size_t rows,
                                 size_t cols,
                                 double *out,
                                 size_t out_len);

// False-positive rate at the given true-positive rate, treating higher
// scores as in-distribution.
//
// # Safety
// Score buffers must hold the stated counts; `out` must be writable.
enum NccStatus ncc_fpr_at_tpr(const double *id_scores,
                              size_t n_id,
                              const double *ood_scores,
                              size_t n_ood,
                              double tpr,
                              struct NccFprResult *out);

// Loads a checkpoint file into a new handle stored in `*out`.
//
// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum NccStatus ncc_model_load(const char *path, struct NccModel **out);

// Releases a handle from [`ncc_model_load`]. NULL is ignored.
//
// # Safety
// `model` must be NULL or a live handle, and is invalid afterwards.
void ncc_model_free(struct NccModel *model);

// Input width of the model, or 0 for NULL.
//
// # Safety
// `model` must be NULL or a live handle.
size_t ncc_model_input_dim(const struct NccModel *model);

// Number of classes, or 0 for NULL.
//
// # Safety
// `model` must be NULL or a live handle.
size_t ncc_model_num_classes(const struct NccModel *model);

// Evaluation-mode logits for `rows` inputs into `out` (`rows × K`).
//
// # Safety
// `x` must hold `rows × input_dim` doubles; `out` must hold `out_len`.
enum NccStatus ncc_model_forward(const struct NccModel *model,
                                 const double *x,
                                 size_t rows,
                                 double *out,
                                 size_t out_len);

// Activations at `tap` (a layer name, `encoder_out`, `projector_out` or
// `logits`). The tap width is stored in `*cols`; when `out` is NULL only the
// width is reported.
//
// # Safety
// `x` must hold `rows × input_dim` doubles; `out`, when given, must hold
// `out_len` doubles; `cols` must be writable.
enum NccStatus ncc_model_tap(const struct NccModel *model,
                             const char *tap,
                             const double *x,
                             size_t rows,
                             double *out,
                             size_t out_len,
                             size_t *cols);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NCC_H */
