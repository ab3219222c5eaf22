#ifndef CSC_H
#define CSC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CscStatus {
  CSC_STATUS_OK = 0,
  CSC_STATUS_NULL_POINTER = 1,
  CSC_STATUS_INVALID_ARGUMENT = 2,
  CSC_STATUS_CONFIG = 3,
  CSC_STATUS_CHECKPOINT = 4,
  CSC_STATUS_NUMERIC = 5,
  CSC_STATUS_IO = 6,
  CSC_STATUS_CHECK_FAILED = 7,
  CSC_STATUS_PANIC = 8,
} CscStatus;

/**
 * A trained separation model with its parameters.
 */
typedef struct CscModel CscModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to `len - 1` bytes. Returns the full
 * message length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point at `len` writable bytes.
 */
size_t csc_last_error(char *buf, size_t len);

/**
 * Loads a checkpoint directory (the one holding `checkpoint.json`).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum CscStatus csc_model_load(const char *path, struct CscModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `h` must be null or a handle from `csc_model_load` not yet freed.
 */
void csc_model_free(struct CscModel *h);

/**
 * Number of separated sources; zero for a null handle.
 *
 * # Safety
 * `h` must be null or a live handle.
 */
size_t csc_model_sources(const struct CscModel *h);

/**
 * Speaker embedding dimension; zero for a null handle.
 *
 * # Safety
 * `h` must be null or a live handle.
 */
size_t csc_model_embedding_dim(const struct CscModel *h);

/**
 * Separates a mixture of `len` samples. `estimates` receives
 * `sources * len` values, source-major; `embeddings`, if not null,
 * receives `sources * embedding_dim` values.
 *
 * # Safety
 * `h` must be a live handle and the buffers must have the sizes above.
 */
enum CscStatus csc_model_separate(const struct CscModel *h,
                                  const double *mixture,
                                  size_t len,
                                  double *estimates,
                                  double *embeddings);

/**
 * Scale-invariant SNR in dB of `est` against `reference`.
 *
 * # Safety
 * Both inputs must hold `len` doubles; `out` must be writable.
 */
enum CscStatus csc_si_snr(const double *est, const double *reference, size_t len, double *out);

/**
 * Trial score `-||z - e||^2` of a probe embedding against an enrollment
 * vector, both of dimension `dim`.
 *
 * # Safety
 * Both inputs must hold `dim` doubles; `out` must be writable.
 */
enum CscStatus csc_score_trial(const double *enroll, const double *probe, size_t dim, double *out);

/**
 * Equal error rate and area under the ROC curve of `n` scored trials;
 * `labels[i]` is nonzero for a same-speaker trial.
 *
 * # Safety
 * `scores` and `labels` must hold `n` elements; the outputs must be
 * writable.
 */
enum CscStatus csc_eer_auc(const double *scores,
                           const uint8_t *labels,
                           size_t n,
                           double *eer_out,
                           double *auc_out);

/**
 * Runs the loss identity and mutual information oracle suite.
 * `perturb` is added to one identity as a negative control. Returns
 * `CheckFailed` when any check fails.
 */
enum CscStatus csc_verify_claims(double perturb);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CSC_H */
