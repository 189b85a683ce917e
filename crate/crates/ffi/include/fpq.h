#ifndef FPQ_H
#define FPQ_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum FpqStatus {
  FPQ_STATUS_OK = 0,
  FPQ_STATUS_NULL_POINTER = 1,
  FPQ_STATUS_INVALID_ARGUMENT = 2,
  FPQ_STATUS_INVALID_SPEC = 3,
  FPQ_STATUS_SHAPE_MISMATCH = 4,
  FPQ_STATUS_NON_FINITE = 5,
  /**
   * Cholesky or SVD failure.
   */
  FPQ_STATUS_NUMERICAL = 6,
  FPQ_STATUS_IO = 7,
  /**
   * Bad magic, unsupported version, checksum or header schema error.
   */
  FPQ_STATUS_FORMAT = 8,
  FPQ_STATUS_PANIC = 9,
} FpqStatus;

/**
 * Factorized calibration Hessian.
 */
typedef struct FpqHessian FpqHessian;

/**
 * Low-rank compensation factors.
 */
typedef struct FpqLorc FpqLorc;

/**
 * Packed codes with per-group scales.
 */
typedef struct FpqQuantized FpqQuantized;

/**
 * Dense row-major `f64` tensor.
 */
typedef struct FpqTensor FpqTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *fpq_last_error(void);

/**
 * Static, NUL-terminated library version.
 */
const char *fpq_version(void);

/**
 * Releases a string returned by one of the `*_json` functions.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void fpq_string_free(char *s);

/**
 * Copies `len` values into a new tensor of the given shape.
 *
 * # Safety
 * `shape` holds `ndim` entries and `data` holds `len` doubles.
 */
enum FpqStatus fpq_tensor_new(const size_t *shape,
                              size_t ndim,
                              const double *data,
                              size_t len,
                              struct FpqTensor **out);

/**
 * # Safety
 * `t` is NULL or a live tensor handle.
 */
void fpq_tensor_free(struct FpqTensor *t);

/**
 * Number of elements, or 0 for NULL.
 *
 * # Safety
 * `t` is NULL or a live tensor handle.
 */
size_t fpq_tensor_len(const struct FpqTensor *t);

/**
 * Number of axes, or 0 for NULL.
 *
 * # Safety
 * `t` is NULL or a live tensor handle.
 */
size_t fpq_tensor_ndim(const struct FpqTensor *t);

/**
 * Copies the shape into `out`, which must hold `cap >= ndim` entries.
 *
 * # Safety
 * `out` holds `cap` writable entries.
 */
enum FpqStatus fpq_tensor_shape(const struct FpqTensor *t, size_t *out, size_t cap);

/**
 * Copies the elements into `out`, which must hold `cap >= len` doubles.
 *
 * # Safety
 * `out` holds `cap` writable doubles.
 */
enum FpqStatus fpq_tensor_data(const struct FpqTensor *t, double *out, size_t cap);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum FpqStatus fpq_tensor_read(const char *path, struct FpqTensor **out);

/**
 * # Safety
 * `t` is a live handle and `path` a NUL-terminated string.
 */
enum FpqStatus fpq_tensor_write(const struct FpqTensor *t, const char *path);

/**
 * Distribution statistics as a JSON string; free with [`fpq_string_free`].
 *
 * # Safety
 * `t` is a live handle; `out` is writable.
 */
enum FpqStatus fpq_tensor_summary_json(const struct FpqTensor *t, char **out);

/**
 * Round-to-nearest quantization under a recipe string such as
 * `"fp4:e2m1:group256:m2"`.
 *
 * # Safety
 * `t` is a live handle, `spec` a NUL-terminated string, `out` writable.
 */
enum FpqStatus fpq_quantize(const struct FpqTensor *t, const char *spec, struct FpqQuantized **out);

/**
 * # Safety
 * `q` is NULL or a live handle.
 */
void fpq_quantized_free(struct FpqQuantized *q);

/**
 * # Safety
 * `q` is a live handle; `out` is writable.
 */
enum FpqStatus fpq_dequantize(const struct FpqQuantized *q, struct FpqTensor **out);

/**
 * Number of codes, or 0 for NULL.
 *
 * # Safety
 * `q` is NULL or a live handle.
 */
size_t fpq_quantized_len(const struct FpqQuantized *q);

/**
 * Number of scales, or 0 for NULL.
 *
 * # Safety
 * `q` is NULL or a live handle.
 */
size_t fpq_quantized_scale_count(const struct FpqQuantized *q);

/**
 * Copies the raw codes (one per byte, unpacked).
 *
 * # Safety
 * `out` holds `cap` writable bytes.
 */
enum FpqStatus fpq_quantized_codes(const struct FpqQuantized *q, uint8_t *out, size_t cap);

/**
 * # Safety
 * `out` holds `cap` writable doubles.
 */
enum FpqStatus fpq_quantized_scales(const struct FpqQuantized *q, double *out, size_t cap);

/**
 * Canonical recipe string; free with [`fpq_string_free`].
 *
 * # Safety
 * `q` is a live handle; `out` is writable.
 */
enum FpqStatus fpq_quantized_spec(const struct FpqQuantized *q, char **out);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum FpqStatus fpq_quantized_read(const char *path, struct FpqQuantized **out);

/**
 * # Safety
 * `q` is a live handle and `path` a NUL-terminated string.
 */
enum FpqStatus fpq_quantized_write(const struct FpqQuantized *q, const char *path);

/**
 * Error metrics of `q` against `w` as JSON; `calib` may be NULL.
 *
 * # Safety
 * Handles are live (or `calib` NULL); `out` is writable.
 */
enum FpqStatus fpq_error_report_json(const struct FpqTensor *w,
                                     const struct FpqQuantized *q,
                                     const struct FpqTensor *calib,
                                     char **out);

/**
 * Builds and factorizes `2 X^T X` from `[samples x in]` calibration rows.
 *
 * # Safety
 * `calib` is a live handle; `out` is writable.
 */
enum FpqStatus fpq_hessian_build(const struct FpqTensor *calib,
                                 double damping_fraction,
                                 struct FpqHessian **out);

/**
 * # Safety
 * `h` is NULL or a live handle.
 */
void fpq_hessian_free(struct FpqHessian *h);

/**
 * # Safety
 * Handles are live, `spec` is NUL-terminated, `out` is writable.
 */
enum FpqStatus fpq_gptq_quantize(const struct FpqTensor *w,
                                 const struct FpqHessian *h,
                                 const char *spec,
                                 size_t block_size,
                                 struct FpqQuantized **out);

/**
 * Casts M1/M2-constrained FP4 codes to E5M2. `saturated` and `underflowed`
 * may be NULL.
 *
 * # Safety
 * `q` is a live handle; non-NULL pointers are writable.
 */
enum FpqStatus fpq_cast_to_fp8(const struct FpqQuantized *q,
                               struct FpqQuantized **out,
                               size_t *saturated,
                               size_t *underflowed);

/**
 * Rank-`rank` factors of `w - dequantize(q)`.
 *
 * # Safety
 * Handles are live; `out` is writable.
 */
enum FpqStatus fpq_lorc_factorize(const struct FpqTensor *w,
                                  const struct FpqQuantized *q,
                                  size_t rank,
                                  struct FpqLorc **out);

/**
 * # Safety
 * `f` is NULL or a live handle.
 */
void fpq_lorc_free(struct FpqLorc *f);

/**
 * Rank of the factors, or 0 for NULL.
 *
 * # Safety
 * `f` is NULL or a live handle.
 */
size_t fpq_lorc_rank(const struct FpqLorc *f);

/**
 * Fraction of the error energy captured, or NaN for NULL.
 *
 * # Safety
 * `f` is NULL or a live handle.
 */
double fpq_lorc_captured_energy(const struct FpqLorc *f);

/**
 * `dequantize(q) + left * right`.
 *
 * # Safety
 * Handles are live; `out` is writable.
 */
enum FpqStatus fpq_lorc_apply(const struct FpqQuantized *q,
                              const struct FpqLorc *f,
                              struct FpqTensor **out);

/**
 * # Safety
 * `path` is NUL-terminated; `out` is writable.
 */
enum FpqStatus fpq_lorc_read(const char *path, struct FpqLorc **out);

/**
 * # Safety
 * `f` is a live handle and `path` NUL-terminated.
 */
enum FpqStatus fpq_lorc_write(const struct FpqLorc *f, const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FPQ_H */
