#ifndef FOURIERNAT_H
#define FOURIERNAT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum FnatStatus {
  FNAT_STATUS_OK = 0,
  FNAT_STATUS_NULL_POINTER = 1,
  FNAT_STATUS_INVALID_ARGUMENT = 2,
  FNAT_STATUS_DIMENSION = 3,
  FNAT_STATUS_VOCABULARY = 4,
  FNAT_STATUS_LENGTH = 5,
  FNAT_STATUS_IO = 6,
  FNAT_STATUS_CHECKPOINT = 7,
  FNAT_STATUS_NON_FINITE = 8,
  FNAT_STATUS_BUFFER_TOO_SMALL = 9,
  FNAT_STATUS_PANIC = 10,
} FnatStatus;

// Opaque model handle.
typedef struct FnatModel FnatModel;

// Shape of a loaded model.
typedef struct FnatModelInfo {
  size_t d;
  size_t n_layers;
  size_t n_heads;
  size_t vocab;
  size_t t_max;
  size_t s_max;
  // 1 for a parallel (non-autoregressive) model, 0 for the AR baseline.
  int32_t is_parallel;
} FnatModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread, or NULL. Valid until
// the next call into this library from the same thread.
const char *fnat_last_error(void);

// Library version as a static NUL-terminated string.
const char *fnat_version(void);

// Spectral token mixing of a row-major `t×d` matrix with `t×d` gates:
// `out = Re(iDFT(g_real ⊙ Re DFT(x) + i·g_imag ⊙ Im DFT(x)))` along the
// sequence axis. `out` must hold `t·d` values and may not alias the inputs.
//
// # Safety
// Each pointer must reference `t·d` valid `double`s.
enum FnatStatus fnat_fourier_mix(const double *x,
                                 const double *g_real,
                                 const double *g_imag,
                                 size_t t,
                                 size_t d,
                                 double *out);

// Loads an `FNAT1` checkpoint. On success `*out` owns a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum FnatStatus fnat_model_load(const char *path, struct FnatModel **out);

// Releases a handle. NULL is ignored.
//
// # Safety
// `model` must come from [`fnat_model_load`] and not be used afterwards.
void fnat_model_free(struct FnatModel *model);

// # Safety
// `model` must be a live handle and `info` a valid pointer.
enum FnatStatus fnat_model_info(const struct FnatModel *model, struct FnatModelInfo *info);

// Decodes one source sequence. Parallel models run one pass plus
// `refine_passes` refinement passes masking `mask_ratio` of the tokens;
// the AR baseline decodes greedily and ignores both. Writes the content
// tokens (no EOS) to `out_tokens` and their count to `*out_len`. When
// `capacity` is too small the call fails with `BufferTooSmall` and
// `*out_len` still holds the required size.
//
// # Safety
// `src` must reference `src_len` values, `out_tokens` `capacity` values.
enum FnatStatus fnat_model_decode(const struct FnatModel *model,
                                  const uint32_t *src,
                                  size_t src_len,
                                  size_t refine_passes,
                                  double mask_ratio,
                                  uint32_t *out_tokens,
                                  size_t capacity,
                                  size_t *out_len);

// Runs the invariant battery. Writes the number of passing checks and the
// total; returns `Ok` even when some checks fail.
//
// # Safety
// Both pointers must be valid.
enum FnatStatus fnat_selfcheck(size_t *passed, size_t *total);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FOURIERNAT_H */
