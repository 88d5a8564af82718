#ifndef KERNQUANT_H
#define KERNQUANT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes; the non-zero values match the command-line exit codes where they overlap.
typedef enum KqStatus {
  KQ_STATUS_OK = 0,
  KQ_STATUS_IO = 1,
  KQ_STATUS_INVALID_ARGUMENT = 2,
  KQ_STATUS_INFEASIBLE = 3,
  KQ_STATUS_CORRUPT = 4,
  KQ_STATUS_SHAPE_MISMATCH = 5,
  KQ_STATUS_NULL_POINTER = 6,
  KQ_STATUS_PANIC = 7,
} KqStatus;

typedef enum KqMethod {
  KQ_METHOD_VQ = 0,
  KQ_METHOD_DL = 1,
} KqMethod;

// Opaque per-layer codebook container.
typedef struct KqCodebook KqCodebook;

// Opaque kernel tensor.
typedef struct KqKernels KqKernels;

// Layer geometry: `kernels` M, `channels` N, `kernel_side` p, `input_side` m.
typedef struct KqShape {
  uint32_t kernels;
  uint32_t channels;
  uint32_t kernel_side;
  uint32_t input_side;
} KqShape;

// Planned parameters and multiplication counts for one target acceleration.
typedef struct KqPlan {
  uint32_t subspaces;
  uint32_t k_vq;
  uint32_t k_dl;
  uint32_t l_dl;
  uint32_t alpha;
  uint64_t t_original;
  uint64_t t_vq;
  uint64_t t_dl;
  double rho_vq;
  double rho_dl;
} KqPlan;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. Owned by the library.
const char *kq_last_error_message(void);

// Loads a KQZ1 (or JSON) kernel file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum KqStatus kq_kernels_load(const char *path, struct KqKernels **out);

// Copies `len` weights in `[kernel][channel][row][col]` order into a new handle.
//
// # Safety
// `data` must point to `len` floats and `out` must be valid.
enum KqStatus kq_kernels_from_buffer(struct KqShape shape,
                                     const float *data,
                                     uintptr_t len,
                                     struct KqKernels **out);

// # Safety
// `k` must be null or a handle from this library not yet freed.
void kq_kernels_free(struct KqKernels *k);

// # Safety
// `k` must be a live handle and `out` valid.
enum KqStatus kq_kernels_shape(const struct KqKernels *k, struct KqShape *out);

// Plans both methods for a target acceleration `rho`.
//
// # Safety
// `out` must be valid.
enum KqStatus kq_plan(struct KqShape shape,
                      uint32_t nprime,
                      double rho,
                      double c,
                      uint32_t alpha,
                      struct KqPlan *out);

// Plans and builds codebooks for every subspace of `kernels`.
//
// # Safety
// `kernels` must be a live handle and `out` valid.
enum KqStatus kq_compress(const struct KqKernels *kernels,
                          enum KqMethod method,
                          uint32_t nprime,
                          double rho,
                          double c,
                          uint32_t alpha,
                          uint64_t seed,
                          struct KqCodebook **out);

// Writes a KQC1 container atomically.
//
// # Safety
// `cb` must be a live handle and `path` a NUL-terminated string.
enum KqStatus kq_codebook_save(const struct KqCodebook *cb, const char *path);

// # Safety
// `path` must be a NUL-terminated string and `out` valid.
enum KqStatus kq_codebook_load(const char *path, struct KqCodebook **out);

// # Safety
// `cb` must be null or a handle from this library not yet freed.
void kq_codebook_free(struct KqCodebook *cb);

// # Safety
// `cb` must be a live handle and `out` valid.
enum KqStatus kq_codebook_method(const struct KqCodebook *cb, enum KqMethod *out);

// Layer relative Frobenius error of `cb` against `kernels`.
//
// # Safety
// Both handles must be live and `out` valid.
enum KqStatus kq_codebook_rel_error(const struct KqCodebook *cb,
                                    const struct KqKernels *kernels,
                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KERNQUANT_H */
