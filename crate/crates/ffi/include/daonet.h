#ifndef DAONET_H
#define DAONET_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  DAONET_STATUS_OK = 0,
  DAONET_STATUS_NULL_ARGUMENT = 1,
  DAONET_STATUS_INVALID_ARGUMENT = 2,
  DAONET_STATUS_SHAPE = 3,
  DAONET_STATUS_FORMAT = 4,
  DAONET_STATUS_IO = 5,
  DAONET_STATUS_MISSING_WEIGHT = 6,
  DAONET_STATUS_CONFIG = 7,
  DAONET_STATUS_BUFFER_TOO_SMALL = 8,
  DAONET_STATUS_PANIC = 9,
} DaonetStatus;

/**
 * A 32-bit NCHW (or any rank) tensor.
 */
typedef struct DaonetTensor DaonetTensor;

/**
 * A set of named weights.
 */
typedef struct DaonetWeights DaonetWeights;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *daonet_last_error(void);

/**
 * Static, nul-terminated crate version.
 */
const char *daonet_version(void);

/**
 * Copies `len` floats into a new tensor with the given dims.
 *
 * # Safety
 * `dims` must point to `rank` values and `data` to `len` floats.
 */
DaonetStatus daonet_tensor_new(const size_t *dims,
                               size_t rank,
                               const float *data,
                               size_t len,
                               DaonetTensor **out);

/**
 * Reads a `.tns` file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` writable.
 */
DaonetStatus daonet_tensor_read(const char *path, DaonetTensor **out);

/**
 * Writes a `.tns` file.
 *
 * # Safety
 * `t` must be a live tensor handle and `path` nul-terminated.
 */
DaonetStatus daonet_tensor_write(const DaonetTensor *t, const char *path);

/**
 * Number of dims; 0 for a null handle.
 *
 * # Safety
 * `t` must be null or a live tensor handle.
 */
size_t daonet_tensor_rank(const DaonetTensor *t);

/**
 * Number of elements; 0 for a null handle.
 *
 * # Safety
 * `t` must be null or a live tensor handle.
 */
size_t daonet_tensor_len(const DaonetTensor *t);

/**
 * Copies the dims into `out`, which holds `cap` entries.
 *
 * # Safety
 * `t` must be a live tensor handle and `out` point to `cap` writable values.
 */
DaonetStatus daonet_tensor_dims(const DaonetTensor *t, size_t *out, size_t cap);

/**
 * Borrowed pointer to the elements, valid while the handle lives.
 *
 * # Safety
 * `t` must be null or a live tensor handle.
 */
const float *daonet_tensor_data(const DaonetTensor *t);

/**
 * Checksum of the tensor's `.tns` encoding, as printed by `daonet run`.
 *
 * # Safety
 * `t` must be null or a live tensor handle.
 */
uint64_t daonet_tensor_checksum(const DaonetTensor *t);

/**
 * # Safety
 * `t` must be null or a handle not yet freed.
 */
void daonet_tensor_free(DaonetTensor *t);

/**
 * Loads a weight file.
 *
 * # Safety
 * `path` must be nul-terminated and `out` writable.
 */
DaonetStatus daonet_weights_load(const char *path, DaonetWeights **out);

/**
 * Randomly initialized weights for `module` (dafm, oahead, dsconv,
 * c2f_dsconv) at its default configuration.
 *
 * # Safety
 * `module` must be nul-terminated and `out` writable.
 */
DaonetStatus daonet_weights_init(const char *module,
                                 size_t channels,
                                 uint64_t seed,
                                 DaonetWeights **out);

/**
 * # Safety
 * `w` must be a live weights handle and `path` nul-terminated.
 */
DaonetStatus daonet_weights_save(const DaonetWeights *w, const char *path);

/**
 * Total scalar count; 0 for a null handle.
 *
 * # Safety
 * `w` must be null or a live weights handle.
 */
uint64_t daonet_weights_param_count(const DaonetWeights *w);

/**
 * # Safety
 * `w` must be null or a handle not yet freed.
 */
void daonet_weights_free(DaonetWeights *w);

/**
 * Forwards one module, configured from the stored weight dims.
 *
 * # Safety
 * Handles must be live, `module` nul-terminated and `out` writable.
 */
DaonetStatus daonet_module_forward(const char *module,
                                   const DaonetWeights *weights,
                                   const DaonetTensor *input,
                                   DaonetTensor **out);

/**
 * Parameter and FLOP totals for a detector variant (`baseline`, `daonet`,
 * or a `+`-joined subset of dafm, oahead, dsconv) at `imgsz`.
 *
 * # Safety
 * `variant` must be nul-terminated; `params` and `flops` writable.
 */
DaonetStatus daonet_cost(const char *variant, size_t imgsz, uint64_t *params, uint64_t *flops);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DAONET_H */
