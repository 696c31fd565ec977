#ifndef AFN_FFI_H
#define AFN_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum {
  AFN_STATUS_OK = 0,
  AFN_STATUS_NULL_POINTER = 1,
  AFN_STATUS_SHAPE = 2,
  AFN_STATUS_INVALID_INPUT = 3,
  AFN_STATUS_NUMERIC = 4,
  AFN_STATUS_FORMAT = 5,
  AFN_STATUS_CONSISTENCY = 6,
  AFN_STATUS_CONFIG = 7,
  AFN_STATUS_IO = 8,
  /**
   * Call made in the wrong order, e.g. backward before forward.
   */
  AFN_STATUS_STATE = 9,
  /**
   * A grad check ran but exceeded its tolerance.
   */
  AFN_STATUS_CHECK_FAILED = 10,
  AFN_STATUS_PANIC = 11,
} AfnStatus;

/**
 * Statistic scope of an AFN layer.
 */
typedef enum {
  AFN_SCOPE_BATCH = 0,
  AFN_SCOPE_INSTANCE = 1,
} AfnScope;

/**
 * Opaque AFN layer plus the cache of its last forward pass.
 */
typedef struct AfnLayerHandle AfnLayerHandle;

/**
 * Opaque trained model loaded from a checkpoint.
 */
typedef struct AfnModelHandle AfnModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *afn_last_error(void);

/**
 * Creates an AFN layer over `channels` channels, initialized from `seed`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle pointer.
 */
AfnStatus afn_layer_new(size_t channels, AfnScope scope, uint64_t seed, AfnLayerHandle **out);

/**
 * # Safety
 * `h` must be null or a handle from [`afn_layer_new`] not yet freed.
 */
void afn_layer_free(AfnLayerHandle *h);

/**
 * Sets all four blend logits; a very negative value collapses the layer
 * to plain normalization.
 *
 * # Safety
 * `h` must be a live layer handle.
 */
AfnStatus afn_layer_set_lambda_logits(AfnLayerHandle *h, double logit);

/**
 * Total number of trainable scalars.
 *
 * # Safety
 * `h` must be a live layer handle and `out` writable.
 */
AfnStatus afn_layer_param_count(AfnLayerHandle *h, size_t *out);

/**
 * Forward pass on an `(n, c, height, width)` input. `train != 0` uses
 * batch statistics and updates the running averages. The cache is kept
 * for [`afn_layer_backward`].
 *
 * # Safety
 * `x` and `y` must each point to `n*c*height*width` doubles.
 */
AfnStatus afn_layer_forward(AfnLayerHandle *h,
                            const double *x,
                            size_t n,
                            size_t c,
                            size_t height,
                            size_t width,
                            int32_t train,
                            double *y);

/**
 * Backward pass against the last forward. Writes the input gradient to
 * `dx` and keeps the parameter gradients for [`afn_layer_param_grads`].
 *
 * # Safety
 * `dy` and `dx` must each hold as many doubles as the last forward input.
 */
AfnStatus afn_layer_backward(AfnLayerHandle *h, const double *dy, size_t len, double *dx);

/**
 * Parameter gradients of the last backward, concatenated in parameter
 * order; `len` must equal [`afn_layer_param_count`].
 *
 * # Safety
 * `out` must point to `len` doubles.
 */
AfnStatus afn_layer_param_grads(AfnLayerHandle *h, double *out, size_t len);

/**
 * Loads a trained model from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
AfnStatus afn_model_load(const char *path, AfnModelHandle **out);

/**
 * # Safety
 * `h` must be null or a handle from [`afn_model_load`] not yet freed.
 */
void afn_model_free(AfnModelHandle *h);

/**
 * Writes `[channels, height, width]` to `dims` and the class count to
 * `classes`.
 *
 * # Safety
 * `dims` must hold 3 values and `classes` one.
 */
AfnStatus afn_model_info(AfnModelHandle *h, size_t *dims, size_t *classes);

/**
 * Predicted class of each of `n` images in evaluation mode.
 *
 * # Safety
 * `images` must hold `n*C*H*W` doubles for the model's input dims and
 * `labels` must hold `n` values.
 */
AfnStatus afn_model_predict(AfnModelHandle *h, const double *images, size_t n, size_t *labels);

/**
 * Finite-difference check of a freshly built layer. `layer` is one of
 * batch, layer, instance, group, bin, asr, afn or conv. Writes the
 * largest relative error and returns `CheckFailed` above 1e-4.
 *
 * # Safety
 * `layer` must be a NUL-terminated string and `max_error` writable.
 */
AfnStatus afn_grad_check(const char *layer,
                         size_t n,
                         size_t c,
                         size_t height,
                         size_t width,
                         uint64_t seed,
                         int32_t train,
                         double *max_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AFN_FFI_H */
