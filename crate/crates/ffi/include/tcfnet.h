#ifndef TCFNET_H
#define TCFNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum TcfnetStatus {
  TCFNET_STATUS_OK = 0,
  TCFNET_STATUS_NULL_POINTER = 1,
  TCFNET_STATUS_INVALID_ARGUMENT = 2,
  TCFNET_STATUS_SHAPE_MISMATCH = 3,
  TCFNET_STATUS_IO = 4,
  TCFNET_STATUS_FORMAT = 5,
  TCFNET_STATUS_UNKNOWN_TOPOLOGY = 6,
  TCFNET_STATUS_INTERNAL = 7,
} TcfnetStatus;

/**
 * Opaque model handle.
 */
typedef struct TcfnetModel TcfnetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Description of the last failure on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *tcfnet_last_error(void);

/**
 * Forget the last error of this thread.
 */
void tcfnet_clear_error(void);

/**
 * Library version, a static NUL-terminated string.
 */
const char *tcfnet_version(void);

/**
 * Load a checkpoint written by `tcfnet train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum TcfnetStatus tcfnet_model_load(const char *path, struct TcfnetModel **out);

/**
 * A freshly initialised (untrained) model of `topology` with default settings.
 *
 * # Safety
 * `topology` must be a NUL-terminated string and `out` a writable pointer.
 */
enum TcfnetStatus tcfnet_model_new(const char *topology, uint64_t seed, struct TcfnetModel **out);

/**
 * Write `model` as a checkpoint.
 *
 * # Safety
 * `model` must come from this library and `path` be a NUL-terminated string.
 */
enum TcfnetStatus tcfnet_model_save(const struct TcfnetModel *model, const char *path);

/**
 * Release a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void tcfnet_model_free(struct TcfnetModel *model);

/**
 * Electrodes and samples per epoch expected by `model`.
 *
 * # Safety
 * `model` must come from this library; the out pointers must be writable.
 */
enum TcfnetStatus tcfnet_model_input_shape(const struct TcfnetModel *model,
                                           uintptr_t *channels,
                                           uintptr_t *samples);

/**
 * Topology id of `model` (static string), or NULL for a NULL handle.
 *
 * # Safety
 * `model` must be NULL or come from this library.
 */
const char *tcfnet_model_topology(const struct TcfnetModel *model);

/**
 * Number of trainable parameters.
 *
 * # Safety
 * `model` must come from this library and `out` be writable.
 */
enum TcfnetStatus tcfnet_model_parameter_count(const struct TcfnetModel *model, uintptr_t *out);

/**
 * Score `n_epochs` preprocessed epochs. `data` holds `n_epochs × channels ×
 * samples` values, each epoch channel-major (all samples of electrode 0
 * first). `confidence` receives P(target) per epoch; `probs`, if not NULL,
 * receives `n_epochs × 2` class probabilities (non-target, target).
 *
 * # Safety
 * `data` must point to `data_len` readable values, `confidence` to
 * `n_epochs` writable values and `probs` (when given) to `2 × n_epochs`.
 */
enum TcfnetStatus tcfnet_model_predict(const struct TcfnetModel *model,
                                       const double *data,
                                       uintptr_t data_len,
                                       uintptr_t n_epochs,
                                       double *confidence,
                                       double *probs);

/**
 * Wolpaw bitrate in bits per minute for accuracy `p` (0–1) among `items`
 * choices at `seconds` per selection.
 *
 * # Safety
 * `out` must be writable.
 */
enum TcfnetStatus tcfnet_bitrate(double p, uintptr_t items, double seconds, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TCFNET_H */
