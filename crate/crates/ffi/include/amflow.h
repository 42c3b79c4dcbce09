#ifndef AMFLOW_H
#define AMFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. The first four values equal the exit
 * codes of the command-line tool.
 */
typedef enum AmflowStatus {
  AMFLOW_STATUS_OK = 0,
  AMFLOW_STATUS_VALIDATION = 1,
  AMFLOW_STATUS_IO = 2,
  AMFLOW_STATUS_NUMERIC = 3,
  AMFLOW_STATUS_NULL_POINTER = 4,
  AMFLOW_STATUS_BUFFER_TOO_SMALL = 5,
  AMFLOW_STATUS_INTERNAL = 6,
} AmflowStatus;

/**
 * Clip handle.
 */
typedef struct AmflowClip AmflowClip;

/**
 * Model handle.
 */
typedef struct AmflowModel AmflowModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or NULL. The string
 * stays valid until the next failing call on the same thread.
 */
const char *amflow_last_error(void);

/**
 * Builds a model from flat `key = value` config text (NULL for all
 * defaults). Initialization uses the config's `seed`.
 *
 * # Safety
 * `config` is NULL or a NUL-terminated string; `out` is writable.
 */
enum AmflowStatus amflow_model_new(const char *config, struct AmflowModel **out);

/**
 * Builds a model from config text and loads every tensor from a
 * checkpoint file.
 *
 * # Safety
 * `config` is NULL or NUL-terminated; `path` is NUL-terminated; `out` is
 * writable.
 */
enum AmflowStatus amflow_model_load(const char *config, const char *path, struct AmflowModel **out);

/**
 * Writes every tensor of the model to a checkpoint file.
 *
 * # Safety
 * `model` is a live handle; `path` is NUL-terminated.
 */
enum AmflowStatus amflow_model_save(const struct AmflowModel *model, const char *path);

/**
 * Number of classes the model predicts.
 *
 * # Safety
 * `model` is a live handle or NULL (which yields 0).
 */
size_t amflow_model_categories(const struct AmflowModel *model);

/**
 * Scalar parameter counts of the model.
 *
 * # Safety
 * `model` is a live handle; the output pointers are writable.
 */
enum AmflowStatus amflow_model_param_counts(const struct AmflowModel *model,
                                            size_t *trainable,
                                            size_t *total);

/**
 * Fused class logits for a clip, written to `logits[0..len]`; `len` must
 * be at least the category count.
 *
 * # Safety
 * `model` and `clip` are live handles; `logits` points to `len` doubles.
 */
enum AmflowStatus amflow_model_classify(const struct AmflowModel *model,
                                        const struct AmflowClip *clip,
                                        double *logits,
                                        size_t len);

/**
 * Releases a model handle. NULL is ignored.
 *
 * # Safety
 * `model` is NULL or a handle not yet freed.
 */
void amflow_model_free(struct AmflowModel *model);

/**
 * Renders one direction clip (label 0 right, 1 left, 2 down, 3 up) with
 * the default synthesis settings.
 *
 * # Safety
 * `out` is writable.
 */
enum AmflowStatus amflow_clip_direction(size_t label, uint64_t seed, struct AmflowClip **out);

/**
 * Reads a clip file.
 *
 * # Safety
 * `path` is NUL-terminated; `out` is writable.
 */
enum AmflowStatus amflow_clip_load(const char *path, struct AmflowClip **out);

/**
 * Writes a clip file.
 *
 * # Safety
 * `clip` is a live handle; `path` is NUL-terminated.
 */
enum AmflowStatus amflow_clip_save(const struct AmflowClip *clip, const char *path);

/**
 * Label stored with the clip.
 *
 * # Safety
 * `clip` is a live handle; `label` is writable.
 */
enum AmflowStatus amflow_clip_label(const struct AmflowClip *clip, size_t *label);

/**
 * Frame count of the clip.
 *
 * # Safety
 * `clip` is a live handle or NULL (which yields 0).
 */
size_t amflow_clip_frames(const struct AmflowClip *clip);

/**
 * Releases a clip handle. NULL is ignored.
 *
 * # Safety
 * `clip` is NULL or a handle not yet freed.
 */
void amflow_clip_free(struct AmflowClip *clip);

/**
 * Runs the operation and micro-model gradient checks. Writes the worst
 * relative error to `worst` (when non-NULL); returns
 * `AMFLOW_STATUS_NUMERIC` if any check exceeds tolerance.
 *
 * # Safety
 * `worst` is NULL or writable.
 */
enum AmflowStatus amflow_gradcheck(uint64_t seed, double *worst);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AMFLOW_H */
