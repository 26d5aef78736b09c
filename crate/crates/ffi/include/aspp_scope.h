#ifndef ASPP_SCOPE_H
#define ASPP_SCOPE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Status codes returned by every fallible function.
 */
typedef enum AsppStatus {
  ASPP_STATUS_OK = 0,
  ASPP_STATUS_NULL_POINTER = 1,
  ASPP_STATUS_INVALID_ARGUMENT = 2,
  ASPP_STATUS_SHAPE = 3,
  ASPP_STATUS_CHANNEL_MISMATCH = 4,
  ASPP_STATUS_IO = 5,
  ASPP_STATUS_FORMAT = 6,
  ASPP_STATUS_CONFIG = 7,
  ASPP_STATUS_BUFFER_TOO_SMALL = 8,
  ASPP_STATUS_INTERNAL = 9,
  ASPP_STATUS_PANIC = 10,
} AsppStatus;

/*
 Opaque model handle.
 */
typedef struct AsppModel AsppModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *aspp_version(void);

/*
 Message of the last failed call on this thread, or NULL. Valid until the next call.
 */
const char *aspp_last_error_message(void);

/*
 Number of classes of a task code (0 sic, 1 sod, 2 floe); 0 for unknown codes.
 */
size_t aspp_task_classes(int32_t task);

/*
 Loads a checkpoint directory. On success `*out` owns a new handle.

 # Safety
 `checkpoint_dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AsppStatus aspp_model_load(const char *checkpoint_dir, struct AsppModel **out);

/*
 Releases a handle. NULL is ignored.

 # Safety
 `model` must come from [`aspp_model_load`] and not be used afterwards.
 */
void aspp_model_free(struct AsppModel *model);

/*
 Number of trainable scalars.

 # Safety
 `model` must be a live handle and `out` a valid pointer.
 */
enum AsppStatus aspp_model_param_count(const struct AsppModel *model, size_t *out);

/*
 Number of input channels the model expects.

 # Safety
 `model` must be a live handle and `out` a valid pointer.
 */
enum AsppStatus aspp_model_input_channels(const struct AsppModel *model, size_t *out);

/*
 Feature group the checkpoint was trained on (for example "g5"), or "" if unrecorded.
 The string lives as long as the handle.

 # Safety
 `model` must be a live handle or NULL.
 */
const char *aspp_model_feature_group(const struct AsppModel *model);

/*
 Logits of one task for a `[channels, height, width]` input, written as
 `[classes, height, width]` into `out` (at least `classes * height * width` floats).

 # Safety
 `input` must hold `channels * height * width` floats and `out` `out_len` floats.
 */
enum AsppStatus aspp_model_forward(struct AsppModel *model,
                                   const float *input,
                                   size_t channels,
                                   size_t height,
                                   size_t width,
                                   int32_t task,
                                   float *out,
                                   size_t out_len);

/*
 Arg-max class maps of all three tasks, each `height * width` bytes.

 # Safety
 `input` must hold `channels * height * width` floats; each output `height * width` bytes.
 */
enum AsppStatus aspp_model_predict(struct AsppModel *model,
                                   const float *input,
                                   size_t channels,
                                   size_t height,
                                   size_t width,
                                   uint8_t *out_sic,
                                   uint8_t *out_sod,
                                   uint8_t *out_floe);

/*
 Grad-CAM heatmap in `[0, 1]` of `class` for `task`, `height * width` floats.
 `layer` may be NULL for the default decoder layer.

 # Safety
 `input` must hold `channels * height * width` floats, `out` `out_len` floats,
 and `layer` must be NULL or NUL-terminated.
 */
enum AsppStatus aspp_model_gradcam(struct AsppModel *model,
                                   const float *input,
                                   size_t channels,
                                   size_t height,
                                   size_t width,
                                   int32_t task,
                                   size_t class_,
                                   const char *layer,
                                   float *out,
                                   size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ASPP_SCOPE_H */
