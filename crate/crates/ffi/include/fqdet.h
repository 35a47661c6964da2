#ifndef FQDET_H
#define FQDET_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum FqdetStatus {
  FQDET_STATUS_OK = 0,
  FQDET_STATUS_NULL_POINTER = 1,
  FQDET_STATUS_INVALID_ARGUMENT = 2,
  FQDET_STATUS_IO = 3,
  FQDET_STATUS_PARSE = 4,
  FQDET_STATUS_SHAPE = 5,
  FQDET_STATUS_CONFIG = 6,
  FQDET_STATUS_BUFFER_TOO_SMALL = 7,
  FQDET_STATUS_PANIC = 8,
} FqdetStatus;

/**
 * Inference strategy for [`fqdet_model_detect`].
 */
typedef enum FqdetStrategy {
  /**
   * One label per box.
   */
  FQDET_STRATEGY_OLD = 0,
  /**
   * Every class of every box enters NMS.
   */
  FQDET_STRATEGY_NEW = 1,
} FqdetStrategy;

/**
 * Opaque model handle.
 */
typedef struct FqdetModel FqdetModel;

typedef struct FqdetBox {
  double x1;
  double y1;
  double x2;
  double y2;
} FqdetBox;

typedef struct FqdetDetection {
  struct FqdetBox bbox;
  uint32_t class_id;
  double score;
} FqdetDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *fqdet_last_error(void);

/**
 * Intersection over union of two boxes.
 *
 * # Safety
 * All pointers must be valid for the duration of the call.
 */
enum FqdetStatus fqdet_iou(const struct FqdetBox *a, const struct FqdetBox *b, double *result);

/**
 * Generalized IoU of two boxes.
 *
 * # Safety
 * All pointers must be valid for the duration of the call.
 */
enum FqdetStatus fqdet_giou(const struct FqdetBox *a, const struct FqdetBox *b, double *result);

/**
 * Deltas `(tx, ty, tw, th)` of `target` relative to `anchor`.
 *
 * # Safety
 * `delta` must point to 4 writable doubles.
 */
enum FqdetStatus fqdet_encode(const struct FqdetBox *target,
                              const struct FqdetBox *anchor,
                              double *delta);

/**
 * Box from deltas relative to `anchor`, clipped to a `width × height` image.
 *
 * # Safety
 * `delta` must point to 4 readable doubles.
 */
enum FqdetStatus fqdet_decode(const double *delta,
                              const struct FqdetBox *anchor,
                              uint32_t width,
                              uint32_t height,
                              struct FqdetBox *result);

/**
 * Greedy NMS. Writes surviving indices in descending score order to `keep`
 * (capacity `n`) and their number to `kept`.
 *
 * # Safety
 * `boxes` and `scores` must hold `n` elements, `keep` room for `n`.
 */
enum FqdetStatus fqdet_nms(const struct FqdetBox *boxes,
                           const double *scores,
                           uintptr_t n,
                           double threshold,
                           uintptr_t *keep,
                           uintptr_t *kept);

/**
 * Minimum-cost assignment of each of `rows` rows to a distinct column of a
 * row-major `rows × cols` cost matrix (`cols ≥ rows`).
 *
 * # Safety
 * `cost` must hold `rows · cols` doubles and `assignment` room for `rows`.
 */
enum FqdetStatus fqdet_hungarian(const double *cost,
                                 uintptr_t rows,
                                 uintptr_t cols,
                                 uintptr_t *assignment,
                                 double *total);

/**
 * Renders synthetic sample `index` of the default 128×128 scene with
 * `seed`. `image` receives `128·128·3` HWC values in `[0, 1]`; up to
 * `capacity` ground truths go to `boxes`/`classes` and their number to
 * `count`. Returns `BufferTooSmall` (with `count` set) when they do not fit.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum FqdetStatus fqdet_generate_sample(uint64_t seed,
                                       uint64_t index,
                                       double *image,
                                       uintptr_t image_len,
                                       struct FqdetBox *boxes,
                                       uint32_t *classes,
                                       uintptr_t capacity,
                                       uintptr_t *count);

/**
 * Loads a training checkpoint into a new model handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `model` writable.
 */
enum FqdetStatus fqdet_model_load(const char *path, struct FqdetModel **model);

/**
 * Releases a model handle; null is ignored.
 *
 * # Safety
 * `model` must come from [`fqdet_model_load`] and not be used afterwards.
 */
void fqdet_model_free(struct FqdetModel *model);

/**
 * Input size expected by the model.
 *
 * # Safety
 * All pointers must be valid.
 */
enum FqdetStatus fqdet_model_image_size(const struct FqdetModel *model,
                                        uint32_t *width,
                                        uint32_t *height);

/**
 * Detects objects in an HWC image of `image_len = width·height·3` values.
 * Up to `capacity` detections are written in descending score order;
 * `count` receives the total, and `BufferTooSmall` is returned when it
 * exceeds `capacity`.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum FqdetStatus fqdet_model_detect(const struct FqdetModel *model,
                                    const double *image,
                                    uintptr_t image_len,
                                    enum FqdetStrategy strategy,
                                    double nms_threshold,
                                    uintptr_t max_detections,
                                    struct FqdetDetection *detections,
                                    uintptr_t capacity,
                                    uintptr_t *count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FQDET_H */
