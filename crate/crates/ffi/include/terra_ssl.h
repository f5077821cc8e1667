#ifndef TERRA_SSL_H
#define TERRA_SSL_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Which raster of a scene to copy out.
 */
typedef enum TsRaster {
  TS_RASTER_DTM = 0,
  TS_RASTER_DSM = 1,
  TS_RASTER_NDSM = 2,
} TsRaster;

/**
 * Result codes.
 */
typedef enum TsStatus {
  TS_STATUS_OK = 0,
  TS_STATUS_CONFIG = 1,
  TS_STATUS_MISSING = 2,
  TS_STATUS_NUMERIC = 3,
  TS_STATUS_SHAPE = 4,
  TS_STATUS_DATA = 5,
  TS_STATUS_NULL_ARGUMENT = 6,
  TS_STATUS_PANIC = 7,
  TS_STATUS_OTHER = 8,
} TsStatus;

/**
 * Opaque model parameters.
 */
typedef struct TsModel TsModel;

/**
 * Opaque generated scene.
 */
typedef struct TsScene TsScene;

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length, or 0
 * when there is no error.
 *
 * # Safety
 * `buf` must be valid for `len` bytes or null.
 */
size_t ts_last_error(char *buf, size_t len);

/**
 * Generates a square scene with default synthesis settings.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum TsStatus ts_scene_generate(size_t size_px, uint64_t seed, struct TsScene **out);

/**
 * # Safety
 * `scene` must come from [`ts_scene_generate`] and not be used afterwards.
 */
void ts_scene_free(struct TsScene *scene);

/**
 * # Safety
 * All pointers must be valid.
 */
enum TsStatus ts_scene_shape(const struct TsScene *scene, size_t *rows, size_t *cols);

/**
 * Copies one elevation raster (row-major, meters) into `out`, which must
 * hold exactly `rows × cols` values.
 *
 * # Safety
 * `out` must be valid for `len` floats.
 */
enum TsStatus ts_scene_copy_raster(const struct TsScene *scene,
                                   enum TsRaster which,
                                   float *out,
                                   size_t len);

/**
 * Copies the building footprint mask (0/1 bytes).
 *
 * # Safety
 * `out` must be valid for `len` bytes.
 */
enum TsStatus ts_scene_copy_footprint(const struct TsScene *scene, uint8_t *out, size_t len);

/**
 * Builds a randomly initialized model. `head` is 0 for reconstruction,
 * 1 for segmentation (two classes).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum TsStatus ts_model_new(size_t base_width,
                           size_t depth,
                           size_t se_reduction,
                           uint32_t head,
                           uint64_t seed,
                           struct TsModel **out);

/**
 * Loads a checkpoint directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TsStatus ts_model_load(const char *path, struct TsModel **out);

/**
 * # Safety
 * `model` and `path` must be valid.
 */
enum TsStatus ts_model_save(const struct TsModel *model, const char *path);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void ts_model_free(struct TsModel *model);

/**
 * Number of trainable scalars, or 0 for a null handle.
 *
 * # Safety
 * `model` must be valid or null.
 */
uint64_t ts_model_param_count(const struct TsModel *model);

/**
 * Runs one `rows × cols` tile in meters through the model. A
 * reconstruction model writes the predicted DTM in meters; a
 * segmentation model writes the building probability.
 *
 * # Safety
 * `input` and `out` must each be valid for `rows × cols` floats.
 */
enum TsStatus ts_model_infer(const struct TsModel *model,
                             const float *input,
                             size_t rows,
                             size_t cols,
                             float *out);

/**
 * IoU of two 0/1 masks of `len` pixels.
 *
 * # Safety
 * `pred` and `gt` must be valid for `len` bytes, `out` for one double.
 */
enum TsStatus ts_iou(const uint8_t *pred, const uint8_t *gt, size_t len, double *out);

/**
 * Boundary IoU with band thickness `d` on `rows × cols` masks.
 *
 * # Safety
 * `pred` and `gt` must be valid for `rows × cols` bytes, `out` for one double.
 */
enum TsStatus ts_boundary_iou(const uint8_t *pred,
                              const uint8_t *gt,
                              size_t rows,
                              size_t cols,
                              size_t d,
                              double *out);

#endif  /* TERRA_SSL_H */
