#ifndef CELLSPLIT_H
#define CELLSPLIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CsStatus {
  CS_STATUS_OK = 0,
  CS_STATUS_NULL_POINTER = 1,
  CS_STATUS_INVALID_ARGUMENT = 2,
  CS_STATUS_IO = 3,
  /**
   * Malformed file contents (PNG, JSON, SETN).
   */
  CS_STATUS_FORMAT = 4,
  /**
   * Model topology or weights unusable.
   */
  CS_STATUS_MODEL = 5,
  /**
   * Tensor or image dimensions do not fit.
   */
  CS_STATUS_SHAPE = 6,
  /**
   * Data-dependent failure such as an empty target.
   */
  CS_STATUS_DATA = 7,
  CS_STATUS_PANIC = 8,
} CsStatus;

/**
 * Values accepted by the `mode` argument of [`cs_postprocess`].
 */
typedef enum CsMode {
  CS_MODE_BASE = 0,
  CS_MODE_SPLIT = 1,
  CS_MODE_SPLIT_EXPAND = 2,
} CsMode;

/**
 * Loaded network; create with [`cs_model_load`], release with [`cs_model_free`].
 */
typedef struct CsModel CsModel;

typedef struct CsPostprocessConfig {
  double cc_confidence;
  double heatmap_threshold;
  double overlap_threshold;
  size_t min_object_size;
  double seg_threshold;
} CsPostprocessConfig;

typedef struct CsScores {
  double acc;
  double pixel_f1;
  double dice_obj;
  double aji;
} CsScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cs_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into the library on the same thread.
 */
const char *cs_last_error_message(void);

/**
 * Reads `topology.json` + `weights.bin` from `dir` into `*out`.
 *
 * # Safety
 * `dir` must be a NUL-terminated path; `out` must be writable.
 */
enum CsStatus cs_model_load(const char *dir, struct CsModel **out);

/**
 * # Safety
 * `model` must come from [`cs_model_load`] and not be used afterwards. NULL
 * is ignored.
 */
void cs_model_free(struct CsModel *model);

/**
 * Side length that inputs are padded to a multiple of; 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t cs_model_size_multiple(const struct CsModel *model);

/**
 * Cell probability (`seg_out`) and cell-centre probability (`cc_out`) per
 * pixel. Either output may be NULL.
 *
 * # Safety
 * `rgb` holds `h * w * 3` floats; non-NULL outputs hold `h * w` floats.
 */
enum CsStatus cs_forward(const struct CsModel *model,
                         const float *rgb,
                         size_t height,
                         size_t width,
                         float *seg_out,
                         float *cc_out);

struct CsPostprocessConfig cs_postprocess_config_default(void);

/**
 * Instance map from seg and CC probability maps. `mode` is a [`CsMode`]
 * value; `CS_MODE_SPLIT_EXPAND` also needs `model` and the `rgb` image the
 * maps came from. `config` may be NULL for defaults, `count_out` may be NULL.
 *
 * # Safety
 * Maps and `instances_out` hold `h * w` elements, `rgb` `h * w * 3`.
 */
enum CsStatus cs_postprocess(const struct CsModel *model,
                             const float *rgb,
                             const float *seg,
                             const float *cc,
                             size_t height,
                             size_t width,
                             uint32_t mode,
                             const struct CsPostprocessConfig *config,
                             uint32_t *instances_out,
                             uint32_t *count_out);

/**
 * Pixel and object scores of `pred` against `gt` (instance IDs, 0 =
 * background).
 *
 * # Safety
 * `gt` and `pred` hold `h * w` values; `out` must be writable.
 */
enum CsStatus cs_metrics(const uint32_t *gt,
                         const uint32_t *pred,
                         size_t height,
                         size_t width,
                         struct CsScores *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CELLSPLIT_H */
