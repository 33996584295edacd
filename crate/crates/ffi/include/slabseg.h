#ifndef SLABSEG_H
#define SLABSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum SlabsegStatus {
  SLABSEG_STATUS_OK = 0,
  SLABSEG_STATUS_NULL_POINTER = 1,
  SLABSEG_STATUS_INVALID_ARGUMENT = 2,
  SLABSEG_STATUS_IO = 3,
  SLABSEG_STATUS_CALIBRATION_MISSING = 4,
  SLABSEG_STATUS_MODEL_LOAD_FAILURE = 5,
  SLABSEG_STATUS_GEOMETRY = 6,
  SLABSEG_STATUS_METRICS = 7,
  SLABSEG_STATUS_SEGMENTATION = 8,
  SLABSEG_STATUS_BUFFER_TOO_SMALL = 9,
  SLABSEG_STATUS_PANIC = 10,
} SlabsegStatus;

/**
 * Photograph: planar RGB or grey values in `[0, 1]` with optional spacing.
 */
typedef struct SlabsegImage SlabsegImage;

/**
 * Binary segmentation mask with optional spacing.
 */
typedef struct SlabsegMask SlabsegMask;

/**
 * One or more U-Net containers, or the classical baseline.
 */
typedef struct SlabsegSegmenter SlabsegSegmenter;

/**
 * Banded metrics of one prediction. Undefined distances are NaN.
 */
typedef struct SlabsegReport {
  double dice;
  double assd_mm;
  double hd95_mm;
  /**
   * 1 when ASSD exceeds the threshold or is undefined.
   */
  uint8_t outlier;
} SlabsegReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *slabseg_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library on the same thread.
 */
const char *slabseg_last_error(void);

/**
 * Pixel size in mm/px from two clicked ruler points a known distance apart.
 */
enum SlabsegStatus slabseg_ruler_spacing(double x1,
                                         double y1,
                                         double x2,
                                         double y2,
                                         double distance_mm,
                                         double *out_spacing_mm);

/**
 * Rectifies `raw_path` with the calibration JSON and writes the PNG and its
 * sidecar; `out_source_spacing_mm` (nullable) receives the measured spacing.
 */
enum SlabsegStatus slabseg_calibrate_file(const char *raw_path,
                                          const char *calibration_path,
                                          const char *out_path,
                                          double target_mm,
                                          double margin_mm,
                                          double *out_source_spacing_mm);

/**
 * Reads a PNG. `spacing_mm <= 0` takes the spacing from a sidecar if present.
 */
enum SlabsegStatus slabseg_image_read(const char *path,
                                      double spacing_mm,
                                      struct SlabsegImage **out_image);

/**
 * Builds an image from interleaved 8-bit pixels (`channels` 1 or 3).
 * `spacing_mm <= 0` leaves the image uncalibrated.
 */
enum SlabsegStatus slabseg_image_from_u8(const uint8_t *data,
                                         size_t height,
                                         size_t width,
                                         size_t channels,
                                         double spacing_mm,
                                         struct SlabsegImage **out_image);

/**
 * Height, width and channel count; any output pointer may be null.
 */
enum SlabsegStatus slabseg_image_dims(const struct SlabsegImage *image,
                                      size_t *out_height,
                                      size_t *out_width,
                                      size_t *out_channels);

/**
 * Releases an image; null is ignored.
 */
void slabseg_image_free(struct SlabsegImage *image);

/**
 * Loads `count` model containers into an ensemble; `count == 0` selects the
 * classical baseline.
 */
enum SlabsegStatus slabseg_segmenter_load(const char *const *model_paths,
                                          size_t count,
                                          struct SlabsegSegmenter **out_segmenter);

/**
 * Releases a segmenter; null is ignored.
 */
void slabseg_segmenter_free(struct SlabsegSegmenter *segmenter);

/**
 * Segments a calibrated image; the mask has the image's dims and spacing.
 */
enum SlabsegStatus slabseg_segment(const struct SlabsegSegmenter *segmenter,
                                   const struct SlabsegImage *image,
                                   struct SlabsegMask **out_mask);

/**
 * Reads a mask PNG. `spacing_mm <= 0` takes the spacing from a sidecar if present.
 */
enum SlabsegStatus slabseg_mask_read(const char *path,
                                     double spacing_mm,
                                     struct SlabsegMask **out_mask);

/**
 * Height and width; either output pointer may be null.
 */
enum SlabsegStatus slabseg_mask_dims(const struct SlabsegMask *mask,
                                     size_t *out_height,
                                     size_t *out_width);

/**
 * Copies the mask row-major as 0/1 bytes into `buffer` of `len` bytes.
 */
enum SlabsegStatus slabseg_mask_copy(const struct SlabsegMask *mask, uint8_t *buffer, size_t len);

/**
 * Writes the mask PNG, plus a spacing sidecar when the mask is calibrated.
 */
enum SlabsegStatus slabseg_mask_write(const struct SlabsegMask *mask, const char *path);

/**
 * Releases a mask; null is ignored.
 */
void slabseg_mask_free(struct SlabsegMask *mask);

/**
 * Banded Dice, ASSD and HD95 of `prediction` against `reference`.
 */
enum SlabsegStatus slabseg_evaluate(const struct SlabsegMask *prediction,
                                    const struct SlabsegMask *reference,
                                    double band_mm,
                                    double threshold_mm,
                                    struct SlabsegReport *out_report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SLABSEG_H */
