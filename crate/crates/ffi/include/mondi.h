#ifndef MONDI_H
#define MONDI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MondiStatus {
  MONDI_STATUS_OK = 0,
  MONDI_STATUS_INVALID_ARGUMENT = 1,
  MONDI_STATUS_DIMENSION_MISMATCH = 2,
  MONDI_STATUS_FORMAT_ERROR = 3,
  MONDI_STATUS_CONFIG_ERROR = 4,
  MONDI_STATUS_MISSING_FILE = 5,
  MONDI_STATUS_IO_ERROR = 6,
  MONDI_STATUS_NUMERIC_ERROR = 7,
  MONDI_STATUS_BUFFER_TOO_SMALL = 8,
  /*
   A Rust panic was caught at the boundary.
   */
  MONDI_STATUS_INTERNAL = 9,
} MondiStatus;

/*
 A loaded or generated scene bundle.
 */
typedef struct MondiBundle MondiBundle;

/*
 A dense depth map in meters.
 */
typedef struct MondiDepth MondiDepth;

/*
 Output of teacher distillation.
 */
typedef struct MondiProduct MondiProduct;

typedef struct MondiMetrics {
  double mae;
  double rmse;
  double imae;
  double irmse;
  uintptr_t valid_count;
} MondiMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Description of the last failure on this thread, or an empty string.

 The pointer stays valid until the next call into this library on the
 same thread.
 */
const char *mondi_last_error(void);

/*
 Reads a bundle directory.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MondiStatus mondi_bundle_load(const char *path, struct MondiBundle **out);

/*
 Renders a synthetic bundle using the `generate` section of `config`.

 # Safety
 `config` must be null or a NUL-terminated TOML string; `out` must be a
 valid pointer.
 */
enum MondiStatus mondi_bundle_generate(uint64_t seed, const char *config, struct MondiBundle **out);

/*
 # Safety
 `bundle` must be a live handle; `height` and `width` valid pointers.
 */
enum MondiStatus mondi_bundle_dims(const struct MondiBundle *bundle,
                                   uintptr_t *height,
                                   uintptr_t *width);

/*
 # Safety
 `bundle` must be null or a handle not yet freed.
 */
void mondi_bundle_free(struct MondiBundle *bundle);

/*
 Scores and fuses the bundle's teachers.

 # Safety
 `bundle` must be a live handle, `config` null or a NUL-terminated TOML
 string, `out` a valid pointer.
 */
enum MondiStatus mondi_distill(const struct MondiBundle *bundle,
                               const char *config,
                               struct MondiProduct **out);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MondiStatus mondi_product_load(const char *path, struct MondiProduct **out);

/*
 Writes the product directory; values are stored as 32-bit floats.

 # Safety
 `product` must be a live handle and `path` a NUL-terminated string.
 */
enum MondiStatus mondi_product_save(const struct MondiProduct *product, const char *path);

/*
 Copies the distilled depth, row-major, into `buffer`.

 # Safety
 `product` must be a live handle and `buffer` valid for `len` writes.
 */
enum MondiStatus mondi_product_copy_distilled(const struct MondiProduct *product,
                                              double *buffer,
                                              uintptr_t len);

/*
 Copies the per-pixel monitor confidence, row-major, into `buffer`.

 # Safety
 `product` must be a live handle and `buffer` valid for `len` writes.
 */
enum MondiStatus mondi_product_copy_monitor(const struct MondiProduct *product,
                                            double *buffer,
                                            uintptr_t len);

/*
 # Safety
 `product` must be null or a handle not yet freed.
 */
void mondi_product_free(struct MondiProduct *product);

/*
 Optimizes a depth field supervised by `product`.

 # Safety
 Handles must be live, `config` null or a NUL-terminated TOML string,
 `out` a valid pointer.
 */
enum MondiStatus mondi_solve(const struct MondiBundle *bundle,
                             const struct MondiProduct *product,
                             const char *config,
                             struct MondiDepth **out);

/*
 # Safety
 `depth` must be a live handle and `buffer` valid for `len` writes.
 */
enum MondiStatus mondi_depth_copy(const struct MondiDepth *depth, double *buffer, uintptr_t len);

/*
 Writes the depth map as a single-channel PFM file.

 # Safety
 `depth` must be a live handle and `path` a NUL-terminated string.
 */
enum MondiStatus mondi_depth_save(const struct MondiDepth *depth, const char *path);

/*
 # Safety
 `depth` must be null or a handle not yet freed.
 */
void mondi_depth_free(struct MondiDepth *depth);

/*
 Scores `depth` against the bundle's ground truth inside the solver's
 depth range.

 # Safety
 Handles must be live, `config` null or a NUL-terminated TOML string,
 `out` a valid pointer.
 */
enum MondiStatus mondi_evaluate(const struct MondiBundle *bundle,
                                const struct MondiDepth *depth,
                                const char *config,
                                struct MondiMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MONDI_H */
