#ifndef ASFSEG_H
#define ASFSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Element type of a volume.
typedef enum AsfDtype {
  ASF_DTYPE_F32 = 0,
  ASF_DTYPE_U8 = 1,
} AsfDtype;

// Result of every call.
typedef enum AsfStatus {
  ASF_STATUS_OK = 0,
  // A required pointer argument was null.
  ASF_STATUS_NULL_POINTER = 1,
  // A string argument was not valid UTF-8.
  ASF_STATUS_INVALID_UTF8 = 2,
  // Precondition violated (wrong dims, dtype, argument range).
  ASF_STATUS_USAGE = 3,
  // Invalid config field.
  ASF_STATUS_CONFIG = 4,
  // Malformed file contents.
  ASF_STATUS_FORMAT = 5,
  ASF_STATUS_IO = 6,
  // Non-finite value during computation.
  ASF_STATUS_NUMERIC = 7,
  // Internal error; the library panicked.
  ASF_STATUS_PANIC = 8,
} AsfStatus;

// Trained or freshly initialized network.
typedef struct AsfModel AsfModel;

// A `D x H x W` volume of `f32` intensities or `u8` mask values.
typedef struct AsfVolume AsfVolume;

// Aggregate metrics over the slices that contain a nodule.
typedef struct AsfMetrics {
  double iou;
  double dsc;
  double sen;
  double acc;
  // Slices whose ground truth has at least one positive voxel. When 0
  // the four metrics are undefined and set to NaN.
  size_t nodule_slices;
} AsfMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer stays
// valid until the next call into the library on this thread.
const char *asf_last_error(void);

// Library version as a static NUL-terminated string.
const char *asf_version(void);

// Loads a model from a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum AsfStatus asf_model_load(const char *path, struct AsfModel **out);

// Creates an untrained model with the default architecture.
//
// # Safety
// `out` must be a valid pointer.
enum AsfStatus asf_model_new_default(uint64_t seed, struct AsfModel **out);

// Number of trainable scalars.
//
// # Safety
// `model` must come from this library; `out` must be a valid pointer.
enum AsfStatus asf_model_num_parameters(const struct AsfModel *model, size_t *out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void asf_model_free(struct AsfModel *model);

// Loads a volume by name (path without the `.json` / `.raw` extension).
//
// # Safety
// `name` must be a NUL-terminated string and `out` a valid pointer.
enum AsfStatus asf_volume_load(const char *name, struct AsfVolume **out);

// Copies `len = d * h * w` values (slice-major, `x` fastest) into a new
// volume with unit spacing. `u8` volumes accept only 0 and 1.
//
// # Safety
// `dims` must point to 3 values, `data` to `len` floats, `out` must be valid.
enum AsfStatus asf_volume_new(const size_t *dims,
                              const float *data,
                              size_t len,
                              enum AsfDtype dtype,
                              struct AsfVolume **out);

// Writes `D, H, W` into `dims_out[0..3]`.
//
// # Safety
// `volume` must come from this library; `dims_out` must hold 3 values.
enum AsfStatus asf_volume_dims(const struct AsfVolume *volume, size_t *dims_out);

// Borrowed view of the voxels as floats; valid while the volume lives.
//
// # Safety
// `volume` must come from this library; `data` and `len` must be valid.
enum AsfStatus asf_volume_data(const struct AsfVolume *volume, const float **data, size_t *len);

// # Safety
// `volume` must come from this library; `name` must be NUL-terminated.
enum AsfStatus asf_volume_save(const struct AsfVolume *volume, const char *name);

// Releases a volume. Null is ignored.
//
// # Safety
// `volume` must come from this library and not be used afterwards.
void asf_volume_free(struct AsfVolume *volume);

// Segments a normalized `f32` image volume. Produces the probability volume
// and the mask thresholded at `threshold` (values `>= threshold` are 1).
//
// # Safety
// `model` and `image` must come from this library; the out pointers must be valid.
enum AsfStatus asf_predict(const struct AsfModel *model,
                           const struct AsfVolume *image,
                           float threshold,
                           struct AsfVolume **prob_out,
                           struct AsfVolume **mask_out);

// Scores `pred` (binarized at `threshold`) against the `u8` mask `gt`,
// averaging over the slices that contain a nodule.
//
// # Safety
// `pred` and `gt` must come from this library; `out` must be valid.
enum AsfStatus asf_evaluate(const struct AsfVolume *pred,
                            const struct AsfVolume *gt,
                            float threshold,
                            struct AsfMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ASFSEG_H */
