#ifndef GSAVATAR_H
#define GSAVATAR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every entry point.
typedef enum GsaStatus {
  GSA_STATUS_OK = 0,
  GSA_STATUS_NULL_POINTER = 1,
  GSA_STATUS_INVALID_ARGUMENT = 2,
  GSA_STATUS_IO = 3,
  GSA_STATUS_CHECKPOINT = 4,
  GSA_STATUS_VERSION_MISMATCH = 5,
  GSA_STATUS_CONFIG = 6,
  GSA_STATUS_INTERNAL = 7,
  GSA_STATUS_PANIC = 8,
} GsaStatus;

// Opaque trained model.
typedef struct GsaModel GsaModel;

// Pinhole camera, OpenCV axes (x right, y down, z forward).
typedef struct GsaCamera {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
  // Row-major world-to-camera rotation.
  double rotation[9];
  double translation[3];
  double near;
  double far;
} GsaCamera;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a success.
// Valid until the next call into this library on the same thread.
const char *gsa_last_error(void);

// Library version as a static NUL-terminated string.
const char *gsa_version(void);

// Loads a checkpoint file into a new handle stored in `*out`.
//
// # Safety
// `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
enum GsaStatus gsa_model_load(const char *path, struct GsaModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from `gsa_model_load` and not be used afterwards.
void gsa_model_free(struct GsaModel *model);

// Number of canonical gaussians.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum GsaStatus gsa_model_num_gaussians(const struct GsaModel *model, size_t *out);

// Number of skeleton joints `B`; a pose holds `8 + 4 * B` values.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum GsaStatus gsa_model_num_joints(const struct GsaModel *model, size_t *out);

// Camera on the synthetic orbit around the template at `azimuth_deg`.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum GsaStatus gsa_orbit_camera(const struct GsaModel *model,
                                double azimuth_deg,
                                struct GsaCamera *out);

// Renders one image.
//
// `pose` holds `pose_len = 8 + 4 * B` values laid out as translation (3),
// global rotation quaternion `(w, x, y, z)`, one local quaternion per joint
// and the scale. `rgb` receives `width * height * 3` interleaved values in
// `[0, 1]`; `alpha` (may be null) receives `width * height` opacities.
//
// # Safety
// All non-null pointers must reference buffers of the stated lengths.
enum GsaStatus gsa_model_render(const struct GsaModel *model,
                                const double *pose,
                                size_t pose_len,
                                const struct GsaCamera *camera,
                                bool nonrigid,
                                double *rgb,
                                size_t rgb_len,
                                double *alpha,
                                size_t alpha_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GSAVATAR_H */
