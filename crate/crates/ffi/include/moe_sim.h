#ifndef MOE_SIM_H
#define MOE_SIM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every exported call.
typedef enum MoeStatus {
  MOE_STATUS_OK = 0,
  MOE_STATUS_NULL_POINTER = 1,
  MOE_STATUS_INVALID_ARGUMENT = 2,
  MOE_STATUS_IO = 3,
  MOE_STATUS_CORRUPT = 4,
  MOE_STATUS_SOLVER = 5,
  MOE_STATUS_PANIC = 6,
} MoeStatus;

// Validated simulator configuration.
typedef struct MoeConfig MoeConfig;

// Trained force estimator.
typedef struct MoeEstimator MoeEstimator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread, or NULL. The pointer
// stays valid until the next failing call on the same thread.
const char *moe_last_error(void);

// Parse a JSON configuration; NULL or "" gives the defaults. Free the
// result with `moe_config_free`.
//
// # Safety
// `json` is NULL or a nul-terminated string; `out` is writable.
enum MoeStatus moe_config_new(const char *json, struct MoeConfig **out);

// # Safety
// `config` is NULL or came from `moe_config_new` and is not used again.
void moe_config_free(struct MoeConfig *config);

// Load an estimator checkpoint. Free the result with `moe_estimator_free`.
//
// # Safety
// `path` is a nul-terminated string; `out` is writable.
enum MoeStatus moe_estimator_load(const char *path, struct MoeEstimator **out);

// # Safety
// `estimator` is NULL or came from `moe_estimator_load` and is not used again.
void moe_estimator_free(struct MoeEstimator *estimator);

// Image size the estimator expects.
//
// # Safety
// `estimator` is live; `width` and `height` are writable.
enum MoeStatus moe_estimator_image_size(const struct MoeEstimator *estimator,
                                        size_t *width,
                                        size_t *height);

// Estimate the contact force (N, end-effector frame) from a row-major depth
// image in millimetres, a finger mask (non-zero bytes are finger pixels)
// and the four actuator loads.
//
// # Safety
// `depth` and `mask` hold `width * height` elements, `q` holds 4 and
// `out_force` has room for 3.
enum MoeStatus moe_estimator_predict(const struct MoeEstimator *estimator,
                                     const uint16_t *depth,
                                     const uint8_t *mask,
                                     size_t width,
                                     size_t height,
                                     const double *q,
                                     double *out_force);

// Zero every depth pixel outside the mask.
//
// # Safety
// `depth`, `mask` and `out` hold `width * height` elements; `out` may alias `depth`.
enum MoeStatus moe_apply_mask(const uint16_t *depth,
                              const uint8_t *mask,
                              size_t width,
                              size_t height,
                              uint16_t *out);

// Squared norm of the per-axis weighted force error.
//
// # Safety
// `w`, `w_hat` and `lambda` hold 3 values; `out` is writable.
enum MoeStatus moe_weighted_mse(const double *w,
                                const double *w_hat,
                                const double *lambda,
                                double *out);

// Peak head force (N) of the rigid gripper pressed `depth` meters into the hair.
//
// # Safety
// `config` is live; `out_force` is writable.
enum MoeStatus moe_rigid_press(const struct MoeConfig *config, double depth, double *out_force);

// Solve the soft end-effector pressed `depth` meters past first hair
// contact along `direction` (from the head center) under four tendon
// commands. Writes the peak head force magnitude, and optionally the eight
// tendon tensions and the torque residual.
//
// # Safety
// `commands` holds 4 values and `direction` 3; `out_force` is writable;
// `out_tensions` is NULL or has room for 8; `out_residual` is NULL or writable.
enum MoeStatus moe_soft_press(const struct MoeConfig *config,
                              const double *commands,
                              const double *direction,
                              double depth,
                              double *out_force,
                              double *out_tensions,
                              double *out_residual);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOE_SIM_H */
