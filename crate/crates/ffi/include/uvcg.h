#ifndef UVCG_H
#define UVCG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum UvcgStatus {
  UVCG_STATUS_OK = 0,
  UVCG_STATUS_NULL_POINTER = 1,
  UVCG_STATUS_INVALID_ARGUMENT = 2,
  UVCG_STATUS_FORMAT = 3,
  UVCG_STATUS_INTEGRITY = 4,
  UVCG_STATUS_IO = 5,
  UVCG_STATUS_CONFIG = 6,
  UVCG_STATUS_NUMERICAL = 7,
  UVCG_STATUS_SIDECAR = 8,
  UVCG_STATUS_CAPABILITY = 9,
  UVCG_STATUS_SCHEMA = 10,
  UVCG_STATUS_PANIC = 11,
} UvcgStatus;

/**
 * A video clip: RGB frames in `[0, 1]`, row-major, channels interleaved.
 */
typedef struct UvcgClip UvcgClip;

/**
 * A latent encoder.
 */
typedef struct UvcgEncoder UvcgEncoder;

/**
 * The outcome of a protection or baseline run.
 */
typedef struct UvcgProtection UvcgProtection;

/**
 * Optimizer settings. Budgets are in `[0, 1]` pixel units.
 */
typedef struct UvcgProtectionConfig {
  float epsilon;
  float alpha;
  uint32_t steps;
  bool warm_start;
  /**
   * Keep the final iterate instead of the lowest-loss one.
   */
  bool last_iterate;
  uint64_t seed;
} UvcgProtectionConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *uvcg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *uvcg_version(void);

struct UvcgProtectionConfig uvcg_protection_config_default(void);

/**
 * Loads a clip directory (PNG frames plus manifest).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum UvcgStatus uvcg_clip_load(const char *path, struct UvcgClip **out);

/**
 * Builds a clip from `frames` consecutive `height x width x 3` f32 buffers.
 *
 * # Safety
 * `name` must be a NUL-terminated string, `pixels` must point to
 * `frames * height * width * 3` floats, and `out` must be writable.
 */
enum UvcgStatus uvcg_clip_from_pixels(const char *name,
                                      size_t width,
                                      size_t height,
                                      size_t frames,
                                      const float *pixels,
                                      struct UvcgClip **out);

/**
 * Writes a clip directory.
 *
 * # Safety
 * `clip` must be a live handle and `path` a NUL-terminated string.
 */
enum UvcgStatus uvcg_clip_save(const struct UvcgClip *clip, const char *path);

/**
 * # Safety
 * `clip` must be a handle from this library or null.
 */
void uvcg_clip_free(struct UvcgClip *clip);

/**
 * Frame count, or 0 for a null handle.
 *
 * # Safety
 * `clip` must be a live handle or null.
 */
size_t uvcg_clip_frame_count(const struct UvcgClip *clip);

/**
 * # Safety
 * `clip` must be a live handle or null.
 */
size_t uvcg_clip_width(const struct UvcgClip *clip);

/**
 * # Safety
 * `clip` must be a live handle or null.
 */
size_t uvcg_clip_height(const struct UvcgClip *clip);

/**
 * Borrows frame `index`'s pixels; valid while `clip` lives.
 *
 * # Safety
 * `clip` must be a live handle; `pixels` and `len` must be writable.
 */
enum UvcgStatus uvcg_clip_frame(const struct UvcgClip *clip,
                                size_t index,
                                const float **pixels,
                                size_t *len);

/**
 * The deterministic reference encoder.
 *
 * # Safety
 * `out` must be writable.
 */
enum UvcgStatus uvcg_encoder_reference(uint64_t seed,
                                       size_t downsample_factor,
                                       size_t latent_channels,
                                       struct UvcgEncoder **out);

/**
 * The identity encoder (latent = pixels).
 *
 * # Safety
 * `out` must be writable.
 */
enum UvcgStatus uvcg_encoder_identity(struct UvcgEncoder **out);

/**
 * Launches a model sidecar with a shell command and completes the handshake.
 *
 * # Safety
 * `command` must be a NUL-terminated string; `out` must be writable.
 */
enum UvcgStatus uvcg_encoder_sidecar(const char *command, struct UvcgEncoder **out);

/**
 * # Safety
 * `encoder` must be a handle from this library or null.
 */
void uvcg_encoder_free(struct UvcgEncoder *encoder);

/**
 * Immunizes `clip` toward `target`'s latents.
 *
 * # Safety
 * All handles must be live, `config` must point to a config, and `out`
 * must be writable.
 */
enum UvcgStatus uvcg_protect(const struct UvcgClip *clip,
                             const struct UvcgClip *target,
                             const struct UvcgEncoder *encoder,
                             const struct UvcgProtectionConfig *config,
                             struct UvcgProtection **out);

/**
 * Uniform-noise baseline at the same budget.
 *
 * # Safety
 * `clip` must be live, `config` must point to a config, `out` writable.
 */
enum UvcgStatus uvcg_baseline(const struct UvcgClip *clip,
                              const struct UvcgProtectionConfig *config,
                              struct UvcgProtection **out);

/**
 * Borrows the immunized clip; valid while `protection` lives. Null for a
 * null handle.
 *
 * # Safety
 * `protection` must be a live handle or null.
 */
const struct UvcgClip *uvcg_protection_clip(const struct UvcgProtection *protection);

/**
 * Largest absolute perturbation over all frames.
 *
 * # Safety
 * `protection` must be a live handle or null.
 */
float uvcg_protection_max_abs_delta(const struct UvcgProtection *protection);

/**
 * Loss of the kept iterate for `frame`. Fails with `Capability` for a
 * baseline run, which records no losses.
 *
 * # Safety
 * `protection` must be a live handle; `loss` must be writable.
 */
enum UvcgStatus uvcg_protection_final_loss(const struct UvcgProtection *protection,
                                           size_t frame,
                                           float *loss);

/**
 * # Safety
 * `protection` must be a handle from this library or null.
 */
void uvcg_protection_free(struct UvcgProtection *protection);

/**
 * Mean per-frame PSNR in dB.
 *
 * # Safety
 * Both handles must be live; `out` must be writable.
 */
enum UvcgStatus uvcg_psnr(const struct UvcgClip *a, const struct UvcgClip *b, double *out);

/**
 * Mean per-frame SSIM.
 *
 * # Safety
 * Both handles must be live; `out` must be writable.
 */
enum UvcgStatus uvcg_ssim(const struct UvcgClip *a, const struct UvcgClip *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UVCG_H */
