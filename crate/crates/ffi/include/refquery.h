#ifndef REFQUERY_H
#define REFQUERY_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RqStatus {
  RQ_STATUS_OK = 0,
  RQ_STATUS_NULL_ARGUMENT = 1,
  RQ_STATUS_INVALID_ARGUMENT = 2,
  RQ_STATUS_BUFFER_TOO_SMALL = 3,
  RQ_STATUS_CONFIG = 4,
  RQ_STATUS_VALIDATION = 5,
  RQ_STATUS_LOAD = 6,
  RQ_STATUS_CHECKPOINT = 7,
  RQ_STATUS_NUMERIC = 8,
  RQ_STATUS_IO = 9,
  RQ_STATUS_PANIC = 10,
} RqStatus;

/*
 A loaded feature clip.
 */
typedef struct RqClip RqClip;

/*
 A model with checkpoint weights.
 */
typedef struct RqModel RqModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message describing the last failed call on this thread; empty after a
 successful call. Valid until the next call on the same thread.
 */
const char *rq_last_error(void);

/*
 Minimum-cost assignment for a row-major `n × n` cost matrix. Row `i` is
 assigned column `out_perm[i]`.

 # Safety
 `cost` must point to `n * n` doubles and `out_perm` to `n` writable
 `size_t`; `out_cost` may be null.
 */
enum RqStatus rq_hungarian(const double *cost, size_t n, size_t *out_perm, double *out_cost);

/*
 Region similarity J of two `h × w` masks given as bytes (nonzero = on).

 # Safety
 `pred` and `gt` must point to `h * w` bytes, `out` to a writable double.
 */
enum RqStatus rq_region_similarity(const uint8_t *pred,
                                   const uint8_t *gt,
                                   size_t h,
                                   size_t w,
                                   double *out);

/*
 Contour accuracy F of two masks. A non-positive `tolerance` selects the
 default radius for the mask size.

 # Safety
 As for [`rq_region_similarity`].
 */
enum RqStatus rq_contour_accuracy(const uint8_t *pred,
                                  const uint8_t *gt,
                                  size_t h,
                                  size_t w,
                                  double tolerance,
                                  double *out);

/*
 Loads a clip from its manifest.

 # Safety
 `manifest` must be a NUL-terminated path and `out` writable.
 */
enum RqStatus rq_clip_load(const char *manifest, struct RqClip **out);

/*
 Frame count and ground-truth mask size of a clip.

 # Safety
 `clip` must come from [`rq_clip_load`]; output pointers may be null.
 */
enum RqStatus rq_clip_info(const struct RqClip *clip,
                           size_t *frames,
                           size_t *height,
                           size_t *width);

/*
 # Safety
 `clip` must come from [`rq_clip_load`] and not be used afterwards.
 */
void rq_clip_free(struct RqClip *clip);

/*
 Builds a model from a checkpoint. With a null `config`, the architecture
 and threshold come from the checkpoint's own setup; otherwise the TOML
 file must describe the same architecture.

 # Safety
 Paths must be NUL-terminated (or null for `config`), `out` writable.
 */
enum RqStatus rq_model_load(const char *config, const char *checkpoint, struct RqModel **out);

/*
 Segments every frame of `clip` into `out`, frame-major, one byte per
 pixel (1 = referred object). `capacity` is the size of `out` in bytes and
 must be at least `frames * height * width`.

 # Safety
 `model` and `clip` must be live handles and `out` must hold `capacity`
 writable bytes.
 */
enum RqStatus rq_model_segment(const struct RqModel *model,
                               const struct RqClip *clip,
                               uint8_t *out,
                               size_t capacity);

/*
 # Safety
 `model` must come from [`rq_model_load`] and not be used afterwards.
 */
void rq_model_free(struct RqModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REFQUERY_H */
