#ifndef MOTIONDIFF_H
#define MOTIONDIFF_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Motion kind codes used by [`md_sequence_new`].
 */
#define MD_KIND_FACE 0

#define MD_KIND_HEAD 1

/**
 * Variant codes reported by [`md_model_info`].
 */
#define MD_VARIANT_FACIAL 0

#define MD_VARIANT_HEAD 1

/**
 * Result code of every fallible call.
 */
typedef enum MdStatus {
  MD_STATUS_OK = 0,
  MD_STATUS_NULL_POINTER = 1,
  MD_STATUS_INVALID_ARGUMENT = 2,
  MD_STATUS_IO = 3,
  MD_STATUS_FORMAT = 4,
  /**
   * Model variant or channel count does not fit the input.
   */
  MD_STATUS_MISMATCH = 5,
  MD_STATUS_RUNTIME = 6,
  MD_STATUS_PANIC = 7,
} MdStatus;

/**
 * Opaque trained denoiser.
 */
typedef struct MdModel MdModel;

/**
 * Opaque motion sequence.
 */
typedef struct MdSequence MdSequence;

typedef struct MdModelInfo {
  uint32_t variant;
  size_t motion_channels;
  size_t audio_in;
  size_t subjects;
  size_t steps;
} MdModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *md_last_error(void);

/**
 * Loads a checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum MdStatus md_model_load(const char *path, struct MdModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from [`md_model_load`] not yet freed.
 */
void md_model_free(struct MdModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum MdStatus md_model_info(const struct MdModel *model, struct MdModelInfo *out);

/**
 * Copies `frames * channels` row-major values into a new sequence.
 *
 * # Safety
 * `data` must point to `frames * channels` floats and `out` be writable.
 */
enum MdStatus md_sequence_new(uint32_t kind,
                              float fps,
                              size_t frames,
                              size_t channels,
                              const float *data,
                              struct MdSequence **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum MdStatus md_sequence_read(const char *path, struct MdSequence **out);

/**
 * # Safety
 * `seq` must be a live handle and `path` a NUL-terminated string.
 */
enum MdStatus md_sequence_write(const struct MdSequence *seq, const char *path);

/**
 * Frame count, or 0 for NULL.
 *
 * # Safety
 * `seq` must be NULL or a live handle.
 */
size_t md_sequence_frames(const struct MdSequence *seq);

/**
 * Channel count, or 0 for NULL.
 *
 * # Safety
 * `seq` must be NULL or a live handle.
 */
size_t md_sequence_channels(const struct MdSequence *seq);

/**
 * Row-major values, valid while the handle lives.
 *
 * # Safety
 * `seq` must be NULL or a live handle.
 */
const float *md_sequence_data(const struct MdSequence *seq);

/**
 * # Safety
 * `seq` must be NULL or a handle not yet freed.
 */
void md_sequence_free(struct MdSequence *seq);

/**
 * Draws one sequence of `frames` frames.
 *
 * `audio` holds `frames * audio_in` values or is NULL for an unconditional
 * facial draw and silent head motion. `subject` indexes the model's
 * subjects; a negative value selects the mean style.
 *
 * # Safety
 * `model` must be a live handle, `audio` NULL or readable for the stated
 * length, and `out` writable.
 */
enum MdStatus md_sample(const struct MdModel *model,
                        size_t frames,
                        const float *audio,
                        int32_t subject,
                        double scale,
                        uint64_t seed,
                        struct MdSequence **out);

/**
 * Regenerates `base` where `mask` is 0 and keeps it where `mask` is 1.
 *
 * `mask` holds one value per frame. Facial models copy known frames into
 * the result; head models use sparse guidance.
 *
 * # Safety
 * Handles must be live, `mask` readable for the frame count, `audio` NULL
 * or readable for `frames * audio_in` values, and `out` writable.
 */
enum MdStatus md_edit(const struct MdModel *model,
                      const struct MdSequence *base,
                      const float *mask,
                      const float *audio,
                      int32_t subject,
                      double scale,
                      uint64_t seed,
                      struct MdSequence **out);

/**
 * DTW lip-sync error over `region_len` channel indices; all channels when
 * `region` is NULL.
 *
 * # Safety
 * Handles must be live, `region` NULL or readable, `out` writable.
 */
enum MdStatus md_lip_sync(const struct MdSequence *pred,
                          const struct MdSequence *gt,
                          const size_t *region,
                          size_t region_len,
                          double *out);

/**
 * Mean pairwise distance over `count` sequences.
 *
 * # Safety
 * `seqs` must point to `count` live handles and `out` be writable.
 */
enum MdStatus md_diversity(const struct MdSequence *const *seqs, size_t count, double *out);

/**
 * Beat alignment of head motion against ground truth with kernel width
 * `sigma` in seconds.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
enum MdStatus md_beat_align(const struct MdSequence *pred,
                            const struct MdSequence *gt,
                            double sigma,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOTIONDIFF_H */
