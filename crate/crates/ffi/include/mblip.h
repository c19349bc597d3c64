#ifndef MBLIP_H
#define MBLIP_H

#include <stdbool.h>
#include <stddef.h>

typedef enum MblipStatus {
  MBLIP_STATUS_OK = 0,
  MBLIP_STATUS_NULL_POINTER = 1,
  MBLIP_STATUS_INVALID_UTF8 = 2,
  MBLIP_STATUS_INVALID_INPUT = 3,
  MBLIP_STATUS_IO = 4,
  MBLIP_STATUS_CHECKPOINT = 5,
  MBLIP_STATUS_PANIC = 6,
} MblipStatus;

/**
 * Opaque model handle.
 */
typedef struct MblipModel MblipModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *mblip_last_error(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MblipStatus mblip_model_load(const char *path, struct MblipModel **out);

/**
 * # Safety
 * `model` must come from [`mblip_model_load`] and not be used afterwards.
 */
void mblip_model_free(struct MblipModel *model);

/**
 * Beam-search decodes one answer. `image_dir` may be null to render
 * synthetic scenes from the ids. The result goes to `out_text`.
 *
 * # Safety
 * All string arguments must be NUL-terminated; `image_ids` must point to
 * `n_images` strings.
 */
enum MblipStatus mblip_generate(const struct MblipModel *model,
                                const char *prompt,
                                const char *const *image_ids,
                                size_t n_images,
                                const char *image_dir,
                                size_t beam_width,
                                double length_penalty,
                                size_t max_len,
                                char **out_text);

/**
 * Corpus CIDEr. `candidates_json` maps image id to caption,
 * `references_json` maps image id to a list of captions.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out_score` must be valid.
 */
enum MblipStatus mblip_cider(const char *candidates_json,
                             const char *references_json,
                             const char *language,
                             double *out_score);

/**
 * Writes 1 to `out_match` if `prediction` matches any entry of the JSON
 * string array `gold_json`. `strict` disables normalization.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out_match` must be valid.
 */
enum MblipStatus mblip_exact_match(const char *prediction,
                                   const char *gold_json,
                                   bool strict,
                                   bool *out_match);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void mblip_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MBLIP_H */
