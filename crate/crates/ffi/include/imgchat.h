#ifndef IMGCHAT_H
#define IMGCHAT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ImgchatStatus {
  IMGCHAT_STATUS_OK = 0,
  IMGCHAT_STATUS_NULL_ARGUMENT = 1,
  IMGCHAT_STATUS_INVALID_UTF8 = 2,
  IMGCHAT_STATUS_INVALID_JSON = 3,
  IMGCHAT_STATUS_IO = 4,
  IMGCHAT_STATUS_NOT_FOUND = 5,
  // The session is in the wrong state for the call.
  IMGCHAT_STATUS_CONFLICT = 6,
  IMGCHAT_STATUS_INVALID_INPUT = 7,
  IMGCHAT_STATUS_INTERNAL = 8,
  IMGCHAT_STATUS_PANIC = 9,
} ImgchatStatus;

// Model, world, feature store and gallery index.
typedef struct ImgchatEngine ImgchatEngine;

// One conversation. Not thread-safe; serialize calls per session.
typedef struct ImgchatSession ImgchatSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until
// the next call into this library from the same thread.
const char *imgchat_last_error(void);

// # Safety
// `s` must be NULL or a string returned by this library, not yet freed.
void imgchat_string_free(char *s);

// Load a generated data directory and a checkpoint and index the
// benchmark gallery. `k` is the number of candidates per retrieval.
//
// # Safety
// `data_dir` and `checkpoint` must be NUL-terminated strings; `out` must
// be writable.
enum ImgchatStatus imgchat_engine_open(const char *data_dir,
                                       const char *checkpoint,
                                       size_t k,
                                       struct ImgchatEngine **out);

// # Safety
// `engine` must be NULL or a handle from [`imgchat_engine_open`] with no
// sessions still in use against it.
void imgchat_engine_free(struct ImgchatEngine *engine);

// Number of images in the indexed gallery, or 0 for NULL.
//
// # Safety
// `engine` must be NULL or a live handle.
size_t imgchat_engine_gallery_size(const struct ImgchatEngine *engine);

// # Safety
// `id` must be a NUL-terminated string; `out` must be writable.
enum ImgchatStatus imgchat_session_new(const char *id, struct ImgchatSession **out);

// # Safety
// `session` must be NULL or a handle from [`imgchat_session_new`].
void imgchat_session_free(struct ImgchatSession *session);

// Post a user turn. `input_json` has the shape of the HTTP turn body:
// `{"text": ..., "images": [...], "force_retrieval": bool}`. On success
// `*out_json` receives the turn response.
//
// # Safety
// Handles must be live; `input_json` NUL-terminated; `out_json` writable.
enum ImgchatStatus imgchat_session_post_turn(const struct ImgchatEngine *engine,
                                             struct ImgchatSession *session,
                                             const char *input_json,
                                             char **out_json);

// Accept one of the pending candidates.
//
// # Safety
// `session` must be a live handle.
enum ImgchatStatus imgchat_session_select(struct ImgchatSession *session, uint32_t image_id);

// Reject all pending candidates.
//
// # Safety
// `session` must be a live handle.
enum ImgchatStatus imgchat_session_dismiss(struct ImgchatSession *session);

// 1 while candidates await selection, 0 otherwise or for NULL.
//
// # Safety
// `session` must be NULL or a live handle.
int32_t imgchat_session_awaiting_selection(const struct ImgchatSession *session);

// # Safety
// Handles must be live; `out_json` writable.
enum ImgchatStatus imgchat_session_transcript(const struct ImgchatEngine *engine,
                                              const struct ImgchatSession *session,
                                              char **out_json);

// Re-run a transcript against `engine`. `*out_mismatches` receives the
// number of user turns whose response differs from the recording.
//
// # Safety
// `engine` must be live; `transcript_json` NUL-terminated;
// `out_mismatches` writable.
enum ImgchatStatus imgchat_replay(const struct ImgchatEngine *engine,
                                  const char *transcript_json,
                                  size_t *out_mismatches);

// Softmax over `queue_sims` followed by `pos_sim` at temperature `tau`.
// Writes `n_queue + 1` probabilities to `out`, positive last.
//
// # Safety
// `queue_sims` must hold `n_queue` doubles (may be NULL when zero) and
// `out` must have room for `n_queue + 1`.
enum ImgchatStatus imgchat_image_match_prob(const double *queue_sims,
                                            size_t n_queue,
                                            double pos_sim,
                                            double tau,
                                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IMGCHAT_H */
