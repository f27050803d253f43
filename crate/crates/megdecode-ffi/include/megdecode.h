#ifndef MEGDECODE_H
#define MEGDECODE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status of an FFI call. Mirrors the library error taxonomy, with
 * null-pointer and encoding failures reported before the library runs.
 */
typedef enum MegStatus {
  MegStatus_Ok = 0,
  MegStatus_NullPointer = 1,
  MegStatus_Utf8 = 2,
  MegStatus_Io = 3,
  MegStatus_Format = 4,
  MegStatus_Shape = 5,
  MegStatus_Invalid = 6,
  MegStatus_NonFinite = 7,
  MegStatus_Runtime = 8,
} MegStatus;

/**
 * A latent bank prepared as a retrieval candidate set.
 */
typedef struct MegBank MegBank;

/**
 * A trained brain module bound to its sensor layout.
 */
typedef struct MegModel MegModel;

/**
 * Shape and size summary of a loaded model.
 */
typedef struct MegModelInfo {
  /**
   * Input channels the model expects.
   */
  uintptr_t channels;
  /**
   * Time samples per epoch.
   */
  uintptr_t samples;
  /**
   * Subject slots; subject indices passed to predict must stay below this.
   */
  uintptr_t subjects;
  /**
   * Latent dimension of the prediction head.
   */
  uintptr_t output_dim;
  uint64_t param_count;
} MegModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Crate version as a static C string.
 */
const char *meg_version(void);

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread; never free it.
 */
const char *meg_last_error(void);

/**
 * Loads a checkpoint directory and the sensor layout it was trained with.
 *
 * # Safety
 * `checkpoint_dir` and `layout_path` must be NUL-terminated strings and
 * `out` must be a valid pointer; the returned handle must be released with
 * [`meg_model_free`].
 */
enum MegStatus meg_model_load(const char *checkpoint_dir,
                              const char *layout_path,
                              struct MegModel **out);

/**
 * Releases a model handle; a null pointer is a no-op.
 *
 * # Safety
 * `model` must come from [`meg_model_load`] and not be used afterwards.
 */
void meg_model_free(struct MegModel *model);

/**
 * Fills `info` with the model's expected shapes and parameter count.
 *
 * # Safety
 * `model` must be a live handle and `info` a valid pointer.
 */
enum MegStatus meg_model_info(const struct MegModel *model, struct MegModelInfo *info);

/**
 * Runs the prediction head on a batch of epochs.
 *
 * `x` holds `n` epochs of `channels * samples` values each, channel-major;
 * `subjects` holds one subject index per epoch; `out` receives
 * `n * output_dim` values, one latent row per epoch.
 *
 * # Safety
 * All pointers must be valid for the documented lengths; `out_len` must
 * equal `n * output_dim` (checked, reported as a shape error).
 */
enum MegStatus meg_model_predict(const struct MegModel *model,
                                 const double *x,
                                 uintptr_t n,
                                 const uint32_t *subjects,
                                 double *out,
                                 uintptr_t out_len);

/**
 * Loads a latent bank (`<path>.ids` sidecar required) as a candidate set.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer; the
 * returned handle must be released with [`meg_bank_free`].
 */
enum MegStatus meg_bank_load(const char *path, struct MegBank **out);

/**
 * Releases a bank handle; a null pointer is a no-op.
 *
 * # Safety
 * `bank` must come from [`meg_bank_load`] and not be used afterwards.
 */
void meg_bank_free(struct MegBank *bank);

/**
 * Writes the candidate count and latent dimension of a bank.
 *
 * # Safety
 * `bank` must be a live handle; `len` and `dim` may each be null to skip.
 */
enum MegStatus meg_bank_info(const struct MegBank *bank, uintptr_t *len, uintptr_t *dim);

/**
 * Ranks `true_id` among all candidates by cosine similarity to `query`.
 * Rank 1 means the true candidate scored highest.
 *
 * # Safety
 * `query` must hold `dim` values matching the bank's latent dimension;
 * `true_id` must be a NUL-terminated string; `out_rank` must be valid.
 */
enum MegStatus meg_bank_rank(const struct MegBank *bank,
                             const double *query,
                             uintptr_t dim,
                             const char *true_id,
                             uintptr_t *out_rank);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MEGDECODE_H */
