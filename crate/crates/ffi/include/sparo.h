#ifndef SPARO_H
#define SPARO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Status codes shared by every entry point.
 */
typedef enum SparoStatus {
  SPARO_OK = 0,
  SPARO_ERR_NULL_POINTER = 1,
  SPARO_ERR_INVALID_ARGUMENT = 2,
  SPARO_ERR_IO = 3,
  SPARO_ERR_CHECKPOINT = 4,
  SPARO_ERR_CONTRACT = 5,
  SPARO_ERR_NUMERIC = 6,
  SPARO_ERR_BUFFER_TOO_SMALL = 7,
  SPARO_ERR_UNSUPPORTED = 8,
  SPARO_ERR_PANIC = 9,
} SparoStatus;

/*
 Opaque handle to a loaded model.
 */
typedef struct SparoModel SparoModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty after a success.
 The pointer stays valid until the next call on the same thread.
 */
const char *sparo_last_error(void);

/*
 Loads a checkpoint directory (or a run directory holding `final/`).

 # Safety
 `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum SparoStatus sparo_model_load(const char *dir, struct SparoModel **out);

/*
 Releases a handle; null is ignored.

 # Safety
 `model` must come from [`sparo_model_load`] and not be used afterwards.
 */
void sparo_model_free(struct SparoModel *model);

/*
 Length of one encoding.

 # Safety
 `model` must be a live handle; `out` must be writable.
 */
enum SparoStatus sparo_model_encoding_dim(const struct SparoModel *model, size_t *out);

/*
 Slot count and slot dimension of the encoding.

 # Safety
 `model` must be a live handle; both outputs must be writable.
 */
enum SparoStatus sparo_model_slot_layout(const struct SparoModel *model,
                                         size_t *slots,
                                         size_t *slot_dim);

/*
 Encodes one continuous sequence `seq: [len, dim]` (row-major) with the
 image tower. Contrastive models return slot-normalized encodings,
 self-distillation models the raw encoding.

 # Safety
 `seq` must hold `len * dim` floats and `out` at least `out_len`.
 */
enum SparoStatus sparo_encode_image(const struct SparoModel *model,
                                    const float *seq,
                                    size_t len,
                                    size_t dim,
                                    float *out,
                                    size_t out_len);

/*
 Encodes one token sequence with the text tower; its last token is the
 EOS position.

 # Safety
 `ids` must hold `len` values and `out` at least `out_len` floats.
 */
enum SparoStatus sparo_encode_text(const struct SparoModel *model,
                                   const uint32_t *ids,
                                   size_t len,
                                   float *out,
                                   size_t out_len);

/*
 Per-slot unit normalization followed by `1/sqrt(slots)` scaling of
 `y: [slots * slot_dim]`; `out` may alias `y`.

 # Safety
 `y` and `out` must hold `slots * slot_dim` floats.
 */
enum SparoStatus sparo_clip_normalize(const float *y, size_t slots, size_t slot_dim, float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPARO_H */
