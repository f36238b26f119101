#ifndef TINYLLAMA_H
#define TINYLLAMA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. 2, 3 and 4 match the command line's exit codes.
 */
typedef enum TlStatus {
  TL_STATUS_OK = 0,
  /**
   * A required pointer was null.
   */
  TL_STATUS_NULL_POINTER = 1,
  /**
   * Bad configuration, argument or range.
   */
  TL_STATUS_USAGE = 2,
  /**
   * Unreadable or malformed input data.
   */
  TL_STATUS_DATA = 3,
  TL_STATUS_NUMERICAL = 4,
  /**
   * The output buffer is too small; the needed length was written.
   */
  TL_STATUS_BUFFER_TOO_SMALL = 5,
  /**
   * A Rust panic was caught.
   */
  TL_STATUS_INTERNAL = 6,
} TlStatus;

/**
 * A loaded model. Opaque to C.
 */
typedef struct TlModel TlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` as a
 * NUL-terminated string, truncating to `cap`. Returns the full message
 * length without the terminator; 0 when there is no error.
 *
 * # Safety
 * `buf` must be valid for `cap` writes or be null.
 */
size_t tl_last_error(char *buf, size_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tl_version(void);

/**
 * Loads the weights of a training checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum TlStatus tl_model_load(const char *path, struct TlModel **out);

/**
 * Freshly initialized model from a preset name (`desk`, `full`, `full-16h`).
 *
 * # Safety
 * `preset` must be a NUL-terminated string; `out` must be writable.
 */
enum TlStatus tl_model_init(const char *preset, uint64_t seed, struct TlModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void tl_model_free(struct TlModel *model);

/**
 * Vocabulary size, or 0 for a null handle.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t tl_model_vocab_size(const struct TlModel *model);

/**
 * Context window, or 0 for a null handle.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t tl_model_context_len(const struct TlModel *model);

/**
 * Parameter count of a preset.
 *
 * # Safety
 * `preset` must be a NUL-terminated string; `out` must be writable.
 */
enum TlStatus tl_preset_param_count(const char *preset, uint64_t *out);

/**
 * Warmup-cosine learning rate at `step`.
 *
 * # Safety
 * `out` must be writable.
 */
enum TlStatus tl_lr_at(double lr_max,
                       double lr_min,
                       uint64_t warmup_steps,
                       uint64_t total_steps,
                       uint64_t step,
                       double *out);

/**
 * Continues a prompt. `temperature` 0 is greedy; `top_k` 0 disables top-k.
 * Generation stops at the end-of-sequence token or after `max_new`
 * tokens. New tokens go to `out_tokens`; their count to `out_len`. If
 * `out_cap` is smaller than `max_new`, nothing is generated, `out_len`
 * receives `max_new` and the call returns `BufferTooSmall`.
 *
 * # Safety
 * `prompt` must be valid for `prompt_len` reads, `out_tokens` for `out_cap`
 * writes, and `out_len` writable.
 */
enum TlStatus tl_generate(const struct TlModel *model,
                          const uint32_t *prompt,
                          size_t prompt_len,
                          size_t max_new,
                          float temperature,
                          size_t top_k,
                          uint64_t seed,
                          uint32_t *out_tokens,
                          size_t out_cap,
                          size_t *out_len);

/**
 * Summed and per-token mean log-likelihood of `choice` after `context`.
 *
 * # Safety
 * The token pointers must be valid for their lengths; outputs writable.
 */
enum TlStatus tl_choice_loglik(const struct TlModel *model,
                               const uint32_t *context,
                               size_t context_len,
                               const uint32_t *choice,
                               size_t choice_len,
                               double *out_sum,
                               double *out_mean);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TINYLLAMA_H */
