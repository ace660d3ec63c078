#ifndef CODECSERVE_H
#define CODECSERVE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CsStatus {
  CS_STATUS_OK = 0,
  CS_STATUS_NULL_POINTER = 1,
  CS_STATUS_INVALID_ARGUMENT = 2,
  CS_STATUS_BUFFER_TOO_SMALL = 3,
  CS_STATUS_UNKNOWN_ADAPTER = 4,
  CS_STATUS_BAD_CONTAINER = 5,
  CS_STATUS_OUT_OF_PAGES = 6,
  CS_STATUS_RESOURCE_EXHAUSTED = 7,
  CS_STATUS_BAD_CONFIG = 8,
  CS_STATUS_IO = 9,
  CS_STATUS_NUMERIC = 10,
  CS_STATUS_INTERNAL = 11,
} CsStatus;

typedef enum CsDecodeMode {
  CS_DECODE_MODE_GREEDY = 0,
  CS_DECODE_MODE_SAMPLED = 1,
} CsDecodeMode;

/**
 * Toy codec for token/PCM conversion.
 */
typedef struct CsCodec CsCodec;

/**
 * Model, adapter registry and KV cache built from one config.
 */
typedef struct CsEngine CsEngine;

typedef struct CsDecodeParams {
  enum CsDecodeMode mode;
  float temperature;
  size_t top_k;
  uint64_t rng_seed;
  size_t max_new_tokens;
} CsDecodeParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cs_version(void);

/**
 * Stable name of a status, e.g. `"unknown-adapter"`.
 */
const char *cs_status_name(enum CsStatus status);

/**
 * Copy the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `cap > 0`). Returns the full message length
 * excluding the terminator.
 *
 * # Safety
 * `buf` must be NULL or point to `cap` writable bytes.
 */
size_t cs_last_error_message(char *buf, size_t cap);

struct CsDecodeParams cs_decode_params_default(void);

/**
 * Build an engine from a JSON config; NULL or `""` selects the defaults.
 *
 * # Safety
 * `config_json` must be NULL or a valid NUL-terminated string; `out` must
 * point to writable storage for one pointer.
 */
enum CsStatus cs_engine_new(const char *config_json, struct CsEngine **out);

/**
 * # Safety
 * `engine` must be NULL or a handle from [`cs_engine_new`] not yet freed.
 */
void cs_engine_free(struct CsEngine *engine);

/**
 * Hex SHA-256 of the engine's resolved config (64 chars plus NUL).
 *
 * # Safety
 * `engine` must be a live handle; `buf` must point to `cap` writable bytes.
 */
enum CsStatus cs_engine_config_checksum(const struct CsEngine *engine, char *buf, size_t cap);

/**
 * Register a TKLA adapter blob under its embedded name.
 *
 * # Safety
 * `engine` must be a live handle; `data` must point to `len` readable bytes.
 */
enum CsStatus cs_engine_load_adapter(const struct CsEngine *engine,
                                     const uint8_t *data,
                                     size_t len);

/**
 * # Safety
 * `engine` must be a live handle; `name` a valid NUL-terminated string.
 */
enum CsStatus cs_engine_unload_adapter(const struct CsEngine *engine, const char *name);

/**
 * Synthesize codec tokens for phoneme inventory indices.
 *
 * `prompt_pcm` (mono s16 at the codec sample rate) may be NULL to use the
 * built-in neutral prompt. `adapter_names` lists registered adapters, at
 * most one per kind. `params` may be NULL for greedy defaults. Codec token
 * indices are written to `out_tokens`; `out_len` receives their count (or
 * the needed capacity on `CS_STATUS_BUFFER_TOO_SMALL`).
 *
 * # Safety
 * Every non-NULL pointer must be valid for the stated length; `out_len`
 * and `out_terminated` must be writable.
 */
enum CsStatus cs_engine_synthesize(const struct CsEngine *engine,
                                   const uint32_t *phones,
                                   size_t n_phones,
                                   const int16_t *prompt_pcm,
                                   size_t prompt_len,
                                   const char *const *adapter_names,
                                   size_t n_adapters,
                                   const struct CsDecodeParams *params,
                                   uint32_t *out_tokens,
                                   size_t cap,
                                   size_t *out_len,
                                   bool *out_terminated);

/**
 * # Safety
 * `out` must point to writable storage for one pointer.
 */
enum CsStatus cs_codec_new(uint32_t sample_rate,
                           size_t frame_len,
                           uint32_t codec_count,
                           struct CsCodec **out);

/**
 * # Safety
 * `codec` must be NULL or a handle from [`cs_codec_new`] not yet freed.
 */
void cs_codec_free(struct CsCodec *codec);

/**
 * Samples per frame, or 0 for a NULL handle.
 *
 * # Safety
 * `codec` must be NULL or a live handle.
 */
size_t cs_codec_frame_len(const struct CsCodec *codec);

/**
 * # Safety
 * `codec` must be a live handle; `out_pcm` must point to `cap` writable
 * samples.
 */
enum CsStatus cs_codec_token_to_frame(const struct CsCodec *codec,
                                      uint32_t token,
                                      int16_t *out_pcm,
                                      size_t cap);

/**
 * # Safety
 * `codec` must be a live handle; `pcm` must point to `len` samples and
 * `out_token` must be writable.
 */
enum CsStatus cs_codec_frame_to_token(const struct CsCodec *codec,
                                      const int16_t *pcm,
                                      size_t len,
                                      uint32_t *out_token);

/**
 * Edit-distance rate of `hypothesis` against a non-empty `reference`.
 *
 * # Safety
 * Arrays must hold the stated number of elements; `out_rate` must be
 * writable.
 */
enum CsStatus cs_per(const uint32_t *reference,
                     size_t n_reference,
                     const uint32_t *hypothesis,
                     size_t n_hypothesis,
                     double *out_rate);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CODECSERVE_H */
