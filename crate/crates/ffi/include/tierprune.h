#ifndef TIERPRUNE_H
#define TIERPRUNE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum TpStatus {
  TP_STATUS_OK = 0,
  TP_STATUS_NULL_ARGUMENT = 1,
  TP_STATUS_INVALID_CONFIG = 2,
  TP_STATUS_INVALID_ARGUMENT = 3,
  TP_STATUS_RUNTIME = 4,
  TP_STATUS_BUFFER_TOO_SMALL = 5,
  TP_STATUS_PANIC = 6,
} TpStatus;

typedef enum TpPlacement {
  TP_PLACEMENT_OVERLAPPED = 0,
  TP_PLACEMENT_SERIALIZED = 1,
} TpPlacement;

/**
 * Opaque engine handle.
 */
typedef struct TpEngine TpEngine;

/**
 * Counters of an engine, as of the last completed call.
 */
typedef struct TpEngineStats {
  uint64_t fast_bytes;
  uint64_t prefill_fast_bytes;
  uint64_t decode_steps;
  uint64_t swap_decisions;
  uint64_t swaps_triggered;
  uint64_t decode_loads;
  uint64_t decode_load_bytes;
  uint64_t decode_offloads;
  uint64_t decode_offload_bytes;
  uint64_t decode_evicts;
  uint64_t revivals;
} TpEngineStats;

/**
 * Inputs of the prompt-KV memory formula. `block_size` 0 means unrounded budgets.
 */
typedef struct TpMemSpec {
  size_t n_layers;
  size_t kv_heads;
  size_t head_dim;
  size_t kv_bytes_per_elem;
  size_t prompt_len;
  size_t block_size;
} TpMemSpec;

/**
 * One pruning stage: from `layer` on, keep `token_budget` prompt tokens.
 */
typedef struct TpStage {
  size_t layer;
  size_t token_budget;
} TpStage;

/**
 * Sizes and flags of a swap decision; the sets go to caller buffers.
 */
typedef struct TpSwapPlan {
  bool triggered;
  double overlap;
  size_t n_active;
  size_t n_load;
  size_t n_offload;
  size_t n_evict;
} TpSwapPlan;

typedef struct TpLayerCost {
  uint64_t t_qkv;
  uint64_t t_attn;
  uint64_t t_ffn;
} TpLayerCost;

typedef struct TpTimeline {
  uint64_t makespan;
  uint64_t stall_total;
  uint64_t compute_sum;
} TpTimeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into this library from the same thread.
 */
const char *tp_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tp_version(void);

/**
 * Creates an engine from `key = value` lines using the CLI flag names
 * (`layers`, `heads`, `schedule`, `gamma`, ...). NULL or empty text keeps
 * every default.
 *
 * # Safety
 * `config` must be NULL or a NUL-terminated string; `out` must be writable.
 */
enum TpStatus tp_engine_new(const char *config, struct TpEngine **out);

/**
 * Releases an engine. NULL is ignored.
 *
 * # Safety
 * `engine` must be NULL or a handle from [`tp_engine_new`] not yet freed.
 */
void tp_engine_free(struct TpEngine *engine);

/**
 * Vocabulary size, i.e. the logits length every step produces. 0 for NULL.
 *
 * # Safety
 * `engine` must be NULL or a live handle.
 */
size_t tp_engine_vocab_size(const struct TpEngine *engine);

/**
 * Runs prefill over `tokens` and writes the next-token logits.
 *
 * # Safety
 * `engine` must be a live handle, `tokens` must hold `n_tokens` ids and
 * `logits` must hold `logits_cap` floats.
 */
enum TpStatus tp_engine_prefill(struct TpEngine *engine,
                                const uint32_t *tokens,
                                size_t n_tokens,
                                float *logits,
                                size_t logits_cap);

/**
 * Appends one token and writes the logits for the following position.
 *
 * # Safety
 * `engine` must be a live handle and `logits` must hold `logits_cap` floats.
 */
enum TpStatus tp_engine_decode(struct TpEngine *engine,
                               uint32_t token,
                               float *logits,
                               size_t logits_cap);

/**
 * # Safety
 * `engine` must be a live handle and `out` writable.
 */
enum TpStatus tp_engine_stats(const struct TpEngine *engine, struct TpEngineStats *out);

/**
 * Copies the NDJSON trace into `buf` with a trailing NUL. `needed` receives
 * the full size including the NUL, also when the buffer is too small.
 *
 * # Safety
 * `engine` must be a live handle, `buf` must hold `cap` bytes (or be NULL
 * with `cap` 0) and `needed` must be NULL or writable.
 */
enum TpStatus tp_engine_trace(const struct TpEngine *engine, char *buf, size_t cap, size_t *needed);

/**
 * Checks fast-tier contents against the engine's active sets.
 *
 * # Safety
 * `engine` must be a live handle.
 */
enum TpStatus tp_engine_audit(const struct TpEngine *engine);

/**
 * Prompt K/V bytes kept under `stages` (ascending layers, descending budgets).
 *
 * # Safety
 * `spec` and `out` must be valid; `stages` must hold `n_stages` entries.
 */
enum TpStatus tp_prompt_kv_bytes(const struct TpMemSpec *spec,
                                 const struct TpStage *stages,
                                 size_t n_stages,
                                 uint64_t *out);

/**
 * Applies the swap rule. Each output buffer must hold `cap` ids; the sizes
 * in `out` are filled even when a buffer is too small. Any output buffer
 * may be NULL to query sizes only.
 *
 * # Safety
 * Input arrays must hold their stated lengths; output buffers must be NULL
 * or hold `cap` ids; `out` must be writable.
 */
enum TpStatus tp_plan_swap(const uint32_t *candidate,
                           size_t n_candidate,
                           const uint32_t *prev_active,
                           size_t n_prev,
                           const uint32_t *b_memory,
                           size_t n_memory,
                           double gamma,
                           struct TpSwapPlan *out,
                           uint32_t *active_buf,
                           uint32_t *load_buf,
                           uint32_t *offload_buf,
                           uint32_t *evict_buf,
                           size_t cap);

/**
 * Simulates one decode pass. `fetch_blocks[l]` blocks are fetched after the
 * attention of layer `l`.
 *
 * # Safety
 * `layers` and `fetch_blocks` must hold `n_layers` entries; `out` writable.
 */
enum TpStatus tp_simulate_timeline(const struct TpLayerCost *layers,
                                   const uint64_t *fetch_blocks,
                                   size_t n_layers,
                                   uint64_t t_fetch_blk,
                                   enum TpPlacement placement,
                                   struct TpTimeline *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TIERPRUNE_H */
