#ifndef AGENTGOV_H
#define AGENTGOV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AgMode {
  AG_MODE_OBSERVE = 0,
  AG_MODE_ENFORCE = 1,
} AgMode;

typedef enum AgStatus {
  AG_STATUS_OK = 0,
  AG_STATUS_NULL_POINTER = 1,
  AG_STATUS_INVALID_UTF8 = 2,
  AG_STATUS_POLICY_ERROR = 3,
  AG_STATUS_PARSE_ERROR = 4,
  AG_STATUS_INVALID_ARGUMENT = 5,
  AG_STATUS_WRONG_STATE = 6,
  AG_STATUS_PANIC = 7,
} AgStatus;

/**
 * Opaque engine handle.
 */
typedef struct AgEngine AgEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty when none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *ag_last_error_message(void);

/**
 * Library version, static storage.
 */
const char *ag_version(void);

/**
 * Creates an engine. `policy_toml` may be null for the bundled default
 * policy; `mode` is an [`AgMode`] value.
 *
 * # Safety
 * `policy_toml` is null or a valid nul-terminated string; `out` is a valid
 * pointer.
 */
enum AgStatus ag_engine_new(const char *policy_toml, int32_t mode, struct AgEngine **out);

/**
 * Pushes one JSONL event line (no trace header).
 *
 * # Safety
 * `engine` comes from [`ag_engine_new`]; `line` is a valid nul-terminated
 * string.
 */
enum AgStatus ag_engine_push_line(struct AgEngine *engine, const char *line);

/**
 * Drains buffered events and fires outstanding deadlines. Further pushes
 * fail with `AG_STATUS_WRONG_STATE`.
 *
 * # Safety
 * `engine` comes from [`ag_engine_new`].
 */
enum AgStatus ag_engine_finish(struct AgEngine *engine);

/**
 * The report as JSON. Release with [`ag_string_free`].
 *
 * # Safety
 * `engine` comes from [`ag_engine_new`]; `out` is a valid pointer.
 */
enum AgStatus ag_engine_report_json(const struct AgEngine *engine, char **out);

/**
 * Number of detections in the finished report.
 *
 * # Safety
 * `engine` comes from [`ag_engine_new`]; `out` is a valid pointer.
 */
enum AgStatus ag_engine_detection_count(const struct AgEngine *engine, uint64_t *out);

/**
 * # Safety
 * `engine` is null or comes from [`ag_engine_new`] and is not used again.
 */
void ag_engine_free(struct AgEngine *engine);

/**
 * # Safety
 * `s` is null or a string returned by this library, not freed before.
 */
void ag_string_free(char *s);

/**
 * ARI of a 3x4 score sheet in row-major order (autonomy, adaptability,
 * continuity). Writes the index and the tier (1..=4).
 *
 * # Safety
 * `scores` points at 12 bytes; `ari` and `tier` are valid pointers.
 */
enum AgStatus ag_compute_ari(const uint8_t *scores, double *ari, uint8_t *tier);

/**
 * Base-2 Jensen-Shannon divergence of two distributions of length `n`.
 *
 * # Safety
 * `p` and `q` point at `n` doubles; `out` is a valid pointer.
 */
enum AgStatus ag_js_divergence(const double *p, const double *q, size_t n, double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* AGENTGOV_H */
