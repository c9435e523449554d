#ifndef ICL_DST_H
#define ICL_DST_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum IclStatus {
  ICL_STATUS_OK = 0,
  ICL_STATUS_NULL_POINTER = 1,
  ICL_STATUS_INVALID_UTF8 = 2,
  ICL_STATUS_INVALID_ARGUMENT = 3,
  ICL_STATUS_IO = 4,
  ICL_STATUS_PARSE = 5,
  ICL_STATUS_FAILED = 6,
  ICL_STATUS_PANIC = 7,
} IclStatus;

/**
 * Loaded embedding store with a retriever over all of its vectors.
 */
typedef struct IclStore IclStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call on this thread; do not free.
 */
const char *icl_last_error(void);

/**
 * Library version; static, do not free.
 */
const char *icl_version(void);

/**
 * # Safety
 * `s` is NULL or a string returned through an `out` parameter of this library.
 */
void icl_string_free(char *s);

/**
 * Repairs and parses model output. `*out` receives
 * `{"status", "value", "repaired_text", "applied_fixes"}`.
 *
 * # Safety
 * `text` is a nul-terminated string; `out` is writable.
 */
enum IclStatus icl_repair_parse(const char *text, char **out);

/**
 * Writes the `dim`-dimensional hashing embedding of `text` into `out`.
 *
 * # Safety
 * `out` has room for `dim` floats.
 */
enum IclStatus icl_mock_embed(const char *text, size_t dim, float *out);

/**
 * Renders a history given as a JSON array of `{"speaker", "text"}`.
 * `mode` is `user_only` or `user_agent`.
 *
 * # Safety
 * Pointer arguments are nul-terminated strings; `out` is writable.
 */
enum IclStatus icl_render_history(const char *history_json,
                                  const char *mode,
                                  bool speaker_tags,
                                  char **out);

/**
 * Micro precision/recall. Both arguments are JSON objects from sample id
 * to state (`{domain: {key: value}}`) with the same ids. `*out` receives
 * `{"precision", "recall", "correct", "predicted_total", "gold_total"}`.
 *
 * # Safety
 * Pointer arguments are nul-terminated strings; `out` is writable.
 */
enum IclStatus icl_metrics(const char *predicted_json, const char *gold_json, char **out);

/**
 * Loads an emb-jsonl store.
 *
 * # Safety
 * `path` is a nul-terminated string; `out` is writable.
 */
enum IclStatus icl_store_load(const char *path, struct IclStore **out);

/**
 * # Safety
 * `store` is NULL or a handle from `icl_store_load()` not yet freed.
 */
void icl_store_free(struct IclStore *store);

/**
 * Number of vectors, 0 for NULL.
 *
 * # Safety
 * `store` is NULL or a live handle.
 */
size_t icl_store_len(const struct IclStore *store);

/**
 * Vector dimension, 0 for NULL.
 *
 * # Safety
 * `store` is NULL or a live handle.
 */
size_t icl_store_dim(const struct IclStore *store);

/**
 * Top-`k` neighbours of `query` (normalized here). `*out` receives
 * `[{"sample_id", "score"}, ...]`, most similar first.
 *
 * # Safety
 * `store` is a live handle; `query` points to `dim` floats; `out` is writable.
 */
enum IclStatus icl_store_retrieve(const struct IclStore *store,
                                  const float *query,
                                  size_t dim,
                                  size_t k,
                                  char **out);

/**
 * Runs (or resumes) the experiment described by a TOML config file.
 * `*out` receives the run report.
 *
 * # Safety
 * `config_path` is a nul-terminated string; `out` is writable.
 */
enum IclStatus icl_run_experiment(const char *config_path, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ICL_DST_H */
