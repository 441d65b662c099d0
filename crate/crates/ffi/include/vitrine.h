#ifndef VITRINE_H
#define VITRINE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VtrStatus {
  VTR_STATUS_OK = 0,
  VTR_STATUS_NULL_POINTER = 1,
  VTR_STATUS_INVALID_UTF8 = 2,
  VTR_STATUS_INVALID_ARGUMENT = 3,
  VTR_STATUS_NOT_FOUND = 4,
  VTR_STATUS_MODEL_NOT_LOADED = 5,
  VTR_STATUS_IO = 6,
  VTR_STATUS_AUDIT_FAILED = 7,
  VTR_STATUS_INTERNAL = 8,
} VtrStatus;

/**
 * Opaque service handle.
 */
typedef struct VtrService VtrService;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next vitrine call on the same thread; do not free.
 */
const char *vtr_last_error(void);

/**
 * Release a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void vtr_string_free(char *s);

/**
 * Library version as a static string.
 */
const char *vtr_version(void);

/**
 * Current time in Unix seconds.
 */
int64_t vtr_now(void);

/**
 * Log-likelihood ratio of a 2×2 contingency table.
 *
 * # Safety
 * `out` must be a valid pointer to a double.
 */
enum VtrStatus vtr_llr(uint64_t k11, uint64_t k12, uint64_t k21, uint64_t k22, double *out);

/**
 * Open a service from a JSON config file. On success `*out` owns the handle.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string; `out` must be valid.
 */
enum VtrStatus vtr_service_open(const char *config_path, int64_t now, struct VtrService **out);

/**
 * Close a service handle. NULL is ignored.
 *
 * # Safety
 * `svc` must come from [`vtr_service_open`] and not have been freed.
 */
void vtr_service_free(struct VtrService *svc);

/**
 * Ingest a JSON Lines batch. `*out_summary` receives a JSON summary.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum VtrStatus vtr_ingest_jsonl(const struct VtrService *svc,
                                const char *body,
                                bool lenient,
                                int64_t now,
                                char **out_summary);

/**
 * Retrain as of `as_of` and swap the serving snapshot.
 *
 * # Safety
 * Pointers must be valid. `out_summary` may be NULL.
 */
enum VtrStatus vtr_train(const struct VtrService *svc, int64_t as_of, char **out_summary);

/**
 * Serve a frame. `context_json` is an optional JSON object of string values.
 * `*out_json` receives the frame result including its disclosure.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum VtrStatus vtr_recommend(const struct VtrService *svc,
                             const char *frame_id,
                             const char *user_id,
                             const char *context_json,
                             int64_t now,
                             char **out_json);

/**
 * Static ranking-criteria sheet for a frame.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum VtrStatus vtr_criteria(const struct VtrService *svc, const char *frame_id, char **out_json);

/**
 * Set or clear the personalization opt-out; durable before returning.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum VtrStatus vtr_set_optout(const struct VtrService *svc,
                              const char *user_id,
                              bool opt_out,
                              int64_t now);

/**
 * Export a user's controls and events as JSON Lines.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum VtrStatus vtr_export_user(const struct VtrService *svc,
                               const char *user_id,
                               int64_t now,
                               char **out_jsonl);

/**
 * Delete a user's data (tombstone plus log rewrite). Idempotent.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum VtrStatus vtr_delete_user(const struct VtrService *svc, const char *user_id, int64_t now);

/**
 * Run the audit benchmark against the built-in engine. Any JSON argument may
 * be NULL for defaults (`rules_json` NULL = protective rules). The report is
 * written to `*out_report` either way; returns `AUDIT_FAILED` on a FAIL verdict.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum VtrStatus vtr_audit_run(const char *spec_json,
                             const char *thresholds_json,
                             const char *rules_json,
                             char **out_report);

/**
 * Validate a rules document. `*out_errors` receives a JSON array of error
 * messages (empty when valid); returns `INVALID_ARGUMENT` if any.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum VtrStatus vtr_rules_check(const char *rules_json, char **out_errors);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VITRINE_H */
