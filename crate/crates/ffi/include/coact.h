#ifndef COACT_H
#define COACT_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CoactStatus {
  COACT_STATUS_OK = 0,
  COACT_STATUS_NULL_POINTER = -1,
  COACT_STATUS_INVALID_UTF8 = -2,
  COACT_STATUS_PARSE = -3,
  COACT_STATUS_VALIDATION = -4,
  COACT_STATUS_MALFORMED_TRACE = -5,
  COACT_STATUS_PANIC = -6,
} CoactStatus;

typedef enum CoactStrategy {
  /**
   * Whatever the scenario configures.
   */
  COACT_STRATEGY_DEFAULT = 0,
  COACT_STRATEGY_FLATTEN = 1,
  COACT_STRATEGY_NESTED = 2,
} CoactStrategy;

typedef struct CoactAudit CoactAudit;

typedef struct CoactRun CoactRun;

typedef struct CoactScenario CoactScenario;

/**
 * Overrides for one run. `use_seed` selects whether `seed` replaces the
 * scenario seed, `strategy` holds a `CoactStrategy` value and a `horizon`
 * of zero keeps the scenario horizon.
 */
typedef struct CoactRunOptions {
  bool use_seed;
  uint64_t seed;
  uint32_t strategy;
  uint64_t horizon;
} CoactRunOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *coact_version(void);

/**
 * Message of the last failure on this thread, or an empty string. Valid
 * until the next failing call on the same thread.
 */
const char *coact_last_error(void);

/**
 * Parses and validates scenario text.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CoactStatus coact_scenario_parse(const char *text, struct CoactScenario **out);

/**
 * # Safety
 * `sc` must come from [`coact_scenario_parse`] and not be freed already.
 */
void coact_scenario_free(struct CoactScenario *sc);

/**
 * Options that keep the scenario configuration.
 */
struct CoactRunOptions coact_run_options_default(void);

/**
 * Simulates a scenario and audits the trace. `opts` may be null.
 *
 * # Safety
 * `sc` must be a live scenario handle, `opts` null or valid, `out` valid.
 */
enum CoactStatus coact_run(const struct CoactScenario *sc,
                           const struct CoactRunOptions *opts,
                           struct CoactRun **out);

/**
 * Full trace file text, dump included, or null for a null handle.
 *
 * # Safety
 * `r` must be null or a live run handle.
 */
const char *coact_run_trace(const struct CoactRun *r);

/**
 * Final stable state in the dump format.
 *
 * # Safety
 * `r` must be null or a live run handle.
 */
const char *coact_run_dump(const struct CoactRun *r);

/**
 * # Safety
 * `r` must be null or a live run handle.
 */
const char *coact_run_report(const struct CoactRun *r);

/**
 * 1 if every audit passed, 0 if not, `COACT_STATUS_NULL_POINTER` for null.
 *
 * # Safety
 * `r` must be null or a live run handle.
 */
int32_t coact_run_passed(const struct CoactRun *r);

/**
 * # Safety
 * `r` must come from [`coact_run`] and not be freed already.
 */
void coact_run_free(struct CoactRun *r);

/**
 * Audits trace file text as written by a run.
 *
 * # Safety
 * `trace` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CoactStatus coact_audit_trace(const char *trace, struct CoactAudit **out);

/**
 * # Safety
 * `a` must be null or a live audit handle.
 */
const char *coact_audit_report(const struct CoactAudit *a);

/**
 * 1 if every audit passed, 0 if not, `COACT_STATUS_NULL_POINTER` for null.
 *
 * # Safety
 * `a` must be null or a live audit handle.
 */
int32_t coact_audit_passed(const struct CoactAudit *a);

/**
 * # Safety
 * `a` must come from [`coact_audit_trace`] and not be freed already.
 */
void coact_audit_free(struct CoactAudit *a);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COACT_H */
