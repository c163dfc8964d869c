#ifndef INCREMENTALITY_H
#define INCREMENTALITY_H

#pragma once

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IncrStatus {
  INCR_STATUS_OK = 0,
  INCR_STATUS_NULL_POINTER = 1,
  INCR_STATUS_INVALID_UTF8 = 2,
  /**
   * Malformed JSON input.
   */
  INCR_STATUS_PARSE = 3,
  INCR_STATUS_CONFIG = 4,
  INCR_STATUS_DOMAIN = 5,
  /**
   * Event log failed validation.
   */
  INCR_STATUS_VALIDATION = 6,
  /**
   * Estimation or numeric failure.
   */
  INCR_STATUS_NUMERIC = 7,
  INCR_STATUS_IO = 8,
  INCR_STATUS_PANIC = 9,
} IncrStatus;

/**
 * A bid generator over one model snapshot.
 */
typedef struct IncrBidder IncrBidder;

/**
 * Features with fitted coefficients.
 */
typedef struct IncrModel IncrModel;

typedef struct IncrBidDecision {
  double ghost_bid;
  double bid;
  bool submitted;
  /**
   * The valuation was negative and was clamped to zero.
   */
  bool negative_value;
  /**
   * Bootstrap draw used, or -1.
   */
  int64_t draw_index;
} IncrBidDecision;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the
 * next call on this thread.
 */
const char *incr_last_error(void);

/**
 * Library version as a static string.
 */
const char *incr_version(void);

/**
 * Builds a model from a JSON array of feature keys and a coefficient set
 * as written by `incr fit`.
 *
 * # Safety
 * Strings must be NUL-terminated; `out` must be writable.
 */
enum IncrStatus incr_model_new(const char *features_json,
                               const char *coefficients_json,
                               struct IncrModel **out);

/**
 * # Safety
 * `model` must come from [`incr_model_new`] and not be used afterwards.
 */
void incr_model_free(struct IncrModel *model);

/**
 * Ex-ante expected incremental conversions of one bid context.
 *
 * # Safety
 * `model` must be live; `context_json` NUL-terminated; `out` writable.
 */
enum IncrStatus incr_model_incremental_value(const struct IncrModel *model,
                                             const char *context_json,
                                             double *out);

/**
 * Attribution report over an NDJSON event log. `slices_json` may be null
 * for the single `all` slice; a NaN `as_of` means the latest window end.
 * The returned JSON string is freed with [`incr_string_free`].
 *
 * # Safety
 * `model` must be live; strings NUL-terminated; `out` writable.
 */
enum IncrStatus incr_model_report(const struct IncrModel *model,
                                  const char *events_ndjson,
                                  const char *slices_json,
                                  double as_of,
                                  char **out);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void incr_string_free(char *s);

/**
 * A bidder over a snapshot of `model` with the policy given as JSON. The
 * bidder does not borrow the model.
 *
 * # Safety
 * `model` must be live; `policy_json` NUL-terminated; `out` writable.
 */
enum IncrStatus incr_bidder_new(const struct IncrModel *model,
                                const char *policy_json,
                                struct IncrBidder **out);

/**
 * # Safety
 * `bidder` must come from [`incr_bidder_new`] and not be used afterwards.
 */
void incr_bidder_free(struct IncrBidder *bidder);

/**
 * Bid for one context. A bidder is not thread-safe; use one per thread.
 *
 * # Safety
 * `bidder` must be live; `context_json` NUL-terminated; `out` writable.
 */
enum IncrStatus incr_bidder_compute_bid(struct IncrBidder *bidder,
                                        const char *context_json,
                                        struct IncrBidDecision *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INCREMENTALITY_H */
