#ifndef FEDPER_H
#define FEDPER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum FedperStatus {
  FEDPER_STATUS_OK = 0,
  FEDPER_STATUS_NULL_POINTER = 1,
  FEDPER_STATUS_INVALID_UTF8 = 2,
  // Bad argument or invalid request.
  FEDPER_STATUS_USAGE = 3,
  // Configuration rejected.
  FEDPER_STATUS_CONFIG = 4,
  // Malformed dataset file.
  FEDPER_STATUS_PARSE = 5,
  FEDPER_STATUS_PROTOCOL = 6,
  FEDPER_STATUS_IO = 7,
  FEDPER_STATUS_OUT_OF_RANGE = 8,
  // A panic was caught at the boundary.
  FEDPER_STATUS_INTERNAL = 9,
} FedperStatus;

// Experiment configuration handle.
typedef struct FedperConfig FedperConfig;

// Per-round, per-client metrics from a finished run.
typedef struct FedperHistory FedperHistory;

// Library version as a static NUL-terminated string.
const char *fedper_version(void);

// Message for the last failed call on this thread, or NULL. The pointer
// stays valid until the next call into the library on this thread.
const char *fedper_last_error_message(void);

// # Safety
// `s` must be NULL or a string returned by this library.
void fedper_string_free(char *s);

// Parses a JSON experiment configuration.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum FedperStatus fedper_config_from_json(const char *json, struct FedperConfig **out);

// Reads a JSON configuration file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum FedperStatus fedper_config_from_file(const char *path, struct FedperConfig **out);

// Overrides one dotted key, e.g. `("partition.k", "2")`. On failure the
// configuration is left unchanged.
//
// # Safety
// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
enum FedperStatus fedper_config_set(struct FedperConfig *cfg, const char *key, const char *value);

// Serializes the configuration; free the result with `fedper_string_free`.
//
// # Safety
// `cfg` must be a live handle; `out` must be writable.
enum FedperStatus fedper_config_to_json(const struct FedperConfig *cfg, char **out);

// # Safety
// `cfg` must be NULL or a handle not yet freed.
void fedper_config_free(struct FedperConfig *cfg);

// Client → sample-index manifest as JSON, without training.
//
// # Safety
// `cfg` must be a live handle; `out` must be writable.
enum FedperStatus fedper_partition_manifest_json(const struct FedperConfig *cfg, char **out);

// Trains the configured federation. `threads` of 0 or 1 runs serially;
// results do not depend on it.
//
// # Safety
// `cfg` must be a live handle; `out` must be writable.
enum FedperStatus fedper_run(const struct FedperConfig *cfg,
                             size_t threads,
                             struct FedperHistory **out);

// Number of recorded rounds, 0 for a NULL handle.
//
// # Safety
// `h` must be NULL or a live handle.
size_t fedper_history_rounds(const struct FedperHistory *h);

// Number of clients per round, 0 for a NULL or empty history.
//
// # Safety
// `h` must be NULL or a live handle.
size_t fedper_history_num_clients(const struct FedperHistory *h);

// Test accuracy and training loss of `client` after round index `round`
// (0-based). Either output pointer may be NULL.
//
// # Safety
// `h` must be a live handle; non-NULL outputs must be writable.
enum FedperStatus fedper_history_metric(const struct FedperHistory *h,
                                        size_t round,
                                        size_t client,
                                        double *accuracy,
                                        double *loss);

// Mean and population standard deviation of final-round test accuracy
// across clients. Either output pointer may be NULL.
//
// # Safety
// `h` must be a live handle; non-NULL outputs must be writable.
enum FedperStatus fedper_history_final_stats(const struct FedperHistory *h,
                                             double *mean,
                                             double *std);

// Full history as JSON; free the result with `fedper_string_free`.
//
// # Safety
// `h` must be a live handle; `out` must be writable.
enum FedperStatus fedper_history_to_json(const struct FedperHistory *h, char **out);

// # Safety
// `h` must be NULL or a handle not yet freed.
void fedper_history_free(struct FedperHistory *h);

// Weighted mean of `num_clients` parameter vectors of length `len`, written
// to `out`. `gammas` must be positive and sum to 1.
//
// # Safety
// `updates` must point to `num_clients` pointers to `len` doubles each,
// `gammas` to `num_clients` doubles and `out` to `len` writable doubles.
enum FedperStatus fedper_aggregate_flat(const double *const *updates,
                                        const double *gammas,
                                        size_t num_clients,
                                        size_t len,
                                        double *out);

#endif  /* FEDPER_H */
