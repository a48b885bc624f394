#ifndef FALCON_H
#define FALCON_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. The first four match the CLI exit codes.
typedef enum FalconStatus {
  FALCON_STATUS_OK = 0,
  // Invalid configuration, key, or variant name.
  FALCON_STATUS_CONFIG = 2,
  // Bad or inconsistent input data.
  FALCON_STATUS_DATA = 3,
  // Training produced non-finite values.
  FALCON_STATUS_DIVERGENCE = 4,
  FALCON_STATUS_NULL_ARGUMENT = 10,
  FALCON_STATUS_INVALID_UTF8 = 11,
  // The output buffer is shorter than the required length.
  FALCON_STATUS_BUFFER_TOO_SMALL = 12,
  FALCON_STATUS_PANIC = 13,
} FalconStatus;

// An experiment configuration.
typedef struct FalconConfig FalconConfig;

// Scores from one trained variant.
typedef struct FalconRun FalconRun;

// A generated population with its epidemic outcome and label split.
typedef struct FalconWorld FalconWorld;

// Ranking and threshold metrics over a set of scored users.
typedef struct FalconMetrics {
  double auc;
  double f1;
  double accuracy;
  double bep;
  double dep;
  double r_m;
} FalconMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *falcon_version(void);

// Message for the last failed call on this thread, or an empty string.
// Valid until the next call on the same thread.
const char *falcon_last_error(void);

// Creates the default desk-scale configuration.
//
// # Safety
// `out` must be a valid pointer to writable storage.
enum FalconStatus falcon_config_new(struct FalconConfig **out);

// Parses a TOML document; missing keys take their defaults.
//
// # Safety
// `toml` must be a NUL-terminated string and `out` writable.
enum FalconStatus falcon_config_from_toml(const char *toml, struct FalconConfig **out);

// Sets one dotted key, such as `model.epochs`, from its TOML literal text.
// The configuration is unchanged on failure.
//
// # Safety
// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
enum FalconStatus falcon_config_set(struct FalconConfig *cfg, const char *key, const char *value);

// Serializes the configuration as TOML. Release with [`falcon_string_free`].
//
// # Safety
// `cfg` must be a live handle and `out` writable.
enum FalconStatus falcon_config_to_toml(const struct FalconConfig *cfg, char **out);

// # Safety
// `s` must come from this library, or be null.
void falcon_string_free(char *s);

// # Safety
// `cfg` must come from this library, or be null.
void falcon_config_free(struct FalconConfig *cfg);

// Generates mobility, runs the epidemic and draws the label split.
//
// # Safety
// `cfg` must be a live handle and `out` writable.
enum FalconStatus falcon_world_build(const struct FalconConfig *cfg, struct FalconWorld **out);

// Number of users, or 0 for a null handle.
//
// # Safety
// `world` must be a live handle or null.
size_t falcon_world_n_users(const struct FalconWorld *world);

// # Safety
// `world` must come from this library, or be null.
void falcon_world_free(struct FalconWorld *world);

// Trains the named variant (`falcon`, `wo-macro`, `hgnn-central`, `dct`, ...).
//
// # Safety
// `cfg` and `world` must be live handles, `variant` NUL-terminated, `out` writable.
enum FalconStatus falcon_train(const struct FalconConfig *cfg,
                               const struct FalconWorld *world,
                               const char *variant,
                               struct FalconRun **out);

// Copies per-user infection scores into `buf`. `*len` always receives the
// number of users; a null or short `buf` yields `BufferTooSmall`.
//
// # Safety
// `run` must be a live handle, `len` writable, and `buf` valid for `capacity` doubles.
enum FalconStatus falcon_run_scores(const struct FalconRun *run,
                                    double *buf,
                                    size_t capacity,
                                    size_t *len);

// Metrics over the held-out users of `world`.
//
// # Safety
// All handles must be live and `out` writable.
enum FalconStatus falcon_run_metrics(const struct FalconConfig *cfg,
                                     const struct FalconWorld *world,
                                     const struct FalconRun *run,
                                     struct FalconMetrics *out);

// # Safety
// `run` must come from this library, or be null.
void falcon_run_free(struct FalconRun *run);

// Metrics for arbitrary scores; `labels[i]` is nonzero for positives.
// `r0` sets the reproduction number used by the DEP metric.
//
// # Safety
// `scores` and `labels` must be valid for `n` elements; `out` writable.
enum FalconStatus falcon_metrics_from_scores(const double *scores,
                                             const uint8_t *labels,
                                             size_t n,
                                             double r0,
                                             struct FalconMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FALCON_H */
