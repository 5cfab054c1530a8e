#ifndef QNERF_H
#define QNERF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum QnerfStatus {
  QNERF_STATUS_OK = 0,
  QNERF_STATUS_NULL_ARGUMENT = 1,
  /**
   * Invalid configuration or argument outside an operation's domain.
   */
  QNERF_STATUS_INVALID = 2,
  QNERF_STATUS_NUMERIC = 3,
  QNERF_STATUS_IO = 4,
  QNERF_STATUS_FORMAT = 5,
  /**
   * Buffer too small; the required size was written where requested.
   */
  QNERF_STATUS_BUFFER_TOO_SMALL = 6,
  QNERF_STATUS_PANIC = 7,
} QnerfStatus;

typedef enum QnerfEventKind {
  QNERF_EVENT_KIND_GUIDED = 0,
  QNERF_EVENT_KIND_FREE = 1,
  QNERF_EVENT_KIND_STORE = 2,
  QNERF_EVENT_KIND_EXTRACT = 3,
  QNERF_EVENT_KIND_TRAIN = 4,
  QNERF_EVENT_KIND_REWIND = 5,
  QNERF_EVENT_KIND_FINISH = 6,
} QnerfEventKind;

/**
 * Resolved run configuration plus the overrides applied so far.
 */
typedef struct QnerfConfig QnerfConfig;

typedef struct QnerfField QnerfField;

typedef struct QnerfRun QnerfRun;

typedef struct QnerfSchedule QnerfSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *qnerf_version(void);

/**
 * Message of the last failed call on this thread (empty if none). The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *qnerf_last_error(void);

/**
 * Parses a JSON configuration document. `json` may be null for `{}`.
 *
 * # Safety
 * `json` must be null or a NUL-terminated string; `out` must be writable.
 */
enum QnerfStatus qnerf_config_parse(const char *json, struct QnerfConfig **out);

/**
 * Applies a dotted-key override and revalidates. On failure the
 * configuration is left unchanged.
 *
 * # Safety
 * `config` must come from [`qnerf_config_parse`]; strings NUL-terminated.
 */
enum QnerfStatus qnerf_config_set(struct QnerfConfig *config, const char *key, const char *value);

/**
 * Copies the resolved configuration as JSON into `buf` (NUL-terminated).
 * `needed` receives the size including the terminator.
 *
 * # Safety
 * `buf` must hold `len` bytes (or be null with `len` 0); `needed` may be null.
 */
enum QnerfStatus qnerf_config_json(const struct QnerfConfig *config,
                                   char *buf,
                                   size_t len,
                                   size_t *needed);

/**
 * # Safety
 * `config` must be null or come from [`qnerf_config_parse`], freed once.
 */
void qnerf_config_free(struct QnerfConfig *config);

/**
 * Builds the interval schedule for `steps` denoising steps and half-interval `tau`.
 *
 * # Safety
 * `out` must be writable.
 */
enum QnerfStatus qnerf_schedule_build(size_t steps, size_t tau, struct QnerfSchedule **out);

/**
 * Number of events; 0 for a null handle.
 *
 * # Safety
 * `schedule` must be null or a live handle.
 */
size_t qnerf_schedule_len(const struct QnerfSchedule *schedule);

/**
 * Reads event `index` as a kind and its timestep (or training number).
 *
 * # Safety
 * `schedule` must be a live handle; `kind` and `arg` writable.
 */
enum QnerfStatus qnerf_schedule_event(const struct QnerfSchedule *schedule,
                                      size_t index,
                                      enum QnerfEventKind *kind,
                                      size_t *arg);

/**
 * # Safety
 * `schedule` must be null or a live handle, freed once.
 */
void qnerf_schedule_free(struct QnerfSchedule *schedule);

/**
 * Loads a field checkpoint.
 *
 * # Safety
 * `path` NUL-terminated; `out` writable.
 */
enum QnerfStatus qnerf_field_load(const char *path, struct QnerfField **out);

/**
 * # Safety
 * `field` a live handle; `path` NUL-terminated.
 */
enum QnerfStatus qnerf_field_save(const struct QnerfField *field, const char *path);

/**
 * # Safety
 * `field` must be null or a live handle.
 */
size_t qnerf_field_layer_count(const struct QnerfField *field);

/**
 * Channels of layer `layer`, or 0 when out of range.
 *
 * # Safety
 * `field` must be null or a live handle.
 */
size_t qnerf_field_channels(const struct QnerfField *field, size_t layer);

/**
 * Density and the features of `layer` at point `xyz`. `features` must
 * hold at least the layer's channel count.
 *
 * # Safety
 * `xyz` points to 3 doubles; `density` writable; `features` holds `capacity` doubles.
 */
enum QnerfStatus qnerf_field_eval(const struct QnerfField *field,
                                  const double *xyz,
                                  size_t layer,
                                  double *density,
                                  double *features,
                                  size_t capacity);

/**
 * # Safety
 * `field` must be null or a live handle, freed once.
 */
void qnerf_field_free(struct QnerfField *field);

/**
 * Runs the pipeline in `mode` ("full", "unguided_baseline",
 * "direct_injection", "non_progressive"; null uses the configured mode).
 * When `out_dir` is non-null all artifacts are written there.
 *
 * # Safety
 * `config` live; strings null or NUL-terminated; `out` writable.
 */
enum QnerfStatus qnerf_run(const struct QnerfConfig *config,
                           const char *mode,
                           const char *out_dir,
                           struct QnerfRun **out);

/**
 * Final-row cross-view inconsistency averaged over layers.
 *
 * # Safety
 * `run` live; `value` writable.
 */
enum QnerfStatus qnerf_run_consistency(const struct QnerfRun *run, double *value);

/**
 * Mean distance of the final latents from their per-view targets.
 *
 * # Safety
 * `run` live; `value` writable.
 */
enum QnerfStatus qnerf_run_target_deviation(const struct QnerfRun *run, double *value);

/**
 * Copies the run's `metrics.csv` text into `buf`.
 *
 * # Safety
 * As [`qnerf_config_json`].
 */
enum QnerfStatus qnerf_run_metrics_csv(const struct QnerfRun *run,
                                       char *buf,
                                       size_t len,
                                       size_t *needed);

/**
 * # Safety
 * `run` must be null or a live handle, freed once.
 */
void qnerf_run_free(struct QnerfRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QNERF_H */
