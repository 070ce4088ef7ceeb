#ifndef AROUSAL_H
#define AROUSAL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes shared by every entry point.
 */
typedef enum ArousalStatus {
  AROUSAL_STATUS_OK = 0,
  AROUSAL_STATUS_NULL_POINTER = 1,
  AROUSAL_STATUS_INVALID_ARGUMENT = 2,
  AROUSAL_STATUS_IO = 3,
  AROUSAL_STATUS_FORMAT = 4,
  AROUSAL_STATUS_SHAPE = 5,
  AROUSAL_STATUS_DEPENDENCY = 6,
  AROUSAL_STATUS_NUMERICAL = 7,
  AROUSAL_STATUS_INTERNAL = 8,
} ArousalStatus;

/*
 Detections returned by [`arousal_detect`].
 */
typedef struct ArousalEvents ArousalEvents;

/*
 A trained detector loaded from a run directory.
 */
typedef struct ArousalModel ArousalModel;

typedef struct ArousalEvent {
  double start_s;
  double duration_s;
  double probability;
} ArousalEvent;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the most recent failure on this thread, or null. The
 pointer stays valid until the next failing call on the same thread.
 */
const char *arousal_last_error(void);

/*
 Library name and version as a static NUL-terminated string.
 */
const char *arousal_version(void);

/*
 Loads the run directory written by `arousal train`.

 # Safety
 `run_dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ArousalStatus arousal_model_load(const char *run_dir, struct ArousalModel **out);

/*
 # Safety
 `model` must come from [`arousal_model_load`] or be null.
 */
void arousal_model_free(struct ArousalModel *model);

/*
 Number of input channels the model expects.

 # Safety
 `model` must be a live handle or null (returns 0).
 */
size_t arousal_model_channels(const struct ArousalModel *model);

/*
 Detection threshold selected on the run's evaluation split.

 # Safety
 `model` must be a live handle or null (returns NaN).
 */
double arousal_model_threshold(const struct ArousalModel *model);

/*
 Name of input channel `index`, or null when out of range.

 # Safety
 `model` must be a live handle or null. The string lives as long as the handle.
 */
const char *arousal_model_channel_name(const struct ArousalModel *model, size_t index);

/*
 Detects arousals in a raw recording.

 `samples` holds `n_channels` rows of `n_samples` values each (row-major),
 in the order reported by [`arousal_model_channel_name`], sampled at
 `sample_rate_hz`. The signal is preprocessed exactly as in training.
 A negative `threshold` uses the model's own.

 # Safety
 `samples` must point to `n_channels * n_samples` doubles; `out` must be valid.
 */
enum ArousalStatus arousal_detect(struct ArousalModel *model,
                                  const double *samples,
                                  size_t n_channels,
                                  size_t n_samples,
                                  double sample_rate_hz,
                                  double threshold,
                                  struct ArousalEvents **out);

/*
 # Safety
 `events` must be a live handle or null (returns 0).
 */
size_t arousal_events_len(const struct ArousalEvents *events);

/*
 # Safety
 `events` must be a live handle and `out` valid.
 */
enum ArousalStatus arousal_events_get(const struct ArousalEvents *events,
                                      size_t index,
                                      struct ArousalEvent *out);

/*
 # Safety
 `events` must come from [`arousal_detect`] or be null.
 */
void arousal_events_free(struct ArousalEvents *events);

/*
 Intersection over union of two intervals given as start and duration.
 */
double arousal_iou(double a_start, double a_duration, double b_start, double b_duration);

double arousal_huber(double u);

/*
 `-alpha (1 - p)^gamma ln p`
 */
double arousal_focal(double p, double alpha, double gamma);

/*
 Two-sided Mann-Whitney U test.

 # Safety
 `a` and `b` must point to `n_a` and `n_b` doubles; outputs must be valid.
 */
enum ArousalStatus arousal_mann_whitney(const double *a,
                                        size_t n_a,
                                        const double *b,
                                        size_t n_b,
                                        double *u,
                                        double *p);

/*
 Kruskal-Wallis H test over `n_groups` groups stored back to back in
 `values`, with sizes in `group_sizes`.

 # Safety
 `group_sizes` must hold `n_groups` entries and `values` their sum.
 */
enum ArousalStatus arousal_kruskal_wallis(const double *values,
                                          const size_t *group_sizes,
                                          size_t n_groups,
                                          double *h,
                                          double *p);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AROUSAL_H */
