#ifndef ACTS_H
#define ACTS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes shared by every entry point.
 */
typedef enum ActsStatus {
  ACTS_STATUS_OK = 0,
  ACTS_STATUS_NULL_ARGUMENT = 1,
  ACTS_STATUS_INVALID_UTF8 = 2,
  ACTS_STATUS_IO = 3,
  ACTS_STATUS_FORMAT = 4,
  ACTS_STATUS_DATA = 5,
  ACTS_STATUS_CONFIG = 6,
  ACTS_STATUS_SHAPE = 7,
  ACTS_STATUS_INDEX = 8,
  ACTS_STATUS_USAGE = 9,
  ACTS_STATUS_UNDEFINED_METRIC = 10,
  ACTS_STATUS_DIVERGENCE = 11,
  ACTS_STATUS_SERIALIZATION = 12,
  ACTS_STATUS_BUFFER_TOO_SMALL = 13,
  ACTS_STATUS_PANIC = 14,
} ActsStatus;

/*
 Daily incidence for a set of regions on a shared calendar.
 */
typedef struct ActsDataset ActsDataset;

/*
 Trained models, one per week offset.
 */
typedef struct ActsModel ActsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread, or null after a
 success. Valid until the next call on the same thread.
 */
const char *acts_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *acts_version(void);

/*
 Loads a long (`region,date,value`) or wide cumulative CSV. `task` is
 `"cases"`, `"hosp"` or `"deaths"`.

 # Safety
 `path` and `task` must be NUL-terminated strings; `out` must be writable.
 */
enum ActsStatus acts_dataset_load(const char *path, const char *task, struct ActsDataset **out);

/*
 Builds a dataset from a row-major `n_regions x n_days` matrix of daily
 values. `start_date` is `YYYY-MM-DD`.

 # Safety
 `names` must hold `n_regions` strings and `values` `n_regions * n_days`
 doubles.
 */
enum ActsStatus acts_dataset_from_values(const char *task,
                                         const char *start_date,
                                         const char *const *names,
                                         size_t n_regions,
                                         const double *values,
                                         size_t n_days,
                                         struct ActsDataset **out);

/*
 # Safety
 `ds` must be a live handle; `n_regions` and `n_days` must be writable.
 */
enum ActsStatus acts_dataset_shape(const struct ActsDataset *ds, size_t *n_regions, size_t *n_days);

/*
 Keeps only the first `last_day` days (1-based, inclusive).

 # Safety
 `ds` must be a live handle; `out` must be writable.
 */
enum ActsStatus acts_dataset_truncate(const struct ActsDataset *ds,
                                      size_t last_day,
                                      struct ActsDataset **out);

/*
 # Safety
 `ds` must come from this library and not be used afterwards. Null is
 ignored.
 */
void acts_dataset_free(struct ActsDataset *ds);

/*
 Trains one model per week offset `1..=weeks` on all of `ds`.
 `config_toml` holds training settings (`hidden`, `lr`, `iters`, ...) or
 is null for defaults.

 # Safety
 `ds` must be a live handle; `config_toml` null or NUL-terminated; `out`
 writable.
 */
enum ActsStatus acts_train(const struct ActsDataset *ds,
                           const char *config_toml,
                           size_t weeks,
                           struct ActsModel **out);

/*
 # Safety
 `path` must be NUL-terminated; `out` writable.
 */
enum ActsStatus acts_model_load(const char *path, struct ActsModel **out);

/*
 Writes the checkpoint atomically.

 # Safety
 `model` must be a live handle; `path` NUL-terminated.
 */
enum ActsStatus acts_model_save(const struct ActsModel *model, const char *path);

/*
 Forecast for one region and week offset, issued after the last day of
 `history`. Writes 7 daily values or 1 weekly total into `values` and
 the count into `written`; `capacity` is the buffer length.

 # Safety
 Handles must be live; `values` must hold `capacity` doubles; `written`
 writable.
 */
enum ActsStatus acts_forecast(const struct ActsModel *model,
                              const struct ActsDataset *history,
                              size_t region,
                              size_t week_offset,
                              double *values,
                              size_t capacity,
                              size_t *written);

/*
 # Safety
 `model` must come from this library and not be used afterwards. Null is
 ignored.
 */
void acts_model_free(struct ActsModel *model);

/*
 `sum|f - x| / sum|x|` over `n` pairs.

 # Safety
 `forecasts` and `truths` must hold `n` doubles; `out` writable.
 */
enum ActsStatus acts_wape(const double *forecasts, const double *truths, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ACTS_H */
