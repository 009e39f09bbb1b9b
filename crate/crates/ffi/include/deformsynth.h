#ifndef DEFORMSYNTH_H
#define DEFORMSYNTH_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Values are stable.
 */
typedef enum DsStatus {
  DS_STATUS_OK = 0,
  DS_STATUS_INVALID_ARGUMENT = 1,
  DS_STATUS_SAMPLING_EXHAUSTED = 2,
  DS_STATUS_EMPTY_PROJECTION = 3,
  DS_STATUS_PLACEMENT_IMPOSSIBLE = 4,
  DS_STATUS_EMPTY_MASK = 5,
  DS_STATUS_UNDEFINED_CLASS = 6,
  DS_STATUS_EMPTY_EVALUATION = 7,
  DS_STATUS_UNKNOWN_CONDITION = 8,
  DS_STATUS_UNKNOWN_DIFFICULTY = 9,
  DS_STATUS_DETECTOR_UNAVAILABLE = 10,
  DS_STATUS_MODEL_CORRUPT = 11,
  DS_STATUS_ADAPTER_PROTOCOL = 12,
  DS_STATUS_ASSET_MISSING = 13,
  DS_STATUS_PARSE_ERROR = 14,
  DS_STATUS_IO_ERROR = 15,
  DS_STATUS_IMAGE_ERROR = 16,
  DS_STATUS_JSON_ERROR = 17,
  DS_STATUS_NULL_POINTER = 18,
  /**
   * A Rust panic was caught at the boundary.
   */
  DS_STATUS_INTERNAL = 19,
} DsStatus;

/**
 * Textures, backgrounds and occluders plus the render settings they were
 * prepared for.
 */
typedef struct DsAssets DsAssets;

/**
 * One rendered image with its ground-truth box, as 8-bit RGB.
 */
typedef struct DsSample DsSample;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next call into this library on the same thread.
 */
const char *ds_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` is null or a pointer previously returned through a `char **` output
 * of this library and not yet freed.
 */
void ds_string_free(char *s);

/**
 * Library version as a static string.
 */
const char *ds_version(void);

/**
 * Draws `n` parameter records for a condition tag (`fb`, `mb`, ...) and a
 * difficulty (`easy`, `medium`, `hard`), written as a JSON array.
 *
 * # Safety
 * `condition` and `difficulty` are NUL-terminated strings; `out_json` is
 * valid for a pointer write.
 */
enum DsStatus ds_generate_parameters(const char *condition,
                                     const char *difficulty,
                                     size_t n,
                                     uint64_t seed,
                                     char **out_json);

/**
 * Plateau test over `len` scores. Sets `*out_stop` to 1 and
 * `*out_best_index` (relative to the final window) when the run should
 * stop, else `*out_stop` to 0.
 *
 * # Safety
 * `scores` points to `len` doubles (or is null when `len` is 0); the
 * output pointers are valid for writes.
 */
enum DsStatus ds_stopping_check(const double *scores,
                                size_t len,
                                size_t recent_window,
                                size_t prior_window,
                                double tau,
                                int32_t *out_stop,
                                size_t *out_best_index);

/**
 * Scores detections against ground truth (both JSON arrays) and writes
 * the result `{per_class_ap, map, precision, recall}` as JSON.
 *
 * # Safety
 * String arguments are NUL-terminated; `out_json` is valid for a write.
 */
enum DsStatus ds_evaluate(const char *detections_json,
                          const char *ground_truth_json,
                          double iou_threshold,
                          double confidence_threshold,
                          char **out_json);

/**
 * Loads PNG assets from folders; `occluders_dir` may be null.
 *
 * # Safety
 * Directory arguments are NUL-terminated (or null where allowed); `out`
 * is valid for a pointer write.
 */
enum DsStatus ds_assets_load(const char *textures_dir,
                             const char *backgrounds_dir,
                             const char *occluders_dir,
                             size_t width,
                             size_t height,
                             struct DsAssets **out);

/**
 * Builds seeded procedural assets in memory.
 *
 * # Safety
 * `out` is valid for a pointer write.
 */
enum DsStatus ds_assets_procedural(size_t objects,
                                   size_t backgrounds,
                                   size_t occluders,
                                   size_t width,
                                   size_t height,
                                   uint64_t seed,
                                   struct DsAssets **out);

/**
 * Number of object textures; 0 for a null handle.
 *
 * # Safety
 * `assets` is null or a live handle.
 */
size_t ds_assets_object_count(const struct DsAssets *assets);

/**
 * # Safety
 * `assets` is null or a live handle, not used afterwards.
 */
void ds_assets_free(struct DsAssets *assets);

/**
 * Renders `object_id` under the parameter record `theta_json` (one element
 * of [`ds_generate_parameters`] output).
 *
 * # Safety
 * `assets` is a live handle, `theta_json` is NUL-terminated and `out` is
 * valid for a pointer write.
 */
enum DsStatus ds_render_sample(const struct DsAssets *assets,
                               const char *theta_json,
                               uint32_t object_id,
                               uint64_t seed,
                               struct DsSample **out);

/**
 * # Safety
 * `s` is null or a live sample.
 */
size_t ds_sample_width(const struct DsSample *s);

/**
 * # Safety
 * `s` is null or a live sample.
 */
size_t ds_sample_height(const struct DsSample *s);

/**
 * Row-major RGB bytes, `width * height * 3` long, owned by the sample.
 *
 * # Safety
 * `s` is null or a live sample.
 */
const uint8_t *ds_sample_pixels(const struct DsSample *s);

/**
 * Writes the box as `[x0, y0, x1, y1]` into `out4`.
 *
 * # Safety
 * `s` is a live sample and `out4` points to four writable doubles.
 */
enum DsStatus ds_sample_bbox(const struct DsSample *s, double *out4);

/**
 * Render audit of the sample (every parameter actually used) as JSON.
 *
 * # Safety
 * `s` is a live sample and `out_json` is valid for a pointer write.
 */
enum DsStatus ds_sample_audit(const struct DsSample *s, char **out_json);

/**
 * # Safety
 * `s` is null or a live sample, not used afterwards.
 */
void ds_sample_free(struct DsSample *s);

/**
 * Runs active learning from a run-configuration file and writes a JSON
 * summary `{final_model, increments, run_log}`. Set `resume` to nonzero
 * to continue an interrupted run.
 *
 * # Safety
 * `config_path` is NUL-terminated; `out_json` is valid for a pointer write.
 */
enum DsStatus ds_active_learn(const char *config_path, int32_t resume, char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEFORMSYNTH_H */
