#ifndef MARIO_H
#define MARIO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define MARIO_MODE_MARIO 0

#define MARIO_MODE_FIXED_TXT 1

#define MARIO_MODE_FIXED_VIS 2

#define MARIO_MODE_FIXED_MM 3

/**
 * Evaluate in the mode the models were trained in.
 */
#define MARIO_MODE_TRAINED -1

#define MARIO_SPLIT_TRAIN 0

#define MARIO_SPLIT_VAL 1

#define MARIO_SPLIT_TEST 2

/**
 * Result of every fallible call.
 */
typedef enum MarioStatus {
  MARIO_STATUS_OK = 0,
  MARIO_STATUS_NULL_ARGUMENT = 1,
  MARIO_STATUS_INVALID_STRING = 2,
  MARIO_STATUS_INVALID_ARGUMENT = 3,
  MARIO_STATUS_CONTRACT = 4,
  MARIO_STATUS_DOMAIN = 5,
  MARIO_STATUS_NUMERICAL = 6,
  MARIO_STATUS_CONFIG = 7,
  MARIO_STATUS_DATA = 8,
  MARIO_STATUS_CHECKPOINT = 9,
  MARIO_STATUS_IO = 10,
  MARIO_STATUS_JSON = 11,
  MARIO_STATUS_PANIC = 12,
} MarioStatus;

typedef struct MarioConfig MarioConfig;

typedef struct MarioGraph MarioGraph;

typedef struct MarioModels MarioModels;

typedef struct MarioStage1 MarioStage1;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library on the same thread.
 */
const char *mario_last_error(void);

/**
 * Library version as a static string.
 */
const char *mario_version(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void mario_string_free(char *s);

/**
 * Generates a synthetic graph from a JSON spec; null or `"{}"` uses the
 * defaults.
 *
 * # Safety
 * `spec_json` must be null or a valid C string; `out` must be writable.
 */
enum MarioStatus mario_graph_generate(const char *spec_json, struct MarioGraph **out);

/**
 * # Safety
 * `dir` must be a valid C string; `out` must be writable.
 */
enum MarioStatus mario_graph_load(const char *dir, struct MarioGraph **out);

/**
 * # Safety
 * `graph` must be a live handle; `dir` a valid C string.
 */
enum MarioStatus mario_graph_save(const struct MarioGraph *graph, const char *dir);

/**
 * Node count, or 0 for a null handle.
 *
 * # Safety
 * `graph` must be null or a live handle.
 */
size_t mario_graph_num_nodes(const struct MarioGraph *graph);

/**
 * # Safety
 * `graph` must be null or a handle not yet freed.
 */
void mario_graph_free(struct MarioGraph *graph);

/**
 * Parses a run configuration; missing fields take their defaults and
 * `MARIO_SEED` overrides the seed. The result is validated.
 *
 * # Safety
 * `json` must be null or a valid C string; `out` must be writable.
 */
enum MarioStatus mario_config_new(const char *json, struct MarioConfig **out);

/**
 * # Safety
 * `config` must be null or a handle not yet freed.
 */
void mario_config_free(struct MarioConfig *config);

/**
 * Trains the encoder on `graph` for the configured task.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum MarioStatus mario_stage1_train(const struct MarioGraph *graph,
                                    const struct MarioConfig *config,
                                    struct MarioStage1 **out);

/**
 * # Safety
 * `stage1` must be a live handle; `dir` a valid C string.
 */
enum MarioStatus mario_stage1_save(const struct MarioStage1 *stage1, const char *dir);

/**
 * # Safety
 * `dir` must be a valid C string; `out` must be writable.
 */
enum MarioStatus mario_stage1_load(const char *dir, struct MarioStage1 **out);

/**
 * # Safety
 * `stage1` must be null or a handle not yet freed.
 */
void mario_stage1_free(struct MarioStage1 *stage1);

/**
 * Trains adapters, projector and (in `mario` mode) the router with the
 * encoder frozen.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum MarioStatus mario_stage2_train(const struct MarioGraph *graph,
                                    const struct MarioStage1 *stage1,
                                    const struct MarioConfig *config,
                                    struct MarioModels **out);

/**
 * # Safety
 * `models` must be a live handle; `dir` a valid C string.
 */
enum MarioStatus mario_models_save(const struct MarioModels *models, const char *dir);

/**
 * # Safety
 * `dir` must be a valid C string; `out` must be writable.
 */
enum MarioStatus mario_models_load(const char *dir, struct MarioModels **out);

/**
 * # Safety
 * `models` must be null or a handle not yet freed.
 */
void mario_models_free(struct MarioModels *models);

/**
 * Scores one split of `graph` (a `MARIO_SPLIT_*` value) in `mode` (a
 * `MARIO_MODE_*` value). Writes the accuracy and, when `report_json` is not
 * null, the full report as a JSON string owned by the caller.
 *
 * # Safety
 * Handles must be live; `accuracy` must be writable; `report_json` null or
 * writable.
 */
enum MarioStatus mario_evaluate(const struct MarioGraph *graph,
                                const struct MarioStage1 *stage1,
                                const struct MarioModels *models,
                                int32_t split,
                                int32_t mode,
                                double *accuracy,
                                char **report_json);

/**
 * Zero-shot test accuracy on an unseen graph; no parameters change.
 *
 * # Safety
 * As for [`mario_evaluate`].
 */
enum MarioStatus mario_transfer(const struct MarioStage1 *stage1,
                                const struct MarioModels *models,
                                const struct MarioGraph *target,
                                double *accuracy,
                                char **report_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MARIO_H */
