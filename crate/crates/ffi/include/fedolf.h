#ifndef FEDOLF_H
#define FEDOLF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FedolfRegime {
  FEDOLF_REGIME_SMALL_STEP = 0,
  FEDOLF_REGIME_LARGE_STEP = 1,
  FEDOLF_REGIME_INVALID = 2,
} FedolfRegime;

typedef enum FedolfStatus {
  FEDOLF_STATUS_OK = 0,
  FEDOLF_STATUS_NULL_POINTER = 1,
  FEDOLF_STATUS_INVALID_UTF8 = 2,
  FEDOLF_STATUS_CONFIG = 3,
  FEDOLF_STATUS_RUNTIME = 4,
  FEDOLF_STATUS_OUT_OF_RANGE = 5,
  FEDOLF_STATUS_PANIC = 6,
} FedolfStatus;

/**
 * A parsed, validated experiment configuration.
 */
typedef struct FedolfConfig FedolfConfig;

/**
 * A finished federated run.
 */
typedef struct FedolfRun FedolfRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next call into this library from the same thread.
 */
const char *fedolf_last_error(void);

/**
 * Library version, a static string.
 */
const char *fedolf_version(void);

/**
 * Parses a TOML configuration. On success `*out` owns a new handle.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FedolfStatus fedolf_config_from_toml(const char *toml, struct FedolfConfig **out);

/**
 * Replaces the experiment seed.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum FedolfStatus fedolf_config_set_seed(struct FedolfConfig *cfg, uint64_t seed);

/**
 * # Safety
 * `cfg` must be null or a handle from `fedolf_config_from_toml`, freed once.
 */
void fedolf_config_free(struct FedolfConfig *cfg);

/**
 * Runs the configured experiment. Relative data paths resolve against
 * `base_dir`, which may be null for the working directory.
 *
 * # Safety
 * `cfg` must be a live handle, `base_dir` null or a NUL-terminated string,
 * `out` a valid pointer.
 */
enum FedolfStatus fedolf_run(const struct FedolfConfig *cfg,
                             const char *base_dir,
                             struct FedolfRun **out);

/**
 * Number of completed rounds; 0 for a null handle.
 *
 * # Safety
 * `run` must be null or a live handle.
 */
size_t fedolf_run_rounds(const struct FedolfRun *run);

/**
 * Held-out accuracy of the global model after `round`.
 *
 * # Safety
 * `run` must be a live handle and `out` a valid pointer.
 */
enum FedolfStatus fedolf_run_accuracy(const struct FedolfRun *run, size_t round, double *out);

/**
 * Writes the same files as the `run` command into `dir` (created if needed).
 *
 * # Safety
 * `run` must be a live handle and `dir` a NUL-terminated string.
 */
enum FedolfStatus fedolf_run_write_outputs(const struct FedolfRun *run, const char *dir);

/**
 * # Safety
 * `run` must be null or a handle from `fedolf_run`, freed once.
 */
void fedolf_run_free(struct FedolfRun *run);

/**
 * Theoretical training memory of the configured model with `l_k` frozen
 * layers: ordered freezing, or the worst random placement when
 * `worst_case` is nonzero.
 *
 * # Safety
 * `cfg` must be a live handle and `out` a valid pointer.
 */
enum FedolfStatus fedolf_memory_bytes(const struct FedolfConfig *cfg,
                                      size_t l_k,
                                      size_t batch,
                                      int32_t worst_case,
                                      uint64_t *out);

/**
 * Error floor for step size `eta` given smoothness `l`, client variance
 * `gamma` and freezing divergence `d`. `*epsilon` is NaN when no bound
 * applies.
 *
 * # Safety
 * `epsilon` and `regime` must be valid pointers.
 */
enum FedolfStatus fedolf_epsilon(double eta,
                                 double l,
                                 double gamma,
                                 double d,
                                 double *epsilon,
                                 enum FedolfRegime *regime);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDOLF_H */
