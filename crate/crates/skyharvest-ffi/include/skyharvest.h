#ifndef SKYHARVEST_H
#define SKYHARVEST_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
enum ShStatus
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  ShStatus_Ok = 0,
  /**
   * A required pointer argument was null.
   */
  ShStatus_NullPointer = -1,
  /**
   * An argument was out of range (agent index, buffer size, action).
   */
  ShStatus_InvalidArgument = -2,
  /**
   * The config or map failed validation.
   */
  ShStatus_InvalidConfig = -3,
  /**
   * The episode is over or has not been reset.
   */
  ShStatus_BadState = -4,
  /**
   * Internal failure; see the error message.
   */
  ShStatus_Internal = -5,
};
#ifndef __cplusplus
typedef int32_t ShStatus;
#endif // __cplusplus

/**
 * An opaque simulator handle.
 */
typedef struct ShEnv ShEnv;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *sh_last_error_message(void);

/**
 * Library version as a static C string.
 */
const char *sh_version(void);

/**
 * Build an environment from an experiment config file (JSON, same
 * format as the CLI). Returns null on failure; see
 * [`sh_last_error_message`].
 *
 * # Safety
 * `config_path` must be a valid NUL-terminated UTF-8 string.
 */
struct ShEnv *sh_env_new(const char *config_path, uint64_t seed);

/**
 * Destroy a handle. Null is ignored.
 *
 * # Safety
 * `handle` must come from [`sh_env_new`] and not be used afterwards.
 */
void sh_env_free(struct ShEnv *handle);

/**
 * Number of UAV agents.
 *
 * # Safety
 * `handle` must be a live handle from [`sh_env_new`].
 */
int32_t sh_env_num_agents(const struct ShEnv *handle);

/**
 * Number of ground devices.
 *
 * # Safety
 * `handle` must be a live handle from [`sh_env_new`].
 */
int32_t sh_env_num_devices(const struct ShEnv *handle);

/**
 * Length of one agent's observation vector.
 *
 * # Safety
 * `handle` must be a live handle from [`sh_env_new`].
 */
int32_t sh_env_obs_len(const struct ShEnv *handle);

/**
 * Length of the global state vector.
 *
 * # Safety
 * `handle` must be a live handle from [`sh_env_new`].
 */
int32_t sh_env_state_len(const struct ShEnv *handle);

/**
 * Number of actions in the action space (always 6: hover, north, west,
 * south, east, no-op).
 */
int32_t sh_num_actions(void);

/**
 * Start a fresh episode.
 *
 * # Safety
 * `handle` must be a live handle from [`sh_env_new`].
 */
ShStatus sh_env_reset(struct ShEnv *handle);

/**
 * Feasibility flags for one agent, in action order, written to `out6`
 * (six bytes, 0/1).
 *
 * # Safety
 * `handle` must be live; `out6` must point to six writable bytes.
 */
ShStatus sh_env_feasible_mask(const struct ShEnv *handle, int32_t agent, uint8_t *out6);

/**
 * Copy one agent's current observation into `buf` (length must equal
 * [`sh_env_obs_len`]).
 *
 * # Safety
 * `handle` must be live; `buf` must point to `len` writable doubles.
 */
ShStatus sh_env_observation(const struct ShEnv *handle, int32_t agent, double *buf, uintptr_t len);

/**
 * Copy the centralized-training state into `buf` (length must equal
 * [`sh_env_state_len`]).
 *
 * # Safety
 * `handle` must be live; `buf` must point to `len` writable doubles.
 */
ShStatus sh_env_global_state(const struct ShEnv *handle, double *buf, uintptr_t len);

/**
 * Advance one time slot. `actions` holds one action index per agent
 * (see [`sh_num_actions`]); each must be feasible for its agent.
 * `reward_out` and `done_out` may be null when not needed.
 *
 * # Safety
 * `handle` must be live; `actions` must point to `n_actions` ints.
 */
ShStatus sh_env_step(struct ShEnv *handle,
                     const int32_t *actions,
                     uintptr_t n_actions,
                     double *reward_out,
                     int32_t *done_out);

/**
 * Fraction of the initial device data collected so far this episode.
 *
 * # Safety
 * `handle` must be a live handle from [`sh_env_new`].
 */
double sh_env_collection_ratio(const struct ShEnv *handle);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SKYHARVEST_H */
