#ifndef DRO_PREF_H
#define DRO_PREF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum DroStatus {
  DRO_STATUS_OK = 0,
  // Any failure not covered below (internal contract violations).
  DRO_STATUS_ERROR = 1,
  // Malformed configuration or document.
  DRO_STATUS_CONFIG = 2,
  // Inputs were produced from a different environment.
  DRO_STATUS_DIGEST_MISMATCH = 3,
  // A solver failed or produced a non-finite value.
  DRO_STATUS_NUMERICAL = 4,
  DRO_STATUS_INVALID_ARGUMENT = 5,
  DRO_STATUS_IO = 6,
  // A panic was caught at the boundary; handles passed in are still valid.
  DRO_STATUS_PANIC = 7,
  DRO_STATUS_NULL_POINTER = 8,
} DroStatus;

typedef enum DroModelKind {
  DRO_MODEL_KIND_REWARD = 0,
  DRO_MODEL_KIND_POLICY = 1,
  DRO_MODEL_KIND_DPO = 2,
} DroModelKind;

typedef enum DroDivergence {
  DRO_DIVERGENCE_TV = 0,
  DRO_DIVERGENCE_CHI2 = 1,
} DroDivergence;

typedef enum DroSupport {
  DRO_SUPPORT_PROMPT = 0,
  DRO_SUPPORT_JOINT = 1,
} DroSupport;

typedef enum DroSense {
  // Adversarial weights for a loss.
  DRO_SENSE_MAX = 0,
  // Adversarial weights for a value.
  DRO_SENSE_MIN = 1,
} DroSense;

// Opaque dataset handle.
typedef struct DroDataset DroDataset;

// Opaque environment handle.
typedef struct DroEnv DroEnv;

// Opaque trained-parameter handle (parameters plus model metadata).
typedef struct DroParams DroParams;

typedef struct DroEnvShape {
  size_t num_prompts;
  size_t num_completions;
  size_t d_reward;
  size_t d_policy;
  double reward_radius;
  double policy_radius;
} DroEnvShape;

typedef struct DroEvalResult {
  double standard_loss;
  double robust_loss;
} DroEvalResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *dro_version(void);

// Message of the last failed call on this thread, or NULL after a
// successful call. Valid until the next call on the same thread.
const char *dro_last_error_message(void);

// Releases a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from a `char **` output of this library and not be freed twice.
void dro_string_free(char *s);

// Draws a random environment.
//
// # Safety
// `shape` must point to a valid shape; `out` must be writable.
enum DroStatus dro_env_generate(uint64_t seed,
                                const struct DroEnvShape *shape,
                                struct DroEnv **out);

// Parses an environment document.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum DroStatus dro_env_from_json(const char *json, struct DroEnv **out);

// Reads an environment file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum DroStatus dro_env_load(const char *path, struct DroEnv **out);

// Serializes an environment to JSON.
//
// # Safety
// `env` must be a live handle; `out` must be writable.
enum DroStatus dro_env_to_json(const struct DroEnv *env, char **out);

// Hex SHA-256 content digest of an environment.
//
// # Safety
// `env` must be a live handle; `out` must be writable.
enum DroStatus dro_env_digest(const struct DroEnv *env, char **out);

// # Safety
// `env` must be NULL or a handle not yet freed.
void dro_env_free(struct DroEnv *env);

// Samples `n` labelled comparisons from `env`.
//
// # Safety
// `env` must be a live handle; `out` must be writable.
enum DroStatus dro_dataset_sample(const struct DroEnv *env,
                                  size_t n,
                                  uint64_t seed,
                                  struct DroDataset **out);

// Parses a dataset document and checks it belongs to `env`.
//
// # Safety
// `env` must be a live handle, `json` a NUL-terminated string, `out` writable.
enum DroStatus dro_dataset_from_json(const struct DroEnv *env,
                                     const char *json,
                                     struct DroDataset **out);

// Number of comparisons in a dataset (0 for NULL).
//
// # Safety
// `data` must be NULL or a live handle.
size_t dro_dataset_len(const struct DroDataset *data);

// # Safety
// `data` must be NULL or a handle not yet freed.
void dro_dataset_free(struct DroDataset *data);

// Trains a robust reward model. `config_json` is a reward trainer section,
// e.g. `{"iterations": 1000, "batch_size": 64, "rho": 0.1}`. When
// `report_csv` is non-NULL it receives the per-iteration report.
//
// # Safety
// Handles must be live, `config_json` NUL-terminated, `out` writable and
// `report_csv` NULL or writable.
enum DroStatus dro_train_reward(const struct DroEnv *env,
                                const struct DroDataset *data,
                                const char *config_json,
                                struct DroParams **out,
                                char **report_csv);

// Trains a policy with robust DPO; `config_json` is a DPO trainer section.
//
// # Safety
// As [`dro_train_reward`].
enum DroStatus dro_train_dpo(const struct DroEnv *env,
                             const struct DroDataset *data,
                             const char *config_json,
                             struct DroParams **out,
                             char **report_csv);

// Trains a robust policy by natural policy gradient against the reward
// model `reward`; `config_json` is a policy trainer section.
//
// # Safety
// As [`dro_train_reward`]; `reward` must be a live reward-model handle.
enum DroStatus dro_train_policy(const struct DroEnv *env,
                                const struct DroDataset *data,
                                const struct DroParams *reward,
                                const char *config_json,
                                struct DroParams **out,
                                char **report_csv);

// Wraps raw parameters as a model for `env`. `beta` is required (> 0) for
// policy and DPO models and ignored for reward models.
//
// # Safety
// `env` must be live, `values` must hold `len` doubles, `out` writable.
enum DroStatus dro_params_new(const struct DroEnv *env,
                              enum DroModelKind kind,
                              const double *values,
                              size_t len,
                              double radius,
                              double beta,
                              struct DroParams **out);

// Number of parameters (0 for NULL).
//
// # Safety
// `params` must be NULL or a live handle.
size_t dro_params_dim(const struct DroParams *params);

// Model kind of a parameter handle.
//
// # Safety
// `params` must be a live handle; `out` writable.
enum DroStatus dro_params_kind(const struct DroParams *params, enum DroModelKind *out);

// Copies the parameters into `buf`, which must hold at least
// `dro_params_dim(params)` doubles.
//
// # Safety
// `params` must be live; `buf` must be writable for `len` doubles.
enum DroStatus dro_params_copy(const struct DroParams *params, double *buf, size_t len);

// Serializes a parameter handle as a model document.
//
// # Safety
// `params` must be live; `out` writable.
enum DroStatus dro_params_to_json(const struct DroParams *params, char **out);

// # Safety
// `params` must be NULL or a handle not yet freed.
void dro_params_free(struct DroParams *params);

// Standard and worst-case population loss of a model. Policy models need a
// reward model in `reward` (NULL otherwise) and are evaluated over prompt
// shifts with the default reward shift; `support` applies to reward and
// DPO models.
//
// # Safety
// `env` and `params` must be live, `reward` NULL or live, `out` writable.
enum DroStatus dro_eval(const struct DroEnv *env,
                        const struct DroParams *params,
                        const struct DroParams *reward,
                        double rho,
                        enum DroDivergence divergence_kind,
                        enum DroSupport support,
                        struct DroEvalResult *out);

// Worst-case distribution within radius `rho` of the reference `p` (uniform
// when `p` is NULL) for the values in `losses`. Writes `len` weights to
// `out_weights` and, when non-NULL, the reweighted objective to
// `out_objective`.
//
// # Safety
// `losses` (and `p` if non-NULL) must hold `len` doubles; `out_weights`
// must be writable for `len` doubles.
enum DroStatus dro_worst_case_weights(const double *losses,
                                      const double *p,
                                      size_t len,
                                      double rho,
                                      enum DroDivergence divergence_kind,
                                      enum DroSense sense,
                                      double *out_weights,
                                      double *out_objective);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRO_PREF_H */
