#ifndef LOWRANK_H
#define LOWRANK_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LrStatus {
  LR_STATUS_OK = 0,
  LR_STATUS_NULL_POINTER = 1,
  LR_STATUS_INVALID_ARGUMENT = 2,
  LR_STATUS_SHAPE = 3,
  LR_STATUS_NON_FINITE = 4,
  LR_STATUS_CONFIG = 5,
  LR_STATUS_IO = 6,
  LR_STATUS_FORMAT = 7,
  LR_STATUS_PANIC = 8,
} LrStatus;

typedef enum LrVariant {
  // Fixed blocks, mixing weight `1/(i+1)`.
  LR_VARIANT_SBPCA = 0,
  // Doubling blocks, mixing weight `1/2`.
  LR_VARIANT_SBPCAV = 1,
} LrVariant;

// A trained or preset network.
typedef struct LrNetwork LrNetwork;

// A rank-k gradient estimate with its update configuration.
typedef struct LrState LrState;

// Closed-form costs of one `m x n` dense layer for one batch.
typedef struct LrCostModel {
  uint64_t mbgd_flops;
  uint64_t sbpca_stream_flops;
  uint64_t sbpca_qr_flops;
  uint64_t sbpca_recompose_flops;
  uint64_t sbpca_flops;
  uint64_t mbgd_aux_floats;
  uint64_t mbgd_gradient_floats;
  uint64_t state_floats;
  uint64_t update_floats;
  uint64_t qr_workspace_floats;
  uint64_t sbpca_aux_floats;
  double flop_ratio;
  double flop_ratio_limit;
  double memory_ratio_streamed;
  double memory_ratio_expanded;
} LrCostModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Description of the most recent failure on this thread, or null. The
// pointer stays valid until the next failing call on the same thread.
const char *lr_last_error(void);

// Library version as a static NUL-terminated string.
const char *lr_version(void);

// Seeded initial state for an `m x n` layer. `block_size` is ignored for
// [`LrVariant::Sbpcav`].
//
// # Safety
// `out` must be a valid pointer to a handle slot.
enum LrStatus lr_state_new(size_t m,
                           size_t n,
                           size_t rank,
                           size_t block_size,
                           enum LrVariant kind,
                           uint64_t seed,
                           struct LrState **out);

// # Safety
// `state` must be null or a handle from this library, freed at most once.
void lr_state_free(struct LrState *state);

// # Safety
// `state` must be a live handle; output pointers may be null.
enum LrStatus lr_state_dims(const struct LrState *state, size_t *m, size_t *n, size_t *rank);

// Advances the state by one batch of `rows` samples: `x` is `rows x n`
// activations and `delta` is `rows x m` errors. SBPCA needs `rows` to be a
// multiple of the block size; SBPCAV needs `rows = 2^L - 1`.
//
// # Safety
// `state` must be a live handle and the arrays must hold `rows*n` and
// `rows*m` values.
enum LrStatus lr_state_update(struct LrState *state,
                              const double *x,
                              const double *delta,
                              size_t rows);

// Writes the `m x n` estimate `Δ̂ diag(σ) X̂ᵀ` to `out` (`len = m*n`).
//
// # Safety
// `state` must be a live handle and `out` must hold `len` values.
enum LrStatus lr_state_recompose(const struct LrState *state, double *out, size_t len);

// Copies σ (`len = k`), `X̂` (`n x k`) and `Δ̂` (`m x k`). Any output
// pointer may be null to skip it; non-null ones must match in length.
//
// # Safety
// `state` must be a live handle; each non-null buffer must hold the stated
// number of values.
enum LrStatus lr_state_factors(const struct LrState *state,
                               double *sigma,
                               size_t sigma_len,
                               double *x_hat,
                               size_t x_hat_len,
                               double *delta_hat,
                               size_t delta_hat_len);

// `‖G − Δ̂ diag(σ) X̂ᵀ‖_F` for an `m x n` matrix `G`.
//
// # Safety
// `state` must be a live handle, `grad` must hold `len` values and `out`
// must be valid.
enum LrStatus lr_state_tracking_error(const struct LrState *state,
                                      const double *grad,
                                      size_t len,
                                      double *out);

// # Safety
// `state` must be a live handle and `path` a NUL-terminated string.
enum LrStatus lr_state_save(const struct LrState *state, const char *file);

// Reads a state checkpoint; the update configuration is supplied anew.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid handle slot.
enum LrStatus lr_state_load(const char *file,
                            size_t block_size,
                            enum LrVariant kind,
                            uint64_t seed,
                            struct LrState **out);

// Builds a named architecture (`mlp-mnist`, `mini-conv`, `mlp:W0-…-WL`).
//
// # Safety
// `name` must be a NUL-terminated string and `out` a valid handle slot.
enum LrStatus lr_network_preset(const char *name,
                                bool dropout,
                                uint64_t seed,
                                struct LrNetwork **out);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid handle slot.
enum LrStatus lr_network_load(const char *file, struct LrNetwork **out);

// # Safety
// `net` must be a live handle and `path` a NUL-terminated string.
enum LrStatus lr_network_save(const struct LrNetwork *net, const char *file);

// # Safety
// `net` must be null or a handle from this library, freed at most once.
void lr_network_free(struct LrNetwork *net);

// Input width and number of classes.
//
// # Safety
// `net` must be a live handle; output pointers may be null.
enum LrStatus lr_network_dims(const struct LrNetwork *net, size_t *inputs, size_t *classes);

// Mean cross-entropy and accuracy on `rows` samples in eval mode.
//
// # Safety
// `net` must be a live handle, `inputs` must hold `rows * input width`
// values, `labels` `rows` values, and both outputs must be valid.
enum LrStatus lr_network_evaluate(const struct LrNetwork *net,
                                  const double *inputs,
                                  const uint32_t *labels,
                                  size_t rows,
                                  double *loss,
                                  double *accuracy);

// Fills `out` with the closed-form costs of an `m x n` layer at batch
// size `batch`, block size `block` and rank `rank`.
//
// # Safety
// `out` must be valid.
enum LrStatus lr_cost_model(size_t m,
                            size_t n,
                            size_t batch,
                            size_t block,
                            size_t rank,
                            struct LrCostModel *out);

// Executes `lowrank run <config>` in-process and returns its exit code
// (0 success, 1 configuration error, 2 runtime failure).
//
// # Safety
// `config_path` must be a NUL-terminated string.
int lr_run_config(const char *config_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LOWRANK_H */
