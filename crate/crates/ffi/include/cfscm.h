#ifndef CFSCM_H
#define CFSCM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Model kinds reported by [`cfscm_model_kind`].
typedef enum CfscmModelKind {
  CFSCM_MODEL_KIND_EXOGENOUS = 0,
  CFSCM_MODEL_KIND_MEDIATOR = 1,
  CFSCM_MODEL_KIND_VQ_GLM = 2,
} CfscmModelKind;

// Result of every fallible call. Codes 2 to 4 match the command-line exit codes.
typedef enum CfscmStatus {
  CFSCM_STATUS_OK = 0,
  // A required pointer argument was null.
  CFSCM_STATUS_NULL_ARGUMENT = 1,
  // Invalid configuration, intervention text or model variant.
  CFSCM_STATUS_CONFIG = 2,
  // Missing files, malformed data, unknown names or mismatched shapes.
  CFSCM_STATUS_DATA = 3,
  // Singular systems, non-finite values or divergence.
  CFSCM_STATUS_NUMERIC = 4,
  // An internal panic was caught at the boundary.
  CFSCM_STATUS_INTERNAL = 5,
} CfscmStatus;

// Images, attributes and recorded noise of a synthetic dataset.
typedef struct CfscmDataset CfscmDataset;

// Closed-form GLM coefficients `B` (`m × k`).
typedef struct CfscmGlm CfscmGlm;

// A trained model directory loaded into memory.
typedef struct CfscmModel CfscmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *cfscm_version(void);

// Copies the last error message of this thread into `buf` (truncated,
// always NUL-terminated when `len > 0`). Returns the full message length.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t cfscm_last_error(char *buf, size_t len);

// Loads a model directory written by `cfscm train` or `cfscm finetune`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CfscmStatus cfscm_model_load(const char *path, struct CfscmModel **out);

// # Safety
// `model` must be null or a handle from [`cfscm_model_load`] not yet freed.
void cfscm_model_free(struct CfscmModel *model);

// # Safety
// `model` must be a live handle; `out` must be writable.
enum CfscmStatus cfscm_model_kind(const struct CfscmModel *model, enum CfscmModelKind *out);

// Counterfactual image of one observation under the intervention text
// `do_text` (`name=value[,name=value]`, empty for none). `parents_cf`, when
// not null, receives the counterfactual `(y, t, i)`.
//
// # Safety
// `image` and `image_cf` point to 256 doubles, `parents` to 3 and
// `parents_cf` to 3 or null; `do_text` is NUL-terminated.
enum CfscmStatus cfscm_model_counterfactual(const struct CfscmModel *model,
                                            const double *image,
                                            const double *parents,
                                            const char *do_text,
                                            double pi,
                                            uint64_t seed,
                                            double *image_cf,
                                            double *parents_cf);

// Direct, indirect and total effects of a mediator model, each 256
// doubles. `telescoping_error`, when not null, receives the identity residual.
//
// # Safety
// Image buffers hold 256 doubles, `parents` 3; `do_text` is NUL-terminated.
enum CfscmStatus cfscm_model_effects(const struct CfscmModel *model,
                                     const double *image,
                                     const double *parents,
                                     const char *do_text,
                                     double pi,
                                     uint64_t seed,
                                     double *de,
                                     double *ie,
                                     double *te,
                                     double *telescoping_error);

// Generates `n` synthetic samples from the ground-truth process.
//
// # Safety
// `out` must be writable.
enum CfscmStatus cfscm_dataset_generate(uint64_t seed, size_t n, struct CfscmDataset **out);

// Loads a dataset directory written by `cfscm synth`.
//
// # Safety
// `path` must be NUL-terminated; `out` must be writable.
enum CfscmStatus cfscm_dataset_load(const char *path, struct CfscmDataset **out);

// # Safety
// `data` must be null or a live dataset handle.
void cfscm_dataset_free(struct CfscmDataset *data);

// Number of samples; 0 for a null handle.
//
// # Safety
// `data` must be null or a live dataset handle.
size_t cfscm_dataset_len(const struct CfscmDataset *data);

// Copies sample `index` into `image` (256 doubles) and `parents` (3 doubles).
//
// # Safety
// `image` must hold 256 doubles and `parents` 3, or be null to skip.
enum CfscmStatus cfscm_dataset_sample(const struct CfscmDataset *data,
                                      size_t index,
                                      double *image,
                                      double *parents);

// Fits `B` for latents `z` (`n × k`) on design `p` (`n × m`), both
// row-major, with ridge jitter `jitter ≥ 0`.
//
// # Safety
// `z` holds `n·k` doubles, `p` holds `n·m`; `out` must be writable.
enum CfscmStatus cfscm_glm_fit(const double *z,
                               const double *p,
                               size_t n,
                               size_t k,
                               size_t m,
                               double jitter,
                               struct CfscmGlm **out);

// # Safety
// `glm` must be null or a live handle from [`cfscm_glm_fit`].
void cfscm_glm_free(struct CfscmGlm *glm);

// Writes the dimensions of `B` to `rows` and `cols`.
//
// # Safety
// `glm` must be a live handle; `rows` and `cols` must be writable.
enum CfscmStatus cfscm_glm_shape(const struct CfscmGlm *glm, size_t *rows, size_t *cols);

// Copies `B` row-major into `out`, which holds `len` doubles.
//
// # Safety
// `out` must be valid for `len` doubles.
enum CfscmStatus cfscm_glm_coefficients(const struct CfscmGlm *glm, double *out, size_t len);

// `U = Z − P·B` for `n` rows.
//
// # Safety
// `z` and `u` hold `n·k` doubles and `p` holds `n·m`, with `B` of size `m × k`.
enum CfscmStatus cfscm_glm_abduct(const struct CfscmGlm *glm,
                                  const double *z,
                                  const double *p,
                                  size_t n,
                                  double *u);

// `Z = U + P·B` for `n` rows.
//
// # Safety
// `u` and `z` hold `n·k` doubles and `p` holds `n·m`, with `B` of size `m × k`.
enum CfscmStatus cfscm_glm_predict(const struct CfscmGlm *glm,
                                   const double *u,
                                   const double *p,
                                   size_t n,
                                   double *z);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CFSCM_H */
