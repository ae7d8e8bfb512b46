/* SPDX-License-Identifier: Apache-2.0 */

#ifndef NCVAE_H
#define NCVAE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum NcvaeStatus {
  NCVAE_STATUS_OK = 0,
  NCVAE_STATUS_IO = 1,
  NCVAE_STATUS_INVALID = 2,
  NCVAE_STATUS_NUMERICAL = 3,
  NCVAE_STATUS_NULL_POINTER = 4,
  NCVAE_STATUS_BUFFER_TOO_SMALL = 5,
  NCVAE_STATUS_PANIC = 6,
} NcvaeStatus;

/**
 * Rendered shapes dataset.
 */
typedef struct NcvaeDataset NcvaeDataset;

/**
 * Model restored from a training checkpoint.
 */
typedef struct NcvaeModel NcvaeModel;

/**
 * Model sizes needed to allocate buffers.
 */
typedef struct NcvaeDims {
  uintptr_t pixels;
  uintptr_t latent;
  uintptr_t group_dim;
  uintptr_t categories;
} NcvaeDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into the library from the same thread.
 */
const char *ncvae_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ncvae_version(void);

/**
 * Matrix exponential of the row-major `n × n` matrix `a` into `out`.
 *
 * # Safety
 * `a` and `out` must each point to `n * n` doubles.
 */
enum NcvaeStatus ncvae_mat_exp(uintptr_t n, const double *a, double *out);

/**
 * Renders `count` images of side `side` from `seed`.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum NcvaeStatus ncvae_dataset_generate(uintptr_t count,
                                        uintptr_t side,
                                        uint64_t seed,
                                        struct NcvaeDataset **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum NcvaeStatus ncvae_dataset_load(const char *path, struct NcvaeDataset **out);

/**
 * # Safety
 * `ds` must come from this library; `path` must be NUL-terminated.
 */
enum NcvaeStatus ncvae_dataset_save(const struct NcvaeDataset *ds, const char *path);

/**
 * Number of images, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or come from this library.
 */
uintptr_t ncvae_dataset_len(const struct NcvaeDataset *ds);

/**
 * Image side length, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or come from this library.
 */
uintptr_t ncvae_dataset_side(const struct NcvaeDataset *ds);

/**
 * Copies image `index` as `side * side` intensities in [0, 1].
 *
 * # Safety
 * `out` must hold `out_len` doubles.
 */
enum NcvaeStatus ncvae_dataset_image(const struct NcvaeDataset *ds,
                                     uintptr_t index,
                                     double *out,
                                     uintptr_t out_len);

/**
 * Writes the hex SHA-256 checksum, NUL-terminated; needs 65 bytes.
 *
 * # Safety
 * `buf` must hold `buf_len` bytes.
 */
enum NcvaeStatus ncvae_dataset_checksum(const struct NcvaeDataset *ds,
                                        char *buf,
                                        uintptr_t buf_len);

/**
 * # Safety
 * `ds` must be null or an unfreed handle from this library.
 */
void ncvae_dataset_free(struct NcvaeDataset *ds);

/**
 * Runs the full curriculum into `out_dir`. A null `config_path` uses the
 * default configuration.
 *
 * # Safety
 * Non-null arguments must be NUL-terminated strings.
 */
enum NcvaeStatus ncvae_train(const char *config_path, const char *out_dir);

/**
 * # Safety
 * `path` must be NUL-terminated; `out` a valid handle slot.
 */
enum NcvaeStatus ncvae_model_load(const char *path, struct NcvaeModel **out);

/**
 * # Safety
 * `model` must be null or an unfreed handle from this library.
 */
void ncvae_model_free(struct NcvaeModel *model);

/**
 * # Safety
 * `model` must come from this library; `out` must be valid.
 */
enum NcvaeStatus ncvae_model_dims(const struct NcvaeModel *model, struct NcvaeDims *out);

/**
 * Reconstruction probabilities for `rows` images, using the posterior mean
 * and the most likely discrete code.
 *
 * # Safety
 * `x` and `out` must each hold `rows * pixels` doubles.
 */
enum NcvaeStatus ncvae_model_reconstruct(const struct NcvaeModel *model,
                                         const double *x,
                                         uintptr_t rows,
                                         double *out);

/**
 * Posterior means of the continuous latent for `rows` images.
 *
 * # Safety
 * `x` must hold `rows * pixels` doubles and `out` `rows * latent`.
 */
enum NcvaeStatus ncvae_model_encode_mean(const struct NcvaeModel *model,
                                         const double *x,
                                         uintptr_t rows,
                                         double *out);

/**
 * Deviation between the joint and the sequential exponentials of
 * generators `i` and `j` at coordinates `t` (length `latent`).
 *
 * # Safety
 * `t` must hold `t_len` doubles; `out` must be valid.
 */
enum NcvaeStatus ncvae_model_bch_deviation(const struct NcvaeModel *model,
                                           uintptr_t i,
                                           uintptr_t j,
                                           const double *t,
                                           uintptr_t t_len,
                                           double *out);

/**
 * Per-pair diagnostics on the first `samples` images of `ds`, written as
 * CSV to `out_path`.
 *
 * # Safety
 * Handles must come from this library; `out_path` must be NUL-terminated.
 */
enum NcvaeStatus ncvae_model_diagnose(const struct NcvaeModel *model,
                                      const struct NcvaeDataset *ds,
                                      uintptr_t samples,
                                      const char *out_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NCVAE_H */
