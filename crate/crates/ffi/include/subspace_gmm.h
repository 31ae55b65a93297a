#ifndef SUBSPACE_GMM_H
#define SUBSPACE_GMM_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Status codes. Zero is success.
typedef enum SgStatus {
  SG_STATUS_OK = 0,
  SG_STATUS_NULL_POINTER = 1,
  SG_STATUS_INVALID_DIMENSION = 2,
  SG_STATUS_INVALID_PARAMETER = 3,
  SG_STATUS_MISSING_RESPONSE = 4,
  SG_STATUS_NON_FINITE = 5,
  SG_STATUS_NUMERICAL = 6,
  SG_STATUS_PARSE = 7,
  SG_STATUS_IO = 8,
  SG_STATUS_BUFFER_TOO_SMALL = 9,
  SG_STATUS_PANIC = 10,
} SgStatus;

// Covariates and optional response.
typedef struct SgDataset SgDataset;

// An estimated subspace.
typedef struct SgEstimate SgEstimate;

// A list of moment functions.
typedef struct SgMomentSet SgMomentSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failing call on this thread, or NULL. The pointer is
// valid until the next failing call on the same thread.
const char *sg_last_error(void);

// Library version as a static NUL-terminated string.
const char *sg_version(void);

// Builds a dataset from an `n × p` column-major covariate buffer and an
// optional length-`n` response (`y` may be NULL). The buffers are copied.
//
// # Safety
// `x` must point to `n·p` doubles and `y`, if non-null, to `n` doubles.
enum SgStatus sg_dataset_new(const double *x,
                             size_t n,
                             size_t p,
                             const double *y,
                             struct SgDataset **out);

// Reads a headered CSV file. `response` names the response column and may
// be NULL.
//
// # Safety
// `path` and `response` must be NUL-terminated strings (or NULL for `response`).
enum SgStatus sg_dataset_load_csv(const char *path, const char *response, struct SgDataset **out);

// Writes the sample size and dimension.
//
// # Safety
// `data` must be a live dataset handle; `n` and `p` must be writable.
enum SgStatus sg_dataset_dims(const struct SgDataset *data, size_t *n, size_t *p);

// # Safety
// `data` must be NULL or a handle from this library not freed before.
void sg_dataset_free(struct SgDataset *data);

// Parses a moment-set JSON document.
//
// # Safety
// `json` must be a NUL-terminated string.
enum SgStatus sg_moment_set_from_json(const char *json, struct SgMomentSet **out);

// The first- and second-moment set of a factor model with noise level `sigma`.
//
// # Safety
// `out` must be writable.
enum SgStatus sg_moment_set_factor(size_t p, double sigma, struct SgMomentSet **out);

// Number of moment functions `m`.
//
// # Safety
// `set` must be a live handle and `m` writable.
enum SgStatus sg_moment_set_len(const struct SgMomentSet *set, size_t *m);

// # Safety
// `set` must be NULL or a handle from this library not freed before.
void sg_moment_set_free(struct SgMomentSet *set);

// Two-step GMM estimate. `r = 0` estimates the rank with the τ rule; pass
// `tau <= 0` for the default threshold. `diagonal` selects a diagonal
// weight.
//
// # Safety
// `data` and `set` must be live handles and `out` writable.
enum SgStatus sg_estimate_gmm(const struct SgDataset *data,
                              const struct SgMomentSet *set,
                              size_t r,
                              double delta,
                              double tau,
                              bool diagonal,
                              struct SgEstimate **out);

// Top-`r` eigenvectors of `V Vᵀ` (identity weight).
//
// # Safety
// `data` and `set` must be live handles and `out` writable.
enum SgStatus sg_estimate_identity(const struct SgDataset *data,
                                   const struct SgMomentSet *set,
                                   size_t r,
                                   struct SgEstimate **out);

// Writes the ambient dimension `p` and the subspace dimension `r`.
//
// # Safety
// `est` must be a live handle; `p` and `r` must be writable.
enum SgStatus sg_estimate_dims(const struct SgEstimate *est, size_t *p, size_t *r);

// Copies the `p × r` orthonormal basis, column-major, into `buf`.
//
// # Safety
// `buf` must point to `len` writable doubles.
enum SgStatus sg_estimate_basis(const struct SgEstimate *est, double *buf, size_t len);

// Copies the `p` eigenvalues, in descending order, into `buf`.
//
// # Safety
// `buf` must point to `len` writable doubles.
enum SgStatus sg_estimate_eigenvalues(const struct SgEstimate *est, double *buf, size_t len);

// Frobenius distance between the projections of two estimates.
//
// # Safety
// `a` and `b` must be live handles and `out` writable.
enum SgStatus sg_estimate_distance(const struct SgEstimate *a,
                                   const struct SgEstimate *b,
                                   double *out);

// Serializes the estimate as JSON. Release the string with [`sg_string_free`].
//
// # Safety
// `est` must be a live handle and `out` writable.
enum SgStatus sg_estimate_to_json(const struct SgEstimate *est, char **out);

// # Safety
// `est` must be NULL or a handle from this library not freed before.
void sg_estimate_free(struct SgEstimate *est);

// # Safety
// `s` must be NULL or a string returned by this library not freed before.
void sg_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SUBSPACE_GMM_H */
