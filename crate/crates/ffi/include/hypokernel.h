#ifndef HYPOKERNEL_H
#define HYPOKERNEL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum HkStatus {
  HK_STATUS_OK = 0,
  HK_STATUS_NULL_POINTER = 1,
  HK_STATUS_INVALID_ARGUMENT = 2,
  HK_STATUS_RUNTIME = 3,
  HK_STATUS_PANIC = 4,
} HkStatus;

/**
 * A density sampled on a tensor grid.
 */
typedef struct HkDensity HkDensity;

/**
 * A model from the built-in registry.
 */
typedef struct HkModel HkModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error of this thread into `buf` (NUL terminated, truncated
 * to `len`). Returns the full message length in bytes, excluding the NUL.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
uintptr_t hk_last_error_message(char *buf, uintptr_t len);

/**
 * Build a registry model. `params` is "key=value,key=value" or empty/null.
 *
 * # Safety
 * `name` and `params` must be null or NUL-terminated strings; `out` must be
 * valid for one write.
 */
enum HkStatus hk_model_new(const char *name, const char *params, struct HkModel **out);

/**
 * # Safety
 * `model` must come from `hk_model_new` and not be freed twice.
 */
void hk_model_free(struct HkModel *model);

/**
 * # Safety
 * `model` must be a live handle; `dim` valid for one write.
 */
enum HkStatus hk_model_dim(const struct HkModel *model, uintptr_t *dim);

/**
 * Depth at which the bracket span reaches full rank at `x` (classical mode,
 * default tolerance); -1 when the cap is reached first.
 *
 * # Safety
 * `x` must hold `n` values; `depth` valid for one write.
 */
enum HkStatus hk_rank_depth(const struct HkModel *model,
                            const double *x,
                            uintptr_t n,
                            uintptr_t cap,
                            int32_t *depth);

/**
 * Trotter splitting density from `y` at time `t` with `m` substeps on the
 * grid "lo:hi:n[,lo:hi:n...]". The frozen coordinates are those with a
 * nondegenerate diagonal diffusion at `y`.
 *
 * # Safety
 * `y` must hold `n` values, `grid` be a NUL-terminated string and `out`
 * valid for one write.
 */
enum HkStatus hk_trotter_density(const struct HkModel *model,
                                 const double *y,
                                 uintptr_t n,
                                 double t,
                                 uintptr_t m,
                                 const char *grid,
                                 struct HkDensity **out);

/**
 * Parametrix density of the given series order.
 *
 * # Safety
 * As for `hk_trotter_density`.
 */
enum HkStatus hk_parametrix_density(const struct HkModel *model,
                                    const double *y,
                                    uintptr_t n,
                                    double t,
                                    uintptr_t order,
                                    const char *grid,
                                    struct HkDensity **out);

/**
 * Exact Gaussian kernel of a linear model.
 *
 * # Safety
 * As for `hk_trotter_density`.
 */
enum HkStatus hk_exact_linear_density(const struct HkModel *model,
                                      const double *y,
                                      uintptr_t n,
                                      double t,
                                      const char *grid,
                                      struct HkDensity **out);

/**
 * # Safety
 * `density` must come from a constructor above and not be freed twice.
 */
void hk_density_free(struct HkDensity *density);

/**
 * Number of grid nodes.
 *
 * # Safety
 * `density` must be a live handle; `len` valid for one write.
 */
enum HkStatus hk_density_len(const struct HkDensity *density, uintptr_t *len);

/**
 * Copy the values (row-major, last axis fastest) into `buf`, which must
 * hold exactly `hk_density_len` entries.
 *
 * # Safety
 * `buf` must be valid for `len` writes.
 */
enum HkStatus hk_density_values(const struct HkDensity *density, double *buf, uintptr_t len);

/**
 * Trapezoid mass.
 *
 * # Safety
 * `density` must be a live handle; `mass` valid for one write.
 */
enum HkStatus hk_density_mass(const struct HkDensity *density, double *mass);

/**
 * Total variation distance between two densities on the same grid.
 *
 * # Safety
 * Both handles must be live; `tv` valid for one write.
 */
enum HkStatus hk_density_tv(const struct HkDensity *a, const struct HkDensity *b, double *tv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HYPOKERNEL_H */
