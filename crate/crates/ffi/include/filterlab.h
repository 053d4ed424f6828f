#ifndef FILTERLAB_H
#define FILTERLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every entry point.
 */
typedef enum FlbStatus {
  FlbStatus_Ok = 0,
  FlbStatus_NullPointer = 1,
  FlbStatus_InvalidArgument = 2,
  FlbStatus_ContractViolation = 3,
  FlbStatus_RunFailed = 4,
  FlbStatus_Panic = 5,
} FlbStatus;

/**
 * Opaque filter handle.
 */
typedef struct FlbFilter FlbFilter;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message for this thread, or null. Owned by the library; do
 * not free.
 */
const char *flb_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *flb_version(void);

/**
 * Creates an empty filter. `impl_id` is one of "fingerprint",
 * "bitmap_exact", "sticky_toy"; the error rate is eps_num/eps_den.
 *
 * # Safety
 * `impl_id` must be a valid NUL-terminated string and `out` a valid
 * pointer.
 */
enum FlbStatus flb_filter_new(const char *impl_id,
                              uint64_t universe,
                              uint64_t capacity,
                              uint64_t eps_num,
                              uint64_t eps_den,
                              uint64_t seed,
                              struct FlbFilter **out);

/**
 * Releases a filter handle. Null is a no-op.
 *
 * # Safety
 * `filter` must be null or a pointer from `flb_filter_new`.
 */
void flb_filter_free(struct FlbFilter *filter);

/**
 * # Safety
 * Valid handle and out pointer required.
 */
enum FlbStatus flb_filter_query(const struct FlbFilter *filter, uint64_t key, bool *out);

/**
 * # Safety
 * Valid handle required.
 */
enum FlbStatus flb_filter_insert(struct FlbFilter *filter, uint64_t key);

/**
 * # Safety
 * Valid handle required.
 */
enum FlbStatus flb_filter_delete(struct FlbFilter *filter, uint64_t key);

/**
 * Current true-set size.
 *
 * # Safety
 * Valid handle and out pointer required.
 */
enum FlbStatus flb_filter_len(const struct FlbFilter *filter, uint64_t *out);

/**
 * Canonical state serialization (little-endian length-prefixed memory
 * bits). Call with a null buffer to query the required size.
 *
 * # Safety
 * Valid handle and size pointer required; `buf` must hold `buf_len` bytes
 * when non-null.
 */
enum FlbStatus flb_filter_serialize(const struct FlbFilter *filter,
                                    uint8_t *buf,
                                    uintptr_t buf_len,
                                    uintptr_t *written);

/**
 * Accounted state size in bits for the given implementation and
 * parameters.
 *
 * # Safety
 * `impl_id` must be a valid NUL-terminated string and `out` a valid
 * pointer.
 */
enum FlbStatus flb_space_bits(const char *impl_id,
                              uint64_t universe,
                              uint64_t capacity,
                              uint64_t eps_num,
                              uint64_t eps_den,
                              double *out);

/**
 * Runs an experiment from a JSON config (the `ExperimentConfig` schema)
 * and returns the bound report as JSON. Release the string with
 * `flb_string_free`.
 *
 * # Safety
 * `config_json` must be a valid NUL-terminated string, `out` a valid
 * pointer.
 */
enum FlbStatus flb_run_experiment_json(const char *config_json, char **out);

/**
 * Runs one acceptance criterion (e.g. "A3"); `out_pass` receives the
 * verdict and `out_line` the human-readable line (release with
 * `flb_string_free`).
 *
 * # Safety
 * All pointers must be valid; `id` NUL-terminated.
 */
enum FlbStatus flb_acceptance_criterion(const char *id, bool *out_pass, char **out_line);

/**
 * Releases a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must be null or a pointer returned by this library.
 */
void flb_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FILTERLAB_H */
