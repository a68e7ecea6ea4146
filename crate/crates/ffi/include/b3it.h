#ifndef B3IT_H
#define B3IT_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum B3itStatus {
  B3IT_STATUS_OK = 0,
  B3IT_STATUS_NULL_POINTER = 1,
  B3IT_STATUS_INVALID_ARGUMENT = 2,
  B3IT_STATUS_INVALID_UTF8 = 3,
  B3IT_STATUS_BUFFER_TOO_SMALL = 4,
  B3IT_STATUS_PANIC = 5,
} B3itStatus;

/**
 * Token-count table built incrementally from C.
 */
typedef struct B3itDistribution B3itDistribution;

/**
 * Copies the calling thread's last error message (UTF-8, NUL-terminated)
 * into `buf`. Returns the message length without the terminator; if that is
 * `>= len` the message was truncated.
 */
size_t b3it_last_error(char *buf, size_t len);

/**
 * Creates an empty distribution. Free with [`b3it_distribution_free`].
 */
struct B3itDistribution *b3it_distribution_new(void);

/**
 * Frees a distribution; null is ignored.
 *
 * # Safety
 * `dist` must come from [`b3it_distribution_new`] and not be used afterwards.
 */
void b3it_distribution_free(struct B3itDistribution *dist);

/**
 * Adds `count` observations of the NUL-terminated UTF-8 `token`.
 */
enum B3itStatus b3it_distribution_add(struct B3itDistribution *dist,
                                      const char *token,
                                      uint64_t count);

enum B3itStatus b3it_distribution_total(const struct B3itDistribution *dist, uint64_t *out);

enum B3itStatus b3it_distribution_support_size(const struct B3itDistribution *dist, size_t *out);

/**
 * Total variation distance between two nonempty distributions.
 */
enum B3itStatus b3it_tv_distance(const struct B3itDistribution *p,
                                 const struct B3itDistribution *q,
                                 double *out);

/**
 * Whether the supports differ.
 */
enum B3itStatus b3it_support_mismatch(const struct B3itDistribution *reference,
                                      const struct B3itDistribution *detection,
                                      bool *out);

enum B3itStatus b3it_aggregate_statistic(const double *values, size_t len, double *out);

enum B3itStatus b3it_type1_bound(uint64_t k, uint64_t n1, uint64_t n2, double *out);

enum B3itStatus b3it_type2_bound(uint64_t k1,
                                 uint64_t k2,
                                 uint64_t intersection,
                                 uint64_t n1,
                                 uint64_t n2,
                                 double *out);

enum B3itStatus b3it_risk_lower_bound(uint64_t n, double *out);

enum B3itStatus b3it_roc_auc(const double *positive,
                             size_t positive_len,
                             const double *negative,
                             size_t negative_len,
                             double *out);

enum B3itStatus b3it_cost_per_bi(uint32_t m, double f_b, double *out);

enum B3itStatus b3it_optimal_m(double f_b, uint32_t m_max, uint32_t *out);

/**
 * SNR^2 of a softmax head with `d` logits, a row-major `d x q` logit
 * Jacobian and a unit direction of length `q`.
 */
enum B3itStatus b3it_snr_squared(const double *logits,
                                 size_t d,
                                 double temperature,
                                 const double *jacobian_row_major,
                                 size_t q,
                                 const double *direction,
                                 double *out);

enum B3itStatus b3it_asymptotic_type2(double alpha, double s, double snr_squared, double *out);

/**
 * Writes the onset indices of change events into `indices` (capacity
 * `capacity`) and their number into `count`. Returns
 * `BufferTooSmall` with `count` set when the capacity is insufficient.
 */
enum B3itStatus b3it_change_event_scan(const double *series,
                                       size_t len,
                                       double threshold,
                                       size_t window,
                                       size_t *indices,
                                       size_t capacity,
                                       size_t *count);

/**
 * Yearly monitoring cost in USD for one endpoint, assuming one output token
 * per request. Prices are per million tokens.
 */
enum B3itStatus b3it_yearly_cost(uint64_t prompt_count,
                                 uint64_t n2,
                                 double rounds_per_day,
                                 double input_tokens_per_request,
                                 double price_in,
                                 double price_out,
                                 double *out);

#endif  /* B3IT_H */
