#ifndef APTBENCH_H
#define APTBENCH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AptStatus {
  APT_STATUS_OK = 0,
  APT_STATUS_NULL_POINTER = 1,
  APT_STATUS_INVALID_ARGUMENT = 2,
  APT_STATUS_CONFIG = 3,
  APT_STATUS_MISSING_PREREQUISITE = 4,
  APT_STATUS_SHAPE = 5,
  APT_STATUS_NUMERICAL = 6,
  APT_STATUS_CHECKPOINT = 7,
  APT_STATUS_DATASET = 8,
  APT_STATUS_IO = 9,
  APT_STATUS_SERDE = 10,
  APT_STATUS_OUTPUT_EXISTS = 11,
  APT_STATUS_PANIC = 12,
} AptStatus;

// How an attack ended.
typedef enum AptStopReason {
  APT_STOP_REASON_FOOLED_WITHIN_D = 0,
  APT_STOP_REASON_HIT_DISTANCE_BOUND = 1,
  APT_STOP_REASON_MAX_ITERS = 2,
  APT_STOP_REASON_FAILED = 3,
} AptStopReason;

// Frozen models of one output root.
typedef struct AptBench AptBench;

// Inverted latent code and noise for one image.
typedef struct AptPivot AptPivot;

// Result of [`apt_attack_image`].
typedef struct AptAttackSummary {
  bool emitted;
  bool fooled;
  size_t predicted_class;
  size_t fool_target;
  size_t iterations;
  // Reconstruction distance of the emitted image; NaN when nothing was emitted.
  double l_pt;
  enum AptStopReason stop_reason;
} AptAttackSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the next call.
const char *apt_last_error_message(void);

// Static name of a status code.
const char *apt_status_name(enum AptStatus status);

// Load the dataset and checkpoints under `root` trained with the TOML config at `config_path`.
//
// # Safety
// `root` and `config_path` must be NUL-terminated strings; `out` must be writable.
enum AptStatus apt_bench_open(const char *root, const char *config_path, struct AptBench **out);

// # Safety
// `bench` must come from [`apt_bench_open`] and not be used afterwards. NULL is ignored.
void apt_bench_free(struct AptBench *bench);

// Image dimensions and class count of the bench.
//
// # Safety
// `bench` must be a live handle; the out pointers must be writable.
enum AptStatus apt_bench_info(const struct AptBench *bench,
                              size_t *channels,
                              size_t *height,
                              size_t *width,
                              size_t *num_classes);

// Copy dataset image `id` into `out` and its label into `label`.
//
// # Safety
// `out` must hold `len` doubles; `label` must be writable.
enum AptStatus apt_bench_image(const struct AptBench *bench,
                               size_t id,
                               double *out,
                               size_t len,
                               size_t *label);

// Class probabilities of `classifier` (e.g. "conv", "mlp", "oracle") for one image.
//
// # Safety
// `image` must hold `len` doubles and `probs` `probs_len` doubles.
enum AptStatus apt_classify(const struct AptBench *bench,
                            const char *classifier,
                            const double *image,
                            size_t len,
                            double *probs,
                            size_t probs_len);

// Perceptual distance between two images.
//
// # Safety
// `x` and `y` must each hold `len` doubles; `out` must be writable.
enum AptStatus apt_perceptual_distance(const struct AptBench *bench,
                                       const double *x,
                                       const double *y,
                                       size_t len,
                                       double *out);

// Invert one image of class `class` into the generator; the pivot is returned in `out`.
//
// # Safety
// `image` must hold `len` doubles; `out` must be writable.
enum AptStatus apt_invert(const struct AptBench *bench,
                          const double *image,
                          size_t len,
                          size_t class_,
                          struct AptPivot **out);

// Final objective value and first/last reconstruction distance of an inversion.
//
// # Safety
// `pivot` must be a live handle; out pointers must be writable.
enum AptStatus apt_pivot_losses(const struct AptPivot *pivot,
                                double *final_loss,
                                double *initial_lpips,
                                double *final_lpips);

// # Safety
// `pivot` must come from [`apt_invert`] and not be used afterwards. NULL is ignored.
void apt_pivot_free(struct AptPivot *pivot);

// Run one pivot-tuning attack on `image` against `target` within distance `d`.
//
// The generator is tuned on a private copy; the bench is unchanged. When an
// image is emitted it is written to `out_image`, otherwise `out_image` is left
// untouched.
//
// # Safety
// `image` and `out_image` must hold `len` doubles; `summary` must be writable.
enum AptStatus apt_attack_image(const struct AptBench *bench,
                                const char *target,
                                const double *image,
                                size_t len,
                                size_t class_,
                                const struct AptPivot *pivot,
                                double d,
                                uint64_t seed,
                                double *out_image,
                                struct AptAttackSummary *summary);

// Fréchet distance between two feature sets given as row-major `n x dim` matrices.
//
// # Safety
// `a` must hold `na * dim` doubles and `b` `nb * dim`; `out` must be writable.
enum AptStatus apt_fid(const double *a,
                       size_t na,
                       const double *b,
                       size_t nb,
                       size_t dim,
                       double *out);

// Fréchet distance between two image sets in the perceptual net's feature space.
//
// # Safety
// `a` must hold `na` images and `b` `nb` images of the bench's shape; `out` must be writable.
enum AptStatus apt_image_fid(const struct AptBench *bench,
                             const double *a,
                             size_t na,
                             const double *b,
                             size_t nb,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* APTBENCH_H */
