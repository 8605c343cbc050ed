/* C interface to the ier sound localization library. */

#ifndef IER_H
#define IER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Training stage selector for [`ier_train`].
 */
typedef enum IerStage {
  IER_STAGE_ONE = 1,
  IER_STAGE_IDENTIFIER = 2,
  IER_STAGE_TWO = 3,
} IerStage;

/**
 * Result of every fallible call.
 */
typedef enum IerStatus {
  IER_STATUS_OK = 0,
  IER_STATUS_NULL_POINTER = 1,
  IER_STATUS_USAGE = 2,
  IER_STATUS_IO = 3,
  IER_STATUS_NUMERIC = 4,
  IER_STATUS_DOMAIN = 5,
  IER_STATUS_FORMAT = 6,
  IER_STATUS_CONFIG = 7,
  IER_STATUS_BUFFER_TOO_SMALL = 8,
  IER_STATUS_PANIC = 9,
} IerStatus;

/**
 * An experiment configuration.
 */
typedef struct IerConfig IerConfig;

/**
 * Outputs of one inference call.
 */
typedef struct IerInference IerInference;

/**
 * A trained model loaded from a checkpoint.
 */
typedef struct IerModel IerModel;

/**
 * Referrer switches used by [`ier_infer`].
 */
typedef struct IerReferrerOptions {
  /**
   * 1 constant, 2 batch-max ratio, 3 item-max ratio, 4 GAP weight, 5 batch mean.
   */
  uint8_t threshold_mode;
  /**
   * Constant for mode 1, ratio for modes 2 and 3.
   */
  double threshold_value;
  bool silent_filter;
  bool offscreen_filter;
} IerReferrerOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next call into this library on the same thread.
 */
const char *ier_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ier_version(void);

/**
 * Defaults: batch-mean threshold, both filters on.
 */
struct IerReferrerOptions ier_referrer_options_default(void);

/**
 * Default experiment configuration.
 */
enum IerStatus ier_config_default(struct IerConfig **config);

/**
 * Parses a flat JSON configuration; missing keys take their defaults.
 */
enum IerStatus ier_config_from_json(const char *json, struct IerConfig **config);

void ier_config_free(struct IerConfig *config);

/**
 * Writes a synthetic dataset to `out_dir`.
 */
enum IerStatus ier_synth(const struct IerConfig *config, const char *out_dir);

/**
 * Trains one stage. `from` is the previous checkpoint and may be NULL for
 * stage one.
 */
enum IerStatus ier_train(const struct IerConfig *config,
                         const char *data_dir,
                         enum IerStage stage,
                         const char *from,
                         const char *out_path);

/**
 * Evaluates a checkpoint and writes `report.json` and `per_sample.csv`.
 * `metrics`, when non-NULL, receives iou_05, auc, ciou_03, nmi, precision,
 * recall and map in that order (7 values).
 */
enum IerStatus ier_eval(const struct IerConfig *config,
                        const char *checkpoint,
                        const char *data_dir,
                        const char *out_dir,
                        double *metrics);

/**
 * Loads a checkpoint that contains prototypes and steps.
 */
enum IerStatus ier_model_load(const char *checkpoint, struct IerModel **model);

void ier_model_free(struct IerModel *model);

/**
 * Pseudo-class count K, or 0 for a NULL handle.
 */
size_t ier_model_num_classes(const struct IerModel *model);

/**
 * Visual channel and audio latent sizes the model expects.
 */
enum IerStatus ier_model_input_dims(const struct IerModel *model, size_t *c_in, size_t *a_in);

/**
 * True category of pseudo-class `k`; `SIZE_MAX` when the cluster was empty.
 */
enum IerStatus ier_model_category(const struct IerModel *model, size_t k, size_t *category);

/**
 * Runs the referrer on one scene. `grid` is `height × width × channels`,
 * row-major; `audio` holds `audio_len` latent values. Batch statistics come
 * from this scene alone.
 */
enum IerStatus ier_infer(const struct IerModel *model,
                         const struct IerReferrerOptions *options,
                         const double *grid,
                         size_t height,
                         size_t width,
                         size_t channels,
                         const double *audio,
                         size_t audio_len,
                         struct IerInference **result);

void ier_inference_free(struct IerInference *result);

/**
 * Copies the AVMap of class `k` (`height × width` values).
 */
enum IerStatus ier_inference_av_map(const struct IerInference *result,
                                    size_t k,
                                    double *buffer,
                                    size_t capacity);

/**
 * Copies the audio-guided distribution (K values).
 */
enum IerStatus ier_inference_p_av(const struct IerInference *result,
                                  double *buffer,
                                  size_t capacity);

/**
 * Copies the visual-guided distribution (K values).
 */
enum IerStatus ier_inference_p_va(const struct IerInference *result,
                                  double *buffer,
                                  size_t capacity);

/**
 * Cosine similarity of two length-`n` vectors.
 */
enum IerStatus ier_cosine(const double *a, const double *b, size_t n, double *value);

/**
 * Max-shifted softmax of `n` scores into `probabilities`.
 */
enum IerStatus ier_softmax(const double *scores, size_t n, double *probabilities);

/**
 * `KL(p || q)` over `n` entries.
 */
enum IerStatus ier_kl_divergence(const double *p, const double *q, size_t n, double *value);

/**
 * Symmetric KL `½ KL(p‖q) + ½ KL(q‖p)`.
 */
enum IerStatus ier_cross_distillation(const double *p, const double *q, size_t n, double *value);

/**
 * Class-aware IoU: mean of `ious` over entries whose `presence` is nonzero.
 */
enum IerStatus ier_ciou(const double *ious, const uint8_t *presence, size_t n, double *value);

/**
 * Log-mel spectrogram with 160 ms windows and 80 ms hops. Writes
 * `frames × bins` values row-major by frame and stores the frame count.
 */
enum IerStatus ier_log_mel(const double *samples,
                           size_t n,
                           uint32_t sample_rate,
                           size_t bins,
                           double *buffer,
                           size_t capacity,
                           size_t *frames);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IER_H */
