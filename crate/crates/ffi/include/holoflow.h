#ifndef HOLOFLOW_H
#define HOLOFLOW_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every function.
typedef enum HfStatus {
  HF_STATUS_OK = 0,
  HF_STATUS_NULL_POINTER = 1,
  HF_STATUS_INVALID_ARGUMENT = 2,
  HF_STATUS_DOMAIN = 3,
  HF_STATUS_CONFIG = 4,
  HF_STATUS_SHAPE = 5,
  HF_STATUS_NUMERIC = 6,
  HF_STATUS_DECODE = 7,
  HF_STATUS_FORMAT = 8,
  HF_STATUS_CHECKPOINT = 9,
  HF_STATUS_UNDEFINED = 10,
  HF_STATUS_IO = 11,
  HF_STATUS_BUFFER_TOO_SMALL = 12,
  HF_STATUS_PANIC = 13,
} HfStatus;

// Parsed run configuration.
typedef struct HfConfig HfConfig;

// Trained weights loaded from a checkpoint file.
typedef struct HfModel HfModel;

// A training session that advances one batch per call.
typedef struct HfTrainer HfTrainer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *hf_version(void);

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `cap`). Returns the full message length excluding the NUL.
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
size_t hf_last_error(char *buf, size_t cap);

// Default configuration (desk checkerboard run).
//
// # Safety
// `out` must be a valid pointer to a handle slot.
enum HfStatus hf_config_default(struct HfConfig **out);

// Parses configuration text.
//
// # Safety
// `text` must be a NUL-terminated string; `out` a valid handle slot.
enum HfStatus hf_config_parse(const char *text, struct HfConfig **out);

// Loads a configuration file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` a valid handle slot.
enum HfStatus hf_config_load(const char *path, struct HfConfig **out);

// Overrides the run seed.
//
// # Safety
// `cfg` must be a live handle.
enum HfStatus hf_config_set_seed(struct HfConfig *cfg, uint64_t seed);

// Releases a configuration. Null is ignored.
//
// # Safety
// `cfg` must be null or a handle not yet freed.
void hf_config_free(struct HfConfig *cfg);

// Runs the propagator and path checks; `out_passed` receives 1 or 0.
//
// # Safety
// `cfg` must be a live handle; `out_passed` writable.
enum HfStatus hf_verify(const struct HfConfig *cfg, int32_t *out_passed);

// Bulk-to-boundary mode propagator and its radial derivative at (|k|, r)
// for the configured background.
//
// # Safety
// `cfg` must be a live handle; out pointers writable.
enum HfStatus hf_kappa(const struct HfConfig *cfg,
                       double knorm,
                       double r,
                       double *out_kappa,
                       double *out_dkappa_dr);

// Fraction of points outside the filled checkerboard cells.
//
// # Safety
// `xy` must hold `2 * n` doubles (x0, y0, x1, y1, ...).
enum HfStatus hf_boundary_violation(const struct HfConfig *cfg,
                                    const double *xy,
                                    size_t n,
                                    double *out);

// Cell-averaged energy distance between model and reference points.
//
// # Safety
// `xy` must hold `2 * n` doubles and `ref_xy` `2 * m` doubles.
enum HfStatus hf_wed(const struct HfConfig *cfg,
                     const double *xy,
                     size_t n,
                     const double *ref_xy,
                     size_t m,
                     double *out);

// Energy distance between two 2-D point sets.
//
// # Safety
// `xy` must hold `2 * n` doubles and `ref_xy` `2 * m` doubles.
enum HfStatus hf_energy_distance(const double *xy,
                                 size_t n,
                                 const double *ref_xy,
                                 size_t m,
                                 double *out);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` a valid handle slot.
enum HfStatus hf_model_load(const char *path, struct HfModel **out);

// Number of trainable parameters in the model.
//
// # Safety
// `model` must be a live handle; `out` writable.
enum HfStatus hf_model_param_count(const struct HfModel *model, size_t *out);

// Training epoch recorded in the checkpoint.
//
// # Safety
// `model` must be a live handle; `out` writable.
enum HfStatus hf_model_epoch(const struct HfModel *model, uint64_t *out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void hf_model_free(struct HfModel *model);

// Samples `n` boundary points with the model into `out_xy` (`2 * n` doubles).
// Output is a deterministic function of the configuration seed.
//
// # Safety
// Handles must be live; `out_xy` must have room for `cap` doubles.
enum HfStatus hf_generate_points(const struct HfConfig *cfg,
                                 const struct HfModel *model,
                                 size_t n,
                                 double *out_xy,
                                 size_t cap);

// Starts a fresh training session for the configuration.
//
// # Safety
// `cfg` must be a live handle; `out` a valid handle slot.
enum HfStatus hf_trainer_new(const struct HfConfig *cfg, struct HfTrainer **out);

// Resumes a training session from a checkpoint file.
//
// # Safety
// `cfg` must be a live handle; `path` NUL-terminated; `out` a valid handle slot.
enum HfStatus hf_trainer_resume(const struct HfConfig *cfg,
                                const char *path,
                                struct HfTrainer **out);

// Runs one optimizer step. When the step closes an epoch, `out_epoch`
// receives its number and `out_loss` its mean loss; otherwise `out_epoch`
// receives 0 and `out_loss` is left untouched.
//
// # Safety
// `trainer` must be a live handle; out pointers writable.
enum HfStatus hf_trainer_step(struct HfTrainer *trainer, uint64_t *out_epoch, double *out_loss);

// `out` receives 1 once every configured epoch has run.
//
// # Safety
// `trainer` must be a live handle; `out` writable.
enum HfStatus hf_trainer_is_finished(const struct HfTrainer *trainer, int32_t *out);

// Writes a checkpoint of the current weights, optimizer moments and progress.
//
// # Safety
// `trainer` must be a live handle; `path` NUL-terminated.
enum HfStatus hf_trainer_save(const struct HfTrainer *trainer, const char *path);

// Releases a trainer. Null is ignored.
//
// # Safety
// `trainer` must be null or a handle not yet freed.
void hf_trainer_free(struct HfTrainer *trainer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HOLOFLOW_H */
