#ifndef CAMELU_CAMELU_H
#define CAMELU_CAMELU_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define CAMELU_API __declspec(dllexport)
#else
#define CAMELU_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Every fallible call returns a status. On failure the calling thread's
 * last error holds a message, the error kind name and, for numeric and
 * fit errors, a JSON detail string. Strings returned through char** out
 * parameters are owned by the caller and released with camelu_string_free. */
typedef enum camelu_status {
  CAMELU_OK = 0,
  CAMELU_E_DIMENSION = 1,
  CAMELU_E_INDEX = 2,
  CAMELU_E_CONTRACT = 3,
  CAMELU_E_CONFIG = 4,
  CAMELU_E_IO = 5,
  CAMELU_E_LOOKUP = 6,
  CAMELU_E_NUMERIC = 7,
  CAMELU_E_FIT = 8,
  CAMELU_E_INTERNAL = 9
} camelu_status;

typedef struct camelu_dataset camelu_dataset;
typedef struct camelu_config camelu_config;
typedef struct camelu_model camelu_model;

CAMELU_API const char* camelu_version(void);
CAMELU_API const char* camelu_status_name(camelu_status status);
CAMELU_API const char* camelu_last_error(void);
CAMELU_API const char* camelu_last_error_kind(void);
/* JSON object text, "{}" when the error carries no detail. */
CAMELU_API const char* camelu_last_error_detail(void);
CAMELU_API void camelu_string_free(char* s);

/* Child seed for a named stream and index, as used throughout the library. */
CAMELU_API uint64_t camelu_derive_seed(uint64_t seed, const char* tag, uint64_t index);

/* ---- datasets ---------------------------------------------------------- */

/* Procedural shapes: n_classes x per_class square images. Classes are
 * numbered from first_class so disjoint sets can share a seed. */
CAMELU_API camelu_status camelu_dataset_synthetic(size_t n_classes, size_t per_class, size_t size, size_t channels,
                                                  uint64_t seed, size_t first_class, int unlabeled,
                                                  camelu_dataset** out);
CAMELU_API camelu_status camelu_dataset_load(const char* dir, camelu_dataset** out);
CAMELU_API camelu_status camelu_dataset_save(const camelu_dataset* ds, const char* dir);
CAMELU_API size_t camelu_dataset_size(const camelu_dataset* ds);
CAMELU_API int camelu_dataset_labeled(const camelu_dataset* ds);
CAMELU_API size_t camelu_dataset_class_count(const camelu_dataset* ds);
CAMELU_API void camelu_dataset_free(camelu_dataset* ds);

/* ---- episodes ---------------------------------------------------------- */

/* options_json keys, all optional: "mode" ("camelu", "augment" or "test"),
 * "n_way", "k_shot", "n_query", "aug_count", "fixed_lambda",
 * "mix": {"alpha", "beta", "lo", "hi", "mode": "pixel" | "patch"}.
 * Writes one episode bundle and returns its provenance summary as JSON. */
CAMELU_API camelu_status camelu_episode_write(const camelu_dataset* ds, const char* options_json, uint64_t seed,
                                              const char* path, char** summary_json);

CAMELU_API camelu_status camelu_collision_probability(uint64_t classes, uint64_t per_class, uint64_t n_way,
                                                      double* out);

/* ---- similarity -------------------------------------------------------- */

/* Image tensors (H x W x C CMLT files). */
CAMELU_API camelu_status camelu_ssim_files(const char* a, const char* b, double* out);
/* Mean query mSSIM of pixel-level and patch-level mixing over random
 * dataset pairs at a fixed lambda. */
CAMELU_API camelu_status camelu_mssim_compare(const camelu_dataset* ds, size_t pairs, double lambda, uint64_t seed,
                                              double* pixel, double* patch);

/* ---- configuration ----------------------------------------------------- */

CAMELU_API camelu_status camelu_config_new(camelu_config** out);
CAMELU_API camelu_status camelu_config_load(const char* path, camelu_config** out);
/* Same keys as the config file; list keys replace the current list. */
CAMELU_API camelu_status camelu_config_set(camelu_config* cfg, const char* key, const char* value);
CAMELU_API camelu_status camelu_config_format(const camelu_config* cfg, char** out);
CAMELU_API void camelu_config_free(camelu_config* cfg);

/* ---- training ---------------------------------------------------------- */

typedef void (*camelu_epoch_callback)(void* user, size_t epoch, double loss, double lr, const double* accuracy,
                                      const double* stderr_, size_t n_val, double seconds);

/* Runs the configured training. out_dir receives config.resolved.txt,
 * metrics.csv, timing.csv and checkpoints; resume may be NULL. out_model
 * may be NULL. */
CAMELU_API camelu_status camelu_train(const camelu_config* cfg, const char* out_dir, const char* resume,
                                      camelu_epoch_callback cb, void* user, camelu_model** out_model);

/* Step-0 model of the configured run, without training. */
CAMELU_API camelu_status camelu_model_init(const camelu_config* cfg, camelu_model** out);
CAMELU_API camelu_status camelu_model_load(const char* path, camelu_model** out);
CAMELU_API camelu_status camelu_model_save(const camelu_model* m, const char* path);
CAMELU_API camelu_status camelu_model_checksum(const camelu_model* m, uint64_t* out);
CAMELU_API size_t camelu_model_parameter_count(const camelu_model* m);
CAMELU_API void camelu_model_free(camelu_model* m);

/* ---- evaluation -------------------------------------------------------- */

typedef struct camelu_eval_result {
  double mean;
  double stderr_;
  size_t episodes;
  uint64_t checksum_before;
  uint64_t checksum_after;
  size_t tokens;
} camelu_eval_result;

/* N-way K-shot test episodes drawn from a labeled dataset. */
CAMELU_API camelu_status camelu_evaluate(const camelu_model* m, const camelu_dataset* ds, size_t episodes,
                                         size_t n_way, size_t k_shot, size_t n_query, uint64_t seed, size_t threads,
                                         camelu_eval_result* out);

/* One test episode's extractor-space and transformer-space embeddings,
 * written as a CMLT bundle, plus a JSON centroid-distance summary. */
CAMELU_API camelu_status camelu_export_embeddings(const camelu_model* m, const camelu_dataset* ds, size_t n_way,
                                                  size_t k_shot, size_t n_query, uint64_t seed, const char* path,
                                                  char** summary_json);

/* ---- analysis ---------------------------------------------------------- */

typedef struct camelu_phase_fit {
  double a, b, c, d, x0, residual;
  int degenerate;
  double fraction;
  double learn_start, gen_start;
  long learn_epoch, gen_epoch;
} camelu_phase_fit;

CAMELU_API camelu_status camelu_fit_phases(const double* xs, const double* ys, size_t n, double fraction,
                                           camelu_phase_fit* out);
/* Fits the relative accuracy of one validation column of a metrics CSV
 * against epoch + 1. Either string out parameter may be NULL. */
CAMELU_API camelu_status camelu_phases_from_metrics(const char* csv_path, size_t val_index, double fraction,
                                                    const char* title, camelu_phase_fit* out, char** json,
                                                    char** svg);

#ifdef __cplusplus
}
#endif

#endif
