/* C interface to the DMAF-Net library. All objects are opaque handles owned by
   the caller and released with the matching *_free function. Every fallible
   call returns a dmaf_status; the message of the most recent failure on the
   calling thread is available from dmaf_last_error(). */
#ifndef DMAF_DMAF_H
#define DMAF_DMAF_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define DMAF_API __declspec(dllexport)
#else
#define DMAF_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

#define DMAF_ABI_VERSION 1u

typedef enum dmaf_status {
  DMAF_OK = 0,
  DMAF_ERR_INVALID_ARGUMENT = 1,
  DMAF_ERR_SHAPE = 2,
  DMAF_ERR_IO = 3,
  DMAF_ERR_FORMAT = 4,
  DMAF_ERR_NUMERIC = 5,
  DMAF_ERR_CONFIG = 6,
  DMAF_ERR_INTERNAL = 7
} dmaf_status;

typedef enum dmaf_split { DMAF_SPLIT_ALL = 0, DMAF_SPLIT_TRAIN = 1, DMAF_SPLIT_VAL = 2 } dmaf_split;

typedef struct dmaf_corpus dmaf_corpus;
typedef struct dmaf_config dmaf_config;
typedef struct dmaf_trainer dmaf_trainer;
typedef struct dmaf_model dmaf_model;

DMAF_API uint32_t dmaf_abi_version(void);
DMAF_API const char* dmaf_last_error(void);
DMAF_API const char* dmaf_status_name(dmaf_status status);

/* mode is "idt" or "pdt"; rates holds one target missing rate per modality (ignored for pdt). */
DMAF_API dmaf_status dmaf_corpus_generate(int n_samples, int height, int width, int n_classes, int n_modalities,
                                          const char* mode, const double* rates, size_t n_rates, uint64_t seed,
                                          dmaf_corpus** out);
DMAF_API dmaf_status dmaf_corpus_load(const char* dir, dmaf_corpus** out);
DMAF_API dmaf_status dmaf_corpus_save(const dmaf_corpus* corpus, const char* dir);
DMAF_API int dmaf_corpus_size(const dmaf_corpus* corpus);
DMAF_API int dmaf_corpus_modalities(const dmaf_corpus* corpus);
DMAF_API dmaf_status dmaf_corpus_missing_rate(const dmaf_corpus* corpus, int modality, double* out);
DMAF_API void dmaf_corpus_free(dmaf_corpus* corpus);

DMAF_API dmaf_status dmaf_config_create(dmaf_config** out);
/* Keys absent from the file keep their defaults; unknown keys are an error. */
DMAF_API dmaf_status dmaf_config_load(const char* path, dmaf_config** out);
/* value is JSON text, e.g. "300", "false", "[1.0,1.0,1.0]". Nested keys use a dot: "net.height". */
DMAF_API dmaf_status dmaf_config_set(dmaf_config* config, const char* key, const char* value);
/* Copies the config as JSON into buf (NUL-terminated, truncated to size) and returns the full length. */
DMAF_API size_t dmaf_config_to_json(const dmaf_config* config, char* buf, size_t size);
DMAF_API void dmaf_config_free(dmaf_config* config);

/* Trains on the selected split of the corpus. */
DMAF_API dmaf_status dmaf_trainer_create(const dmaf_config* config, const dmaf_corpus* corpus, dmaf_split split,
                                         dmaf_trainer** out);
DMAF_API dmaf_status dmaf_trainer_step(dmaf_trainer* trainer, double* total_loss);
DMAF_API dmaf_status dmaf_trainer_run_epochs(dmaf_trainer* trainer, int epochs);
DMAF_API long dmaf_trainer_steps(const dmaf_trainer* trainer);
DMAF_API int dmaf_trainer_train_size(const dmaf_trainer* trainer);
DMAF_API dmaf_status dmaf_trainer_save(const dmaf_trainer* trainer, const char* path);
DMAF_API dmaf_status dmaf_trainer_resume(dmaf_trainer* trainer, const char* path);
DMAF_API dmaf_status dmaf_trainer_write_log(const dmaf_trainer* trainer, const char* path);
DMAF_API void dmaf_trainer_free(dmaf_trainer* trainer);

/* Reads the run config stored in a checkpoint. */
DMAF_API dmaf_status dmaf_checkpoint_config(const char* path, dmaf_config** out);

DMAF_API dmaf_status dmaf_model_load(const char* checkpoint, dmaf_model** out);
/* Evaluates every nonempty modality combination and writes samples.csv and
   combinations.csv into out_dir. n_rows receives the combination count. */
DMAF_API dmaf_status dmaf_model_evaluate(const dmaf_model* model, const dmaf_corpus* corpus, dmaf_split split,
                                         const char* out_dir, int* n_rows);
/* Macro DSC of each modality's own decoder output; out has one slot per modality. */
DMAF_API dmaf_status dmaf_model_evaluate_unimodal(const dmaf_model* model, const dmaf_corpus* corpus,
                                                  dmaf_split split, double* out, size_t n_out);
DMAF_API void dmaf_model_free(dmaf_model* model);

/* Writes trajectories/charts for a run log, or a chart for a combinations table. */
DMAF_API dmaf_status dmaf_plot(const char* input_csv, const char* out_dir, int* n_files);

#ifdef __cplusplus
}
#endif

#endif
