/* C interface to the prompt pretraining library.
 *
 * Every function returns an rpp_status; on failure the thread-local
 * message is available from rpp_last_error(). Strings returned through
 * `char**` out-parameters are owned by the caller and released with
 * rpp_string_free(). Handles are opaque and released with their _free.
 */
#ifndef RPP_RPP_H
#define RPP_RPP_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define RPP_API __declspec(dllexport)
#else
#define RPP_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum rpp_status {
  RPP_OK = 0,
  RPP_ERR_USAGE = 1,
  RPP_ERR_CONFIG = 2,
  RPP_ERR_DIMENSION = 3,
  RPP_ERR_DOMAIN = 4,
  RPP_ERR_NUMERIC = 5,
  RPP_ERR_INPUT = 6,
  RPP_ERR_IO = 7,
  RPP_ERR_ASSERTION = 8, /* a verification check ran and failed */
  RPP_ERR_TRAINING = 9,
  RPP_ERR_INTERNAL = 10
} rpp_status;

typedef struct rpp_config rpp_config;
typedef struct rpp_corpus rpp_corpus;
typedef struct rpp_teacher rpp_teacher;
typedef struct rpp_student rpp_student;

/* Progress lines (teacher epochs, sweep runs, metrics records). */
typedef void (*rpp_log_fn)(const char* line, void* user);

RPP_API const char* rpp_version(void);
RPP_API const char* rpp_last_error(void);
RPP_API const char* rpp_status_name(rpp_status status);
RPP_API void rpp_string_free(char* s);

/* ---- configuration ---- */
RPP_API rpp_status rpp_config_new(rpp_config** out);
RPP_API void rpp_config_free(rpp_config* cfg);
/* Merges an INI file; later calls and rpp_config_set override earlier values. */
RPP_API rpp_status rpp_config_load_file(rpp_config* cfg, const char* path);
RPP_API rpp_status rpp_config_set(rpp_config* cfg, const char* key, const char* value);
RPP_API rpp_status rpp_config_get(const rpp_config* cfg, const char* key, char** value);
/* Derives seeds and encoder geometry, then validates. */
RPP_API rpp_status rpp_config_finalize(rpp_config* cfg);
RPP_API rpp_status rpp_config_to_ini(const rpp_config* cfg, char** ini);
RPP_API rpp_status rpp_config_to_json(const rpp_config* cfg, char** json);

/* ---- corpus ---- */
RPP_API rpp_status rpp_corpus_generate(const rpp_config* cfg, rpp_corpus** out);
RPP_API rpp_status rpp_corpus_load(const char* path, rpp_corpus** out);
RPP_API rpp_status rpp_corpus_save(const rpp_corpus* corpus, const char* path);
RPP_API rpp_status rpp_corpus_hash(const rpp_corpus* corpus, char** hash);
RPP_API void rpp_corpus_free(rpp_corpus* corpus);

/* ---- teacher ---- */
RPP_API rpp_status rpp_teacher_pretrain(const rpp_config* cfg, const rpp_corpus* corpus, rpp_log_fn log, void* user,
                                        rpp_teacher** out);
RPP_API rpp_status rpp_teacher_load(const char* path, rpp_teacher** out);
RPP_API rpp_status rpp_teacher_save(const rpp_teacher* teacher, const char* path);
RPP_API void rpp_teacher_free(rpp_teacher* teacher);

/* ---- student: frozen backbone plus prompts ---- */
/* Pretrains the frozen backbone and initializes prompts from the config. */
RPP_API rpp_status rpp_student_create(const rpp_config* cfg, const rpp_corpus* corpus, rpp_student** out);
RPP_API rpp_status rpp_student_load(const char* path, rpp_student** out);
RPP_API rpp_status rpp_student_save(const rpp_student* student, const char* path);
RPP_API rpp_status rpp_student_hash(const rpp_student* student, char** backbone_hash, char** prompt_hash);
RPP_API void rpp_student_free(rpp_student* student);

typedef struct rpp_train_options {
  const char* metrics_path;    /* JSON line per step; NULL disables */
  const char* checkpoint_dir;  /* epoch_<n>.ckpt per epoch; NULL disables */
  const char* resume_path;     /* checkpoint to continue from; NULL starts fresh */
  uint64_t stop_after_step;    /* 0 runs to completion */
  const char* stop_checkpoint; /* written when stopping early */
  rpp_log_fn log;
  void* user;
} rpp_train_options;

/* Trains the student's prompts in place. `teacher` may be NULL when train.lambda = 0. */
RPP_API rpp_status rpp_student_train(rpp_student* student, const rpp_config* cfg, const rpp_corpus* corpus,
                                     const rpp_teacher* teacher, const rpp_train_options* options);

/* ---- evaluation ----
 * protocol: "top1" | "zero-shot" | "base-to-new" | "few-shot".
 * table and plot may be NULL; plot is set only for "few-shot". */
RPP_API rpp_status rpp_eval(const rpp_student* student, const rpp_config* cfg, const rpp_corpus* corpus,
                            const char* protocol, char** report_json, char** table, char** plot);

/* ---- verification ----
 * check: "grad-check" | "identities" | "unbiasedness" | "underfit" | "transfer" | "sweep".
 * corpus, teacher and student may be NULL; the trend checks then build
 * them from the config. The report is written even when the check fails,
 * in which case RPP_ERR_ASSERTION is returned. */
RPP_API rpp_status rpp_verify(const rpp_config* cfg, const char* check, const rpp_corpus* corpus,
                              const rpp_teacher* teacher, const rpp_student* student, rpp_log_fn log, void* user,
                              char** report_json);

/* FNV-1a 64 of a file's bytes, hex encoded. */
RPP_API rpp_status rpp_file_hash(const char* path, char** hash);

#ifdef __cplusplus
}
#endif

#endif /* RPP_RPP_H */
