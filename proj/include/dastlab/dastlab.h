/* C interface to the report-generation toolkit. Every function returns a
 * dl_status; on failure dl_last_error() holds a one-line message for the
 * calling thread. Handles are opaque and must be released with their
 * matching *_free function. */
#ifndef DASTLAB_DASTLAB_H
#define DASTLAB_DASTLAB_H

#include <stddef.h>
#include <stdint.h>

#if defined(DASTLAB_BUILDING)
#define DL_API __attribute__((visibility("default")))
#else
#define DL_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum dl_status {
  DL_OK = 0,
  DL_ERR_ARGUMENT = 1,  /* bad argument or config value */
  DL_ERR_IO = 2,        /* file missing, unreadable or unwritable */
  DL_ERR_FORMAT = 3,    /* corrupt checkpoint, index or dataset */
  DL_ERR_NUMERIC = 4,   /* non-finite value during training */
  DL_ERR_STATE = 5,     /* operation not valid for the given inputs */
  DL_ERR_INTERNAL = 6,
} dl_status;

typedef struct dl_config dl_config;
typedef struct dl_index dl_index;

DL_API const char* dl_last_error(void);
DL_API const char* dl_version(void);

/* ---- training configuration ---- */
DL_API dl_status dl_config_new(dl_config** out);
DL_API dl_status dl_config_load(const char* path, dl_config** out);
DL_API dl_status dl_config_set(dl_config* cfg, const char* key, const char* value);
DL_API void dl_config_free(dl_config* cfg);

/* ---- synthetic data ---- */
DL_API dl_status dl_gen_data(size_t n, size_t image_size, size_t patch_size, uint64_t seed, const char* out_dir);

/* ---- training ---- */
/* Writes the checkpoint and a per-step JSONL log at <out_ckpt>.log.jsonl. */
DL_API dl_status dl_train_stage1(const char* data_dir, const dl_config* cfg, const char* out_ckpt);
DL_API dl_status dl_build_index(const char* data_dir, const char* stage1_ckpt, const char* out_index);
/* index_path may be NULL when retrieval is disabled in cfg. */
DL_API dl_status dl_train_stage2(const char* data_dir, const char* stage1_ckpt, const char* index_path,
                                 const dl_config* cfg, const char* out_ckpt);

/* ---- inference and evaluation ---- */
/* split_path is a manifest (.jsonl) or a dataset directory (test split). */
DL_API dl_status dl_generate(const char* split_path, const char* ckpt, const char* index_path, const char* out_jsonl);
/* ref_path is a dataset directory, a manifest, or a JSONL with "reference". */
DL_API dl_status dl_evaluate(const char* hyp_jsonl, const char* ref_path, const char* out_json);

/* ---- exemplar index ---- */
DL_API dl_status dl_index_load(const char* path, dl_index** out);
DL_API size_t dl_index_size(const dl_index* index);
/* Top-k neighbours of a stored study, excluding itself, as JSON lines
 * {"rank", "study_id", "score"}. The returned string is owned by the caller
 * and released with dl_string_free. */
DL_API dl_status dl_index_query(const dl_index* index, const char* study_id, double lambda, size_t k, char** out_json);
DL_API void dl_index_free(dl_index* index);
DL_API void dl_string_free(char* s);

#ifdef __cplusplus
}
#endif

#endif
