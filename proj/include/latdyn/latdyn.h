/* latdyn: meta-learned structure-preserving dynamics.
 *
 * C interface to the experiment engine. All functions return a status code
 * (LD_OK or an error class that doubles as the CLI exit code); string output
 * goes through caller-provided buffers. Handles are opaque and must be
 * released with their destroy function. The library is thread-compatible:
 * one handle must not be used from two threads at once, and ld_last_error
 * reports per-thread messages.
 */

#ifndef LATDYN_LATDYN_H
#define LATDYN_LATDYN_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

enum {
  LD_OK = 0,
  LD_ERR_CONFIG = 2,  /* invalid configuration or usage */
  LD_ERR_DATA = 3,    /* missing/mismatched datasets, checkpoints, files */
  LD_ERR_NUMERIC = 4, /* numerical failure (blowup, non-finite loss) */
};

typedef struct ld_config ld_config;

/* Library version string, e.g. "0.1.0". */
const char* ld_version(void);

/* Message for the most recent failing call on this thread. */
const char* ld_last_error(void);

/* Fresh configuration with the given preset ("paper" or "desk"). */
int ld_config_create(const char* preset, ld_config** out);
void ld_config_destroy(ld_config* cfg);

/* Load a JSON config file on top of the current values. */
int ld_config_load_file(ld_config* cfg, const char* path);

/* Dotted-key override, e.g. ("meta.n_out", "1500") or ("method", "ro"). */
int ld_config_set(ld_config* cfg, const char* key, const char* value);

/* Resolved config as pretty JSON. Writes up to cap bytes including the
 * terminator; *needed receives the full length (excluding terminator). */
int ld_config_print(const ld_config* cfg, char* buf, size_t cap, size_t* needed);

/* Experiment verbs. Paths and scale come from the config. */
int ld_run_generate(ld_config* cfg);
int ld_run_train(ld_config* cfg);
int ld_run_evaluate(ld_config* cfg);
int ld_run_export_field(ld_config* cfg, const char* out_path);

/* Reproduce one benchmark table ("1","2","3","4","6","7","8","9"); the
 * rendered table is written like ld_config_print when buf is non-NULL. */
int ld_run_reproduce(ld_config* cfg, const char* table_id, char* buf, size_t cap, size_t* needed);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* LATDYN_LATDYN_H */
