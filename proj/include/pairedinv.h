/* C API for the pairedinv pipeline: opaque context + error codes.
 *
 * Typical use:
 *   pinv_ctx* ctx = pinv_ctx_open("desk.json");
 *   pinv_ctx_set(ctx, "out_dir", "out");
 *   int rc = pinv_run(ctx, "gen");
 *   if (rc != PINV_OK) fprintf(stderr, "%s\n", pinv_last_error());
 *   pinv_ctx_close(ctx);
 */
#ifndef PAIREDINV_H
#define PAIREDINV_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define PINV_OK 0
#define PINV_ERR_CONFIG 2  /* config / validation problem */
#define PINV_ERR_RUNTIME 3 /* runtime / numeric failure */

typedef struct pinv_ctx pinv_ctx;

/* Parse a JSON run configuration. Pass NULL for an all-defaults context
 * (sufficient for the img subcommand). Returns NULL on error; see
 * pinv_last_error(). */
pinv_ctx* pinv_ctx_open(const char* config_path);
void pinv_ctx_close(pinv_ctx* ctx);

/* Override a context option. Keys: "out_dir", "data_dir", "checkpoint",
 * "seed", "sample", "input", "tensor", "threads". Returns PINV_OK or
 * PINV_ERR_CONFIG. */
int pinv_ctx_set(pinv_ctx* ctx, const char* key, const char* value);

/* Run one subcommand: "gen", "train", "infer", "invert", "suite", "ood",
 * "bounds", or "img". Returns PINV_OK, PINV_ERR_CONFIG, or PINV_ERR_RUNTIME. */
int pinv_run(pinv_ctx* ctx, const char* subcommand);

/* Message describing the most recent failure on this thread. */
const char* pinv_last_error(void);

/* PDE forward-solver call accounting (gradient evaluations included). */
uint64_t pinv_solver_calls(void);
void pinv_reset_solver_calls(void);

const char* pinv_version(void);

#ifdef __cplusplus
}
#endif

#endif /* PAIREDINV_H */
