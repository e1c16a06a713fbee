/* C API for the dtsim differentiable traffic simulator.
 *
 * All functions operate on an opaque context built from a run
 * configuration file. Every entry point returns DTSIM_OK on success or an
 * error code; dtsim_last_error() describes the most recent failure on the
 * same context.
 */
#ifndef DTSIM_H
#define DTSIM_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define DTSIM_OK 0
#define DTSIM_ERR 1         /* unexpected runtime failure */
#define DTSIM_ERR_CONFIG 2  /* bad or inconsistent configuration */
#define DTSIM_ERR_NUMERIC 3 /* optimization diverged */

typedef struct dtsim_ctx dtsim_ctx;

const char* dtsim_version(void);

dtsim_ctx* dtsim_ctx_new(void);
void dtsim_ctx_free(dtsim_ctx* ctx);

/* Message for the most recent failing call on ctx; empty string if none. */
const char* dtsim_last_error(const dtsim_ctx* ctx);

/* Load a sectioned key-value configuration file. Relative paths inside the
 * file resolve against its directory. */
int dtsim_load_config(dtsim_ctx* ctx, const char* path);

/* Overrides applied after the config is loaded. */
int dtsim_set_seed(dtsim_ctx* ctx, uint64_t seed);
int dtsim_set_out_dir(dtsim_ctx* ctx, const char* dir);
/* Parameter file consumed by nowcast/control, or the warm start for
 * calibrate. Pass NULL or "" to clear. */
int dtsim_set_params_file(dtsim_ctx* ctx, const char* path);

/* Pipeline commands. Each writes its outputs under the configured output
 * directory. tg_demo runs a built-in scenario and only needs an output
 * directory (a loaded config is optional). */
int dtsim_run_synthesize(dtsim_ctx* ctx);
int dtsim_run_calibrate(dtsim_ctx* ctx);
int dtsim_run_nowcast(dtsim_ctx* ctx);
int dtsim_run_control(dtsim_ctx* ctx);
int dtsim_run_tg_demo(dtsim_ctx* ctx);
int dtsim_run_gradcheck(dtsim_ctx* ctx);

#ifdef __cplusplus
}
#endif

#endif /* DTSIM_H */
