#include "dtsim.h"

#include <string>

#include "dtsim/config.hpp"
#include "dtsim/optimization.hpp"
#include "dtsim/pipeline.hpp"

struct dtsim_ctx {
  dtsim::RunConfig config;
  bool config_loaded = false;
  bool seed_override = false;
  std::uint64_t seed = 0;
  std::string out_dir_override;
  std::string params_file;
  std::string last_error;
};

namespace {

dtsim::RunConfig effective_config(const dtsim_ctx* ctx) {
  dtsim::RunConfig c = ctx->config;
  if (ctx->seed_override) c.seed = ctx->seed;
  if (!ctx->out_dir_override.empty()) c.out_dir = ctx->out_dir_override;
  return c;
}

template <typename Fn>
int guarded(dtsim_ctx* ctx, Fn&& fn) {
  if (!ctx) return DTSIM_ERR;
  try {
    ctx->last_error.clear();
    fn();
    return DTSIM_OK;
  } catch (const dtsim::ConfigError& e) {
    ctx->last_error = e.what();
    return DTSIM_ERR_CONFIG;
  } catch (const dtsim::DivergenceError& e) {
    ctx->last_error = e.what();
    return DTSIM_ERR_NUMERIC;
  } catch (const std::exception& e) {
    ctx->last_error = e.what();
    return DTSIM_ERR;
  } catch (...) {
    ctx->last_error = "unknown error";
    return DTSIM_ERR;
  }
}

int require_config(dtsim_ctx* ctx) {
  if (!ctx) return DTSIM_ERR;
  if (!ctx->config_loaded) {
    ctx->last_error = "no configuration loaded";
    return DTSIM_ERR_CONFIG;
  }
  return DTSIM_OK;
}

}  // namespace

extern "C" {

const char* dtsim_version(void) { return dtsim::kVersion; }

dtsim_ctx* dtsim_ctx_new(void) { return new (std::nothrow) dtsim_ctx(); }

void dtsim_ctx_free(dtsim_ctx* ctx) { delete ctx; }

const char* dtsim_last_error(const dtsim_ctx* ctx) {
  return ctx ? ctx->last_error.c_str() : "null context";
}

int dtsim_load_config(dtsim_ctx* ctx, const char* path) {
  return guarded(ctx, [&] {
    if (!path) throw dtsim::ConfigError("config path is null");
    ctx->config = dtsim::load_run_config(path);
    ctx->config_loaded = true;
  });
}

int dtsim_set_seed(dtsim_ctx* ctx, uint64_t seed) {
  return guarded(ctx, [&] {
    ctx->seed = seed;
    ctx->seed_override = true;
  });
}

int dtsim_set_out_dir(dtsim_ctx* ctx, const char* dir) {
  return guarded(ctx, [&] {
    if (!dir || !*dir) throw dtsim::ConfigError("output directory is empty");
    ctx->out_dir_override = dir;
  });
}

int dtsim_set_params_file(dtsim_ctx* ctx, const char* path) {
  return guarded(ctx, [&] { ctx->params_file = path ? path : ""; });
}

int dtsim_run_synthesize(dtsim_ctx* ctx) {
  if (int rc = require_config(ctx); rc != DTSIM_OK) return rc;
  return guarded(ctx, [&] { dtsim::cmd_synthesize(effective_config(ctx)); });
}

int dtsim_run_calibrate(dtsim_ctx* ctx) {
  if (int rc = require_config(ctx); rc != DTSIM_OK) return rc;
  return guarded(ctx, [&] {
    dtsim::cmd_calibrate(effective_config(ctx), ctx->params_file);
  });
}

int dtsim_run_nowcast(dtsim_ctx* ctx) {
  if (int rc = require_config(ctx); rc != DTSIM_OK) return rc;
  return guarded(ctx, [&] {
    dtsim::cmd_nowcast(effective_config(ctx), ctx->params_file);
  });
}

int dtsim_run_control(dtsim_ctx* ctx) {
  if (int rc = require_config(ctx); rc != DTSIM_OK) return rc;
  return guarded(ctx, [&] {
    dtsim::cmd_control(effective_config(ctx), ctx->params_file);
  });
}

int dtsim_run_tg_demo(dtsim_ctx* ctx) {
  return guarded(ctx, [&] {
    std::string out = ctx->out_dir_override;
    if (out.empty() && ctx->config_loaded) out = ctx->config.out_dir;
    if (out.empty()) throw dtsim::ConfigError("tg-demo needs an output directory");
    dtsim::cmd_tg_demo(out);
  });
}

int dtsim_run_gradcheck(dtsim_ctx* ctx) {
  return guarded(ctx, [&] {
    dtsim::RunConfig c;
    if (ctx->config_loaded) c = effective_config(ctx);
    else {
      if (ctx->seed_override) c.seed = ctx->seed;
      if (!ctx->out_dir_override.empty()) c.out_dir = ctx->out_dir_override;
      else throw dtsim::ConfigError("gradcheck needs a config or an output directory");
    }
    dtsim::cmd_gradcheck(c);
  });
}

}  // extern "C"
