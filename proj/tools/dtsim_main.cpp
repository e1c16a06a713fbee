// Command-line front end; links only the C API.
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>

#include "CLI11.hpp"
#include "dtsim.h"

namespace {

struct CtxDeleter {
  void operator()(dtsim_ctx* c) const { dtsim_ctx_free(c); }
};

int finish(dtsim_ctx* ctx, int rc, const std::string& command) {
  if (rc == DTSIM_OK) {
    std::printf("%s: ok\n", command.c_str());
  } else {
    std::fprintf(stderr, "%s: error (%d): %s\n", command.c_str(), rc,
                 dtsim_last_error(ctx));
  }
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dtsim - differentiable mesoscopic traffic simulation"};
  app.require_subcommand(1);

  std::string config_path, out_dir, params_file;
  std::uint64_t seed = 0;
  bool have_seed = false;

  auto add_common = [&](CLI::App* cmd, bool config_required) {
    auto* copt = cmd->add_option("--config", config_path, "run configuration file");
    if (config_required) copt->required();
    cmd->add_option("--out", out_dir, "output directory override");
    cmd->add_option("--seed", seed, "root seed override")
        ->each([&](const std::string&) { have_seed = true; });
    return cmd;
  };

  auto* synthesize = add_common(
      app.add_subcommand("synthesize",
                         "sample ground truth and write noisy observations"),
      true);
  auto* calibrate = add_common(
      app.add_subcommand("calibrate",
                         "fit behavioral parameters to observed counts"),
      true);
  calibrate->add_option("--params", params_file,
                        "initial parameter file (resume)");
  auto* nowcast = add_common(
      app.add_subcommand("nowcast", "forward forecasts over several horizons"),
      true);
  nowcast->add_option("--params", params_file, "parameter file");
  auto* control = add_common(
      app.add_subcommand("control", "optimize link costs toward a target count"),
      true);
  control->add_option("--params", params_file, "parameter file");
  auto* tg_demo = add_common(
      app.add_subcommand("tg-demo", "two-link trajectory-grafting demonstration"),
      false);
  auto* gradcheck = add_common(
      app.add_subcommand("gradcheck",
                         "finite-difference check of end-to-end gradients"),
      false);

  CLI11_PARSE(app, argc, argv);

  std::unique_ptr<dtsim_ctx, CtxDeleter> ctx(dtsim_ctx_new());
  if (!ctx) {
    std::fprintf(stderr, "failed to allocate context\n");
    return DTSIM_ERR;
  }

  if (!config_path.empty()) {
    const int rc = dtsim_load_config(ctx.get(), config_path.c_str());
    if (rc != DTSIM_OK) return finish(ctx.get(), rc, "load-config");
  }
  if (have_seed) dtsim_set_seed(ctx.get(), seed);
  if (!out_dir.empty()) dtsim_set_out_dir(ctx.get(), out_dir.c_str());
  if (!params_file.empty()) dtsim_set_params_file(ctx.get(), params_file.c_str());

  if (synthesize->parsed())
    return finish(ctx.get(), dtsim_run_synthesize(ctx.get()), "synthesize");
  if (calibrate->parsed())
    return finish(ctx.get(), dtsim_run_calibrate(ctx.get()), "calibrate");
  if (nowcast->parsed())
    return finish(ctx.get(), dtsim_run_nowcast(ctx.get()), "nowcast");
  if (control->parsed())
    return finish(ctx.get(), dtsim_run_control(ctx.get()), "control");
  if (tg_demo->parsed())
    return finish(ctx.get(), dtsim_run_tg_demo(ctx.get()), "tg-demo");
  if (gradcheck->parsed())
    return finish(ctx.get(), dtsim_run_gradcheck(ctx.get()), "gradcheck");
  return DTSIM_ERR;
}
