#include "dtsim.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("dtsim_capi_" + std::to_string(counter()++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

const char* kTinyNet = R"(<NUMBER OF NODES> 2
<NUMBER OF LINKS> 2
<END OF METADATA>
	1	2	1000	500	1	0.15	4	0	0	1	;
	2	1	1000	500	1	0.15	4	0	0	1	;
)";

std::string tiny_config(const fs::path& dir) {
  return std::string(R"([network]
tntp_file = "net.tntp"
length_unit_scale = 1.0
virtual_link_length = 400.0

[scenario]
seed = 11
vehicles = 12
platoon_size = 1
truth_platoon_size = 1
horizon_min = 4
observe_window_min = 2

[observation]
interval_s = 60
noise_frac = 0.1
coverage = 0.8

[optimizer]
max_iterations = 3
patience = 2

[run]
out_dir = ")") +
         (dir / "out").string() + "\"\n";
}

}  // namespace

TEST_CASE("version and error handling") {
  CHECK(std::string(dtsim_version()) == "1.0.0");

  dtsim_ctx* ctx = dtsim_ctx_new();
  REQUIRE(ctx != nullptr);
  CHECK(std::string(dtsim_last_error(ctx)).empty());

  // missing config file is a config error with a message
  CHECK(dtsim_load_config(ctx, "/nonexistent/path.toml") == DTSIM_ERR_CONFIG);
  CHECK(std::string(dtsim_last_error(ctx)).find("cannot open") !=
        std::string::npos);

  // commands without a loaded config refuse to run
  CHECK(dtsim_run_synthesize(ctx) == DTSIM_ERR_CONFIG);
  dtsim_ctx_free(ctx);
  dtsim_ctx_free(nullptr);  // harmless
}

TEST_CASE("invalid configuration is rejected with field context") {
  TempDir tmp;
  write(tmp.path / "bad.toml", "[observation]\ncoverage = 7\n");
  dtsim_ctx* ctx = dtsim_ctx_new();
  CHECK(dtsim_load_config(ctx, (tmp.path / "bad.toml").string().c_str()) ==
        DTSIM_ERR_CONFIG);
  CHECK(std::string(dtsim_last_error(ctx)).find("coverage") !=
        std::string::npos);
  dtsim_ctx_free(ctx);
}

TEST_CASE("synthesize pipeline through the C API is byte-reproducible") {
  TempDir tmp;
  write(tmp.path / "net.tntp", kTinyNet);
  write(tmp.path / "run.toml", tiny_config(tmp.path));

  auto run_once = [&](const fs::path& out) {
    dtsim_ctx* ctx = dtsim_ctx_new();
    REQUIRE(dtsim_load_config(ctx, (tmp.path / "run.toml").string().c_str()) ==
            DTSIM_OK);
    REQUIRE(dtsim_set_out_dir(ctx, out.string().c_str()) == DTSIM_OK);
    const int rc = dtsim_run_synthesize(ctx);
    INFO(dtsim_last_error(ctx));
    REQUIRE(rc == DTSIM_OK);
    dtsim_ctx_free(ctx);
  };
  run_once(tmp.path / "a");
  run_once(tmp.path / "b");

  for (const char* f :
       {"network.json", "truth_params.json", "truth_counts.csv",
        "observations.csv", "observed_links.json", "synthesize_manifest.json"}) {
    CHECK(fs::exists(tmp.path / "a" / f));
    CHECK(slurp(tmp.path / "a" / f) == slurp(tmp.path / "b" / f));
  }
  // a different seed changes the outputs
  dtsim_ctx* ctx = dtsim_ctx_new();
  REQUIRE(dtsim_load_config(ctx, (tmp.path / "run.toml").string().c_str()) ==
          DTSIM_OK);
  dtsim_set_seed(ctx, 999);
  dtsim_set_out_dir(ctx, (tmp.path / "c").string().c_str());
  REQUIRE(dtsim_run_synthesize(ctx) == DTSIM_OK);
  CHECK(slurp(tmp.path / "a" / "truth_params.json") !=
        slurp(tmp.path / "c" / "truth_params.json"));
  dtsim_ctx_free(ctx);
}

TEST_CASE("calibrate and nowcast run on the synthesized outputs") {
  TempDir tmp;
  write(tmp.path / "net.tntp", kTinyNet);
  std::string cfg = tiny_config(tmp.path);
  cfg += "\n[nowcast]\nhorizons_min = [1, 2]\n";
  write(tmp.path / "run.toml", cfg);

  dtsim_ctx* ctx = dtsim_ctx_new();
  REQUIRE(dtsim_load_config(ctx, (tmp.path / "run.toml").string().c_str()) ==
          DTSIM_OK);
  REQUIRE(dtsim_run_synthesize(ctx) == DTSIM_OK);
  int rc = dtsim_run_calibrate(ctx);
  INFO(dtsim_last_error(ctx));
  REQUIRE(rc == DTSIM_OK);
  CHECK(fs::exists(tmp.path / "out" / "calibrated_params.json"));
  CHECK(fs::exists(tmp.path / "out" / "calibration_report.json"));

  rc = dtsim_run_nowcast(ctx);
  INFO(dtsim_last_error(ctx));
  REQUIRE(rc == DTSIM_OK);
  CHECK(fs::exists(tmp.path / "out" / "nowcast_counts.csv"));
  CHECK(fs::exists(tmp.path / "out" / "nowcast_report.json"));
  dtsim_ctx_free(ctx);
}

TEST_CASE("tg demo through the C API") {
  TempDir tmp;
  dtsim_ctx* ctx = dtsim_ctx_new();
  // no config: an explicit output directory is required
  CHECK(dtsim_run_tg_demo(ctx) == DTSIM_ERR_CONFIG);
  REQUIRE(dtsim_set_out_dir(ctx, (tmp.path / "tg").string().c_str()) ==
          DTSIM_OK);
  REQUIRE(dtsim_run_tg_demo(ctx) == DTSIM_OK);
  CHECK(fs::exists(tmp.path / "tg" / "tg_report.json"));
  CHECK(fs::exists(tmp.path / "tg" / "tg_losses.csv"));
  dtsim_ctx_free(ctx);
}
