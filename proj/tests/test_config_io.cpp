#include "dtsim/config.hpp"

#include "doctest.h"
#include "dtsim/pipeline.hpp"

using namespace dtsim;

namespace {

const char* kConfig = R"(# example run configuration
[network]
tntp_file = "data/net.tntp"
length_unit_scale = 1000.0

[scenario]
seed = 7
vehicles = 120
platoon_size = 4
horizon_min = 60
observe_window_min = 30

[observation]
interval_s = 300
noise_frac = 0.05
coverage = 0.5

[optimizer]
lr = 0.2
noise_mode = "frozen"

[nowcast]
horizons_min = [5, 10]   # short demo horizons

[run]
out_dir = "out"
)";

}  // namespace

TEST_CASE("key-value file parsing") {
  const KvFile f = KvFile::parse(kConfig);
  CHECK(f.num("scenario", "seed") == 7);
  CHECK(f.str("network", "tntp_file") == "data/net.tntp");
  CHECK(f.str_or("optimizer", "noise_mode", "resample") == "frozen");
  CHECK(f.num_or("optimizer", "weight_decay", 1e-5) == 1e-5);
  CHECK(f.nums_or("nowcast", "horizons_min", {}) ==
        std::vector<double>{5, 10});
  CHECK_FALSE(f.has("missing", "key"));

  CHECK_THROWS_AS(KvFile::parse("[sec\nkey = 1\n"), ConfigError);
  CHECK_THROWS_AS(KvFile::parse("just text\n"), ConfigError);
  CHECK_THROWS_AS(KvFile::parse("key = \"open\n"), ConfigError);
  CHECK_THROWS_AS(KvFile::parse("key = [1, x]\n"), ConfigError);
}

TEST_CASE("run config validation") {
  const RunConfig c = run_config_from_text(kConfig, "/base");
  CHECK(c.tntp_file == "/base/data/net.tntp");
  CHECK(c.out_dir == "/base/out");
  CHECK(c.seed == 7);
  CHECK(c.vehicles == 120);
  CHECK(c.platoon_size == 4);
  CHECK_FALSE(c.resample_noise);
  CHECK(c.lr == 0.2);

  auto expect_reject = [](const std::string& text, const char* needle) {
    CHECK_THROWS_WITH_AS(run_config_from_text(text, ""),
                         doctest::Contains(needle), ConfigError);
  };
  expect_reject("[observation]\ncoverage = 1.5\n", "coverage");
  expect_reject("[observation]\nnoise_frac = -0.2\n", "noise_frac");
  expect_reject("[scenario]\nvehicles = 10\nplatoon_size = 3\n", "divisible");
  expect_reject("[scenario]\nhorizon_min = 10\nobserve_window_min = 30\n",
                "observe_window_min");
  expect_reject("[optimizer]\nnoise_mode = \"sometimes\"\n", "noise_mode");
  expect_reject("[control]\nreduction = 0\n", "reduction");
}

TEST_CASE("count series CSV round trip") {
  CountSeries s;
  s.link_ids = {0, 3, 5};
  s.interval_s = 300;
  s.values = {{0, 1.5, 2}, {4, 1.5, 7.25}};
  const std::string csv = series_to_csv(s);
  const CountSeries r = series_from_csv(csv);
  CHECK(r.link_ids == s.link_ids);
  CHECK(r.interval_s == s.interval_s);
  CHECK(r.values == s.values);

  CHECK_THROWS(series_from_csv("link_id,t_seconds,cumulative_count\n1,2\n"));
  CHECK_THROWS(series_from_csv(""));
}

TEST_CASE("config hash is stable") {
  CHECK(fnv1a64("abc") == fnv1a64("abc"));
  CHECK(fnv1a64("abc") != fnv1a64("abd"));
}
