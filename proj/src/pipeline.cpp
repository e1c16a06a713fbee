#include "dtsim/pipeline.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <tuple>

#include "json.hpp"

namespace dtsim {

namespace {

/// Fixed evaluation noise lane, distinct from both the ground-truth run
/// (iteration 0) and the training iterations (1..max_iterations).
constexpr std::uint64_t kEvalIteration = 1000000007ULL;

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create directory: " + dir);
}

void write_manifest(const RunConfig& c, const std::string& command,
                    const std::vector<std::string>& outputs) {
  nlohmann::json j;
  j["command"] = command;
  j["version"] = kVersion;
  j["seed"] = c.seed;
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(fnv1a64(c.config_text)));
  j["config_hash"] = hash;
  j["outputs"] = outputs;
  write_text_file(c.out_dir + "/" + command + "_manifest.json", j.dump(2) + "\n");
}

void write_timings(const RunConfig& c, const std::string& command,
                   const std::vector<std::pair<std::string, double>>& times) {
  nlohmann::json j;
  j["command"] = command;
  for (const auto& [k, v] : times) j["wall_seconds"][k] = v;
  write_text_file(c.out_dir + "/" + command + "_timings.json", j.dump(2) + "\n");
}

CountSeries slice_intervals(const CountSeries& s, int k0, int k1) {
  CountSeries out;
  out.link_ids = s.link_ids;
  out.interval_s = s.interval_s;
  for (int k = k0; k < k1 && k < s.n_intervals(); ++k)
    out.values.push_back(s.values[k]);
  return out;
}

double linear_fit_r2(const std::vector<double>& x,
                     const std::vector<double>& y) {
  const std::size_t n = x.size();
  if (n < 2) return 0.0;
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 1.0;
  return (sxy * sxy) / (sxx * syy);
}

nlohmann::json metrics_json(const Metrics& m) {
  nlohmann::json j;
  j["mae"] = m.mae;
  j["n_pairs"] = m.n_pairs;
  if (m.r_defined)
    j["pearson_r"] = m.pearson_r;
  else
    j["pearson_r"] = nullptr;
  return j;
}

}  // namespace

std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << content;
}

std::string series_to_csv(const CountSeries& s) {
  std::string out = "link_id,t_seconds,cumulative_count\n";
  for (int k = 0; k < s.n_intervals(); ++k) {
    const int t = (k + 1) * s.interval_s;
    for (std::size_t p = 0; p < s.link_ids.size(); ++p) {
      out += std::to_string(s.link_ids[p]);
      out += ',';
      out += std::to_string(t);
      out += ',';
      out += fmt_g(s.values[k][p]);
      out += '\n';
    }
  }
  return out;
}

CountSeries series_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("count CSV: empty file");
  CountSeries s;
  std::vector<int> times;
  std::vector<std::tuple<int, int, double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    int link, t;
    double v;
    if (std::sscanf(line.c_str(), "%d,%d,%lf", &link, &t, &v) != 3)
      throw std::runtime_error("count CSV: malformed row: " + line);
    rows.emplace_back(t, link, v);
  }
  std::sort(rows.begin(), rows.end());
  for (const auto& [t, link, v] : rows) {
    if (times.empty() || times.back() != t) {
      times.push_back(t);
      s.values.emplace_back();
    }
    if (times.size() == 1) s.link_ids.push_back(link);
    s.values.back().push_back(v);
  }
  if (times.empty()) throw std::runtime_error("count CSV: no data rows");
  s.interval_s = times[0];
  for (std::size_t k = 0; k < times.size(); ++k) {
    if (times[k] != static_cast<int>(k + 1) * s.interval_s)
      throw std::runtime_error("count CSV: irregular interval grid");
    if (s.values[k].size() != s.link_ids.size())
      throw std::runtime_error("count CSV: ragged link sets per interval");
  }
  return s;
}

Network build_network(const RunConfig& c) {
  if (c.tntp_file.empty())
    throw ConfigError("[network] tntp_file is required for this command");
  Network phys = parse_tntp_file(c.tntp_file, c.length_unit_scale);
  return attach_virtual_links(phys, RngStream(c.seed), c.virtual_link_length);
}

Scenario build_scenario(const RunConfig& c, const Network& net, int platoon,
                        double horizon_min) {
  Scenario s;
  s.net = net;
  s.cfg.delta_n = platoon;
  s.n_vehicles = c.vehicles;
  s.obs_interval_s = c.interval_s;
  try {
    s.horizon_steps = steps_for_minutes(s.cfg, horizon_min);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  const double spi = c.interval_s / s.cfg.dt();
  if (std::abs(spi - std::round(spi)) > 1e-9 || spi < 1.0)
    throw ConfigError(
        "[observation] interval_s must be a positive multiple of the time step");
  fit_inflow_queues(s);
  return s;
}

void cmd_synthesize(const RunConfig& c) {
  ensure_dir(c.out_dir);
  const RngStream root(c.seed);
  const Network net = build_network(c);
  const ParamRanges ranges;
  const LinkParams truth = sample_parameters(net, ranges, root, false);

  Scenario sc = build_scenario(c, net, c.truth_platoon_size, c.horizon_min);
  const Trajectory tr = simulate_forward(sc, truth, root);

  const auto phys = net.links_of_kind(LinkKind::Physical);
  const CountSeries truth_series =
      tr.series(phys, c.interval_s, sc.cfg.dt(), sc.cfg.delta_n);
  const int window_k =
      static_cast<int>(std::llround(c.observe_window_min * 60.0 / c.interval_s));
  const CountSeries window = slice_intervals(truth_series, 0, window_k);
  const auto [obs, observed_ids] =
      synthesize_observations(window, c.noise_frac, c.coverage, root);

  write_text_file(c.out_dir + "/network.json", network_to_json(net, &truth));
  write_text_file(c.out_dir + "/truth_params.json", params_to_json(truth));
  write_text_file(c.out_dir + "/truth_counts.csv", series_to_csv(truth_series));
  write_text_file(c.out_dir + "/observations.csv", series_to_csv(obs));
  write_text_file(c.out_dir + "/observed_links.json",
                  nlohmann::json(observed_ids).dump() + "\n");
  write_manifest(c, "synthesize",
                 {"network.json", "truth_params.json", "truth_counts.csv",
                  "observations.csv", "observed_links.json"});
  write_timings(c, "synthesize", {{"simulate", tr.wall_seconds}});
}

void cmd_calibrate(const RunConfig& c, const std::string& init_params) {
  ensure_dir(c.out_dir);
  const RngStream root(c.seed);
  const Network net = build_network(c);
  const CountSeries obs =
      series_from_csv(read_text_file(c.out_dir + "/observations.csv"));

  Scenario sc = build_scenario(c, net, c.platoon_size, c.observe_window_min);

  OptimizeConfig ocfg;
  ocfg.adam.lr = c.lr;
  ocfg.adam.weight_decay = c.weight_decay;
  ocfg.patience = c.patience;
  ocfg.max_iterations = c.max_iterations;
  ocfg.resample_noise = c.resample_noise;

  LinkParams init;
  const bool resume = !init_params.empty();
  if (resume) init = params_from_json(read_text_file(init_params));
  const ParamRanges ranges;
  const CalibrationResult r =
      calibrate(sc, obs, ranges, ocfg, root, resume ? &init : nullptr);

  write_text_file(c.out_dir + "/calibrated_params.json",
                  params_to_json(r.best_params));

  nlohmann::json rep;
  rep["best_loss"] = r.best_loss;
  rep["best_iteration"] = r.best_iteration;
  rep["iterations"] = r.iterations;
  rep["loss_curve"] = r.loss_curve;

  // Quality against the ground truth, when available.
  const std::string truth_path = c.out_dir + "/truth_counts.csv";
  if (std::filesystem::exists(truth_path)) {
    const CountSeries truth = series_from_csv(read_text_file(truth_path));
    const int window_k = static_cast<int>(
        std::llround(c.observe_window_min * 60.0 / c.interval_s));
    const CountSeries truth_window = slice_intervals(truth, 0, window_k);
    const auto phys = net.links_of_kind(LinkKind::Physical);
    ForwardOptions eval;
    eval.noise_iteration = kEvalIteration;

    const Trajectory cal_tr = simulate_forward(sc, r.best_params, root, eval);
    const CountSeries cal_series =
        cal_tr.series(phys, c.interval_s, sc.cfg.dt(), sc.cfg.delta_n);
    const LinkParams mean_params = sample_parameters(net, ranges, root, true);
    const Trajectory base_tr = simulate_forward(sc, mean_params, root, eval);
    const CountSeries base_series =
        base_tr.series(phys, c.interval_s, sc.cfg.dt(), sc.cfg.delta_n);
    rep["metrics"]["calibrated"] =
        metrics_json(count_metrics(cal_series, truth_window));
    rep["metrics"]["mean_baseline"] =
        metrics_json(count_metrics(base_series, truth_window));
  }
  write_text_file(c.out_dir + "/calibration_report.json", rep.dump(2) + "\n");
  write_manifest(c, "calibrate",
                 {"calibrated_params.json", "calibration_report.json"});
  write_timings(c, "calibrate", {{"calibrate", r.wall_seconds}});
}

void cmd_nowcast(const RunConfig& c, const std::string& params_path) {
  ensure_dir(c.out_dir);
  const RngStream root(c.seed);
  const Network net = build_network(c);
  const std::string ppath =
      params_path.empty() ? c.out_dir + "/calibrated_params.json" : params_path;
  const LinkParams params = params_from_json(read_text_file(ppath));
  const auto phys = net.links_of_kind(LinkKind::Physical);

  CountSeries truth;
  bool have_truth = false;
  const std::string truth_path = c.out_dir + "/truth_counts.csv";
  if (std::filesystem::exists(truth_path)) {
    truth = series_from_csv(read_text_file(truth_path));
    have_truth = true;
  }

  ForwardOptions eval;
  eval.noise_iteration = kEvalIteration;

  nlohmann::json rep;
  std::vector<double> horizons, walls;
  CountSeries longest;
  std::vector<std::pair<std::string, double>> times;
  for (double h : c.nowcast_horizons_min) {
    Scenario sc = build_scenario(c, net, c.platoon_size,
                                 c.observe_window_min + h);
    const Trajectory tr = simulate_forward(sc, params, root, eval);
    const CountSeries series =
        tr.series(phys, c.interval_s, sc.cfg.dt(), sc.cfg.delta_n);
    horizons.push_back(h);
    walls.push_back(tr.wall_seconds);
    times.emplace_back("horizon_" + fmt_g(h) + "_min", tr.wall_seconds);
    nlohmann::json hj;
    hj["horizon_min"] = h;
    hj["steps"] = sc.horizon_steps;
    if (have_truth) {
      const CountSeries truth_cut =
          slice_intervals(truth, 0, series.n_intervals());
      hj["metrics_vs_truth"] = metrics_json(count_metrics(series, truth_cut));
    }
    rep["horizons"].push_back(hj);
    if (series.n_intervals() >= longest.n_intervals()) longest = series;
  }
  rep["wall_seconds"] = walls;
  rep["linear_fit_r2"] = linear_fit_r2(horizons, walls);

  write_text_file(c.out_dir + "/nowcast_counts.csv", series_to_csv(longest));
  write_text_file(c.out_dir + "/nowcast_report.json", rep.dump(2) + "\n");
  write_manifest(c, "nowcast", {"nowcast_counts.csv", "nowcast_report.json"});
  write_timings(c, "nowcast", times);
}

void cmd_control(const RunConfig& c, const std::string& params_path) {
  ensure_dir(c.out_dir);
  const RngStream root(c.seed);
  const Network net = build_network(c);
  const std::string ppath =
      params_path.empty() ? c.out_dir + "/calibrated_params.json" : params_path;
  const LinkParams params = params_from_json(read_text_file(ppath));
  const auto phys = net.links_of_kind(LinkKind::Physical);

  Scenario sc = build_scenario(c, net, c.platoon_size,
                               c.observe_window_min + c.control_horizon_min);
  ForwardOptions eval;
  eval.noise_iteration = kEvalIteration;
  const Trajectory unc = simulate_forward(sc, params, root, eval);

  int target = c.control_target_link;
  if (target < 0) {
    double best = -1.0;
    for (int l : phys)
      if (unc.cum_final[l] > best) {
        best = unc.cum_final[l];
        target = l;
      }
  }
  if (target < 0 || target >= net.n_links())
    throw ConfigError("[control] target_link out of range");
  const double uncontrolled = unc.cum_final[target] * sc.cfg.delta_n;
  const double desired = uncontrolled * (1.0 - c.control_reduction);

  ControlConfig ccfg;
  ccfg.opt.adam.lr = c.lr;
  ccfg.opt.adam.weight_decay = c.weight_decay;
  ccfg.opt.patience = c.patience;
  ccfg.opt.max_iterations = c.control_max_iterations;
  ccfg.opt.resample_noise = c.resample_noise;
  ccfg.cost_floor = c.cost_floor;

  const ControlResult r =
      optimize_control(sc, params, target, desired, ccfg, root);

  LinkParams controlled = params;
  controlled.cost = r.cost;
  const Trajectory con = simulate_forward(sc, controlled, root, eval);
  const CountSeries con_series =
      con.series(phys, c.interval_s, sc.cfg.dt(), sc.cfg.delta_n);

  nlohmann::json rep;
  rep["target_link"] = target;
  rep["uncontrolled_count"] = uncontrolled;
  rep["desired_count"] = r.desired;
  rep["achieved_count"] = r.achieved;
  rep["gap_percent"] = 100.0 * r.gap_fraction;
  rep["best_loss"] = r.best_loss;
  rep["iterations"] = r.iterations;
  rep["zero_gradient_stall"] = r.zero_gradient_stall;
  rep["cost"] = r.cost;
  rep["loss_curve"] = r.loss_curve;
  write_text_file(c.out_dir + "/control_report.json", rep.dump(2) + "\n");
  write_text_file(c.out_dir + "/controlled_counts.csv",
                  series_to_csv(con_series));
  write_manifest(c, "control", {"control_report.json", "controlled_counts.csv"});
  write_timings(c, "control", {{"optimize", r.wall_seconds}});
}

TgDemoResult run_tg_demo(std::vector<std::string>* loss_csv) {
  // Two 15 m links in a chain; one agent starts at the head of the first.
  std::vector<Link> links(2);
  links[0] = {0, 0, 1, 15.0, LinkKind::Physical};
  links[1] = {1, 1, 2, 15.0, LinkKind::Physical};
  const Network net = make_network(3, links);

  Scenario sc;
  sc.net = net;
  sc.cfg.delta_n = 1;
  sc.horizon_steps = 10;
  sc.obs_interval_s = 10;
  sc.custom_init = {{0, 0.0}};

  // Observation: the agent sits at position 0 on the second link at t = 10 s.
  const LossBuilder builder = [](Tape&, const LossInputs& li) -> Tensor {
    Tensor cell = col(li.X_final, 1);
    return mul(cell, cell);
  };

  const double lr = 1e-2;
  const int iters = 150;
  TgDemoResult res;
  res.iterations = iters;

  std::vector<std::array<double, 3>> curve_with(iters), curve_without(iters);
  for (const bool with_tg : {true, false}) {
    sc.cfg.trajectory_grafting = with_tg;
    LinkParams p;
    p.u = {2.0, 1.0};
    p.kappa = {0.2, 0.2};
    p.beta = {1.0, 1.0};
    p.alpha = {1.0, 1.0};
    p.cost = {1.0, 1.0};
    double last_loss = 0.0;
    for (int it = 0; it < iters; ++it) {
      const GradResult g = simulate_gradient(sc, p, RngStream(7), builder,
                                             GradMode::FullTape);
      last_loss = g.loss;
      auto& row = with_tg ? curve_with[it] : curve_without[it];
      row = {g.loss, p.u[0], p.u[1]};
      for (int l = 0; l < 2; ++l) p.u[l] -= lr * g.grads.u[l];
    }
    if (with_tg) {
      res.u1_with = p.u[0];
      res.u2_with = p.u[1];
      res.final_loss_with = last_loss;
    } else {
      res.u1_without = p.u[0];
      res.u2_without = p.u[1];
      res.final_loss_without = last_loss;
    }
  }
  if (loss_csv) {
    loss_csv->push_back(
        "iteration,loss_with_tg,u1_with_tg,u2_with_tg,"
        "loss_without_tg,u1_without_tg,u2_without_tg");
    for (int it = 0; it < iters; ++it) {
      std::string line = std::to_string(it);
      for (double v : curve_with[it]) line += "," + fmt_g(v);
      for (double v : curve_without[it]) line += "," + fmt_g(v);
      loss_csv->push_back(line);
    }
  }
  return res;
}

void cmd_tg_demo(const std::string& out_dir) {
  ensure_dir(out_dir);
  std::vector<std::string> csv;
  const TgDemoResult r = run_tg_demo(&csv);
  nlohmann::json rep;
  rep["with_tg"] = {{"u1", r.u1_with},
                    {"u2", r.u2_with},
                    {"final_loss", r.final_loss_with}};
  rep["without_tg"] = {{"u1", r.u1_without},
                       {"u2", r.u2_without},
                       {"final_loss", r.final_loss_without}};
  rep["iterations"] = r.iterations;
  write_text_file(out_dir + "/tg_report.json", rep.dump(2) + "\n");
  std::string csv_text;
  for (const auto& l : csv) csv_text += l + "\n";
  write_text_file(out_dir + "/tg_losses.csv", csv_text);
}

namespace {

Network make_chain_network(int n_physical, double link_len, double inflow_len) {
  std::vector<Link> links;
  // boundary inflow node is n_physical + 1, outflow node n_physical + 2
  links.push_back({0, n_physical + 1, 0, inflow_len, LinkKind::VirtualInflow});
  for (int i = 0; i < n_physical; ++i)
    links.push_back({0, i, i + 1, link_len, LinkKind::Physical});
  links.push_back(
      {0, n_physical, n_physical + 2, inflow_len, LinkKind::VirtualOutflow});
  return make_network(n_physical + 3, std::move(links));
}

}  // namespace

GradcheckReport run_gradcheck(int draws, int steps, int agents, double tol,
                              std::uint64_t seed) {
  const Network net = make_chain_network(3, 300.0, 100.0);
  const int L = net.n_links();

  Scenario sc;
  sc.net = net;
  sc.cfg.delta_n = 1;
  sc.cfg.soft_choices = true;
  sc.n_vehicles = agents;
  sc.horizon_steps = steps;
  sc.obs_interval_s = steps;  // one snapshot at the end

  const LossBuilder builder = [](Tape&, const LossInputs& li) -> Tensor {
    return reduce_sum(li.cum_final, kAxisAll);
  };

  GradcheckReport rep;
  rep.draws = draws;
  const ParamRanges r;
  std::uint64_t attempt = 0;
  for (int d = 0; d < draws; ++d) {
    bool clean = false;
    double draw_max = 0.0;
    for (int tries = 0; tries < 60 && !clean; ++tries, ++rep.redraws) {
      const RngStream pr = RngStream(seed).fork(9000 + attempt++);
      LinkParams p;
      for (int l = 0; l < L; ++l) {
        p.u.push_back(pr.uniform_in(r.u_lo, r.u_hi, 0, l));
        p.kappa.push_back(pr.uniform_in(r.kappa_lo, r.kappa_hi, 1, l));
        p.beta.push_back(pr.uniform_in(r.beta_lo, r.beta_hi, 2, l));
        p.alpha.push_back(pr.uniform_in(r.alpha_lo, r.alpha_hi, 3, l));
        p.cost.push_back(pr.uniform_in(0.5, 2.0, 4, l));
      }

      // Base run: reverse-sweep gradients plus the recorded discontinuity
      // trace and branch signature.
      SurrogateTrace trace;
      sc.cfg.surrogate = &trace;
      ForwardOptions opt;
      opt.trace_branches = true;
      const GradResult g = simulate_gradient(sc, p, RngStream(seed), builder,
                                             GradMode::FullTape, opt);
      const std::uint64_t base_hash = g.branch_hash;

      // Probes evaluate the frozen-discontinuity surrogate; a draw is only
      // accepted when every probe follows the base control path.
      trace.replay = true;
      auto probe = [&](const LinkParams& pp, bool& ok) -> double {
        trace.rewind();
        try {
          const Trajectory tr = simulate_forward(sc, pp, RngStream(seed), opt);
          ok = tr.branch_hash == base_hash;
          double s = 0.0;
          for (double v : tr.cum_final) s += v;
          return s;
        } catch (const std::exception&) {
          ok = false;
          return 0.0;
        }
      };

      std::vector<std::pair<std::vector<double>*, const std::vector<double>*>>
          blocks = {{&p.u, &g.grads.u},
                    {&p.kappa, &g.grads.kappa},
                    {&p.beta, &g.grads.beta},
                    {&p.alpha, &g.grads.alpha},
                    {&p.cost, &g.grads.cost}};
      clean = true;
      draw_max = 0.0;
      for (auto& [vals, grads] : blocks) {
        for (int l = 0; l < L && clean; ++l) {
          const double x0 = (*vals)[l];
          const double h = 1e-5 * std::max(1.0, std::abs(x0));
          bool ok1 = false, ok2 = false;
          (*vals)[l] = x0 + h;
          const double fp = probe(p, ok1);
          (*vals)[l] = x0 - h;
          const double fm = probe(p, ok2);
          (*vals)[l] = x0;
          if (!ok1 || !ok2) {
            clean = false;  // branch flip inside the stencil: redraw
            break;
          }
          const double fd = (fp - fm) / (2.0 * h);
          const double ad = (*grads)[l];
          const double abs_err = std::abs(ad - fd);
          if (abs_err < 1e-6) continue;  // below the probe noise floor
          draw_max = std::max(
              draw_max, abs_err / std::max(std::abs(ad), std::abs(fd)));
        }
      }
      sc.cfg.surrogate = nullptr;
    }
    if (!clean)
      throw std::runtime_error(
          "gradcheck: could not find a kink-free parameter draw");
    rep.per_draw_max.push_back(draw_max);
    rep.max_rel_err = std::max(rep.max_rel_err, draw_max);
  }
  rep.pass = rep.max_rel_err < tol;
  return rep;
}

void cmd_gradcheck(const RunConfig& c) {
  ensure_dir(c.out_dir);
  const GradcheckReport r =
      run_gradcheck(c.gradcheck_draws, c.gradcheck_steps, c.gradcheck_agents,
                    c.gradcheck_tolerance, c.seed);
  nlohmann::json rep;
  rep["draws"] = r.draws;
  rep["redraws"] = r.redraws;
  rep["max_rel_err"] = r.max_rel_err;
  rep["tolerance"] = c.gradcheck_tolerance;
  rep["per_draw_max"] = r.per_draw_max;
  rep["pass"] = r.pass;
  write_text_file(c.out_dir + "/gradcheck_report.json", rep.dump(2) + "\n");
  write_manifest(c, "gradcheck", {"gradcheck_report.json"});
  write_timings(c, "gradcheck", {});
  if (!r.pass)
    throw std::runtime_error("gradcheck failed: max relative error " +
                             fmt_g(r.max_rel_err));
}

}  // namespace dtsim
