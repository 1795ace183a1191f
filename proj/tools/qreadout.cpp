// Copyright 2026 The qreadout Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <unistd.h>

#include "CLI11.hpp"
#include "qreadout/calibration.hpp"
#include "qreadout/confidence.hpp"
#include "qreadout/experiments.hpp"
#include "qreadout/io.hpp"
#include "qreadout/parallel.hpp"
#include "qreadout/scenario.hpp"

namespace fs = std::filesystem;
using qreadout::io::Json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 4;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t threads = 0;
  bool log_json = false;
};

class Reporter {
 public:
  explicit Reporter(bool json) : json_(json), tty_(isatty(fileno(stderr))) {}

  void progress(const std::string& msg) {
    if (json_) {
      event(Json{{"event", "progress"}, {"message", msg}});
    } else if (tty_) {
      std::fprintf(stderr, "\r\033[K%s", msg.c_str());
      pending_ = true;
    } else {
      std::fprintf(stderr, "%s\n", msg.c_str());
    }
  }

  void event(const Json& j) {
    if (!json_) return;
    std::fprintf(stderr, "%s\n", j.dump().c_str());
  }

  void done() {
    if (pending_) std::fprintf(stderr, "\n");
    pending_ = false;
  }

  bool json() const { return json_; }

 private:
  bool json_, tty_;
  bool pending_ = false;
};

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Short names accepted in KEY=VALUE overrides.
std::string canonical_key(const std::string& k) {
  if (k == "N") return "n_traces";
  if (k == "T") return "length";
  if (k == "Tc") return "correlation_time";
  if (k == "A" || k == "A12" || k == "A0") return "rate";
  if (k == "SNR") return "snr";
  if (k == "ts") return "filter_block";
  if (k == "x") return "zeeman_ratio";
  return k;
}

Json override_value(const std::string& key, const std::string& text) {
  if (key == "model") return text;
  if (key == "methods") return text;
  if (key == "intervals") {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw qreadout::ConfigError(key + ": expected true or false");
  }
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw qreadout::ConfigError(key + ": '" + text + "' is not a number");
  }
}

/// Resolves the experiment from preset or config file, then applies flags.
qreadout::io::ExperimentConfig resolve(const Common& c, const std::string& scenario,
                                       const std::vector<std::string>& assignments,
                                       const std::string& fallback) {
  qreadout::io::ExperimentConfig cfg;
  if (!c.config.empty()) {
    if (!scenario.empty()) throw qreadout::ConfigError("give either a scenario name or --config, not both");
    cfg = qreadout::io::load_config(c.config);
  } else {
    const std::string name = scenario.empty() ? fallback : scenario;
    if (name == "psb" || name == "psb-white" || name == "elzerman" || name == "elzerman-white") {
      cfg.scenario.name = name;
      cfg.scenario.description = "single point";
      cfg.scenario.base.model = qreadout::parse_state_model(name.substr(0, name.find('-')));
      if (cfg.scenario.base.model == qreadout::StateModel::Elzerman) {
        cfg.scenario.base.length = 400;
        cfg.scenario.base.rate = 0.02;
      }
    } else {
      cfg.scenario = qreadout::find_scenario(name);
    }
  }
  Json patch = Json::object();
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0) throw qreadout::ConfigError("expected KEY=VALUE, got '" + a + "'");
    const std::string key = canonical_key(a.substr(0, eq));
    const std::string value = a.substr(eq + 1);
    if (key == "seed") {
      cfg.scenario.seed = qreadout::io::detail::get_count(override_value(key, value), "seed");
      continue;
    }
    patch[key] = override_value(key, value);
  }
  qreadout::io::merge_point(cfg.scenario.base, patch, "override");
  if (c.seed) cfg.scenario.seed = *c.seed;
  if (!c.out.empty()) cfg.output_dir = c.out;
  cfg.scenario.validate();
  return cfg;
}

void add_common(CLI::App* app, Common& c, bool with_out = true) {
  app->add_option("--config", c.config, "JSON config or manifest from a previous run");
  app->add_option("--seed", c.seed, "Master seed");
  if (with_out) app->add_option("--out", c.out, "Output directory");
  app->add_option("--threads", c.threads, "Worker threads (0 = hardware parallelism)");
  app->add_flag("--log-json", c.log_json, "JSON-lines logs on standard error");
}

fs::path output_dir(const qreadout::io::ExperimentConfig& cfg) { return cfg.output_dir.value_or("qreadout-out"); }

std::string format(const char* fmt, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, a);
  return buf;
}

void print_residuals(const std::vector<qreadout::ConfidenceInterval>& cis, const std::vector<qreadout::Residual>& res) {
  std::printf("%-8s %14s %14s %14s %14s %9s\n", "param", "estimate", "truth", "minus", "plus", "|res|/hw");
  for (std::size_t k = 0; k < cis.size(); ++k) {
    const auto& ci = cis[k];
    if (k < res.size())
      std::printf("%-8s %14.6g %14.6g %14.4g %14.4g %9.2f\n", ci.parameter.c_str(), ci.estimate, res[k].truth,
                  ci.minus(), ci.plus(), res[k].normalized);
    else
      std::printf("%-8s %14.6g %14s %14.4g %14.4g %9s\n", ci.parameter.c_str(), ci.estimate, "-", ci.minus(),
                  ci.plus(), "-");
  }
}

// ------------------------------------------------------------ commands

int cmd_presets(bool as_json) {
  const auto catalog = qreadout::scenario_catalog();
  if (as_json) {
    Json arr = Json::array();
    for (const auto& s : catalog) arr.push_back(qreadout::io::to_json(s));
    std::printf("%s", qreadout::io::dump(arr).c_str());
    return 0;
  }
  for (const auto& s : catalog)
    std::printf("%-22s %-11s %2zu point(s)  %s\n", s.name.c_str(), qreadout::to_string(s.kind).c_str(),
                std::max<std::size_t>(s.points.size(), 1), s.description.c_str());
  return 0;
}

int cmd_generate(const Common& c, const std::string& scenario, const std::vector<std::string>& assignments,
                 std::size_t point_index, const std::string& fmt, Reporter& rep) {
  const auto cfg = resolve(c, scenario, assignments, "psb");
  const auto points = cfg.scenario.expand();
  if (point_index >= points.size())
    throw qreadout::ConfigError("--point " + std::to_string(point_index) + " out of range (scenario has " +
                                std::to_string(points.size()) + " points)");
  const auto& p = points[point_index];
  const qreadout::TraceFactory factory(p, cfg.scenario.seed, point_index);
  rep.progress("generating " + std::to_string(p.n_traces) + " traces");
  const auto traces = factory.make_set(qreadout::stream::kGenerate, {0, p.n_traces});
  const fs::path dir = output_dir(cfg);
  qreadout::io::ensure_directory(dir);
  const fs::path file = dir / (fmt == "csv" ? "traces.csv" : "traces.bin");
  qreadout::io::TraceSidecar side;
  side.params = factory.truth();
  side.noise = p.noise();
  side.seed = cfg.scenario.seed;
  side.stream = qreadout::stream::kGenerate;
  side.point = p;
  side.created = utc_now();
  qreadout::io::write_traces(file, traces, side);
  qreadout::io::write_text_file(dir / "manifest.json",
                                qreadout::io::dump(qreadout::io::manifest_json(cfg, "generate")));
  rep.done();
  std::printf("wrote %s: N=%zu T=%zu model=%s noise=%s seed=%llu\n", file.string().c_str(), p.n_traces, p.length,
              qreadout::to_string(p.model).c_str(), qreadout::io::to_json(p.noise()).dump().c_str(),
              static_cast<unsigned long long>(cfg.scenario.seed));
  return 0;
}

int cmd_train(const Common& c, const std::string& traces_path, const std::string& freeze, const std::string& ci,
              std::size_t sets, Reporter& rep) {
  namespace io = qreadout::io;
  const auto traces = io::read_traces(traces_path);
  if (traces.empty()) throw qreadout::IoError(traces_path + ": no traces");
  const auto side = io::read_sidecar(traces_path);

  // Training config: file, else defaults for the model inferred from the data.
  std::optional<qreadout::StateModel> model;
  std::optional<qreadout::HmmParams> init;
  qreadout::TrainingConfig base{qreadout::default_training_config(qreadout::StateModel::Psb)};
  double tolerance = 1e-3;
  std::size_t max_iterations = 1000;
  std::vector<std::string> frozen;
  bool frozen_given = false;
  if (!c.config.empty()) {
    const auto j = io::parse_json(io::read_text_file(c.config), c.config);
    io::detail::check_keys(j, "", {"model", "init", "ll_tolerance", "max_iterations", "freeze"});
    if (j.contains("model"))
      model = io::detail::as_config("model", [&] { return qreadout::parse_state_model(io::detail::get_string(j["model"], "model")); });
    if (j.contains("init")) init = io::params_from_json(j["init"], "init");
    if (j.contains("ll_tolerance")) tolerance = io::detail::get_number(j["ll_tolerance"], "ll_tolerance");
    if (j.contains("max_iterations")) max_iterations = io::detail::get_count(j["max_iterations"], "max_iterations");
    if (j.contains("freeze")) {
      frozen = io::detail::get_strings(j["freeze"], "freeze");
      frozen_given = true;
    }
  }
  if (!model) {
    std::size_t m = 0;
    if (init) m = init->num_states();
    else if (side && side->params) m = side->params->num_states();
    else
      for (const auto& tr : traces)
        for (auto s : tr.true_states) m = std::max<std::size_t>(m, s + 1);
    if (m != 2 && m != 3) throw qreadout::ConfigError("cannot infer the model; give --config with \"model\"");
    model = m == 2 ? qreadout::StateModel::Psb : qreadout::StateModel::Elzerman;
  }
  auto cfg = qreadout::default_training_config(*model, tolerance, max_iterations);
  if (init) cfg.init_params = *init;
  if (frozen_given) cfg.step.frozen = qreadout::expand_fields(frozen, cfg.init_params.num_states());
  if (!freeze.empty()) {
    Json list = freeze;
    for (const auto& id : qreadout::expand_fields(io::detail::get_strings(list, "--freeze"), cfg.init_params.num_states()))
      cfg.step.frozen.insert(id);
  }
  cfg.on_iteration = [&](const qreadout::IterationRecord& r) {
    if (rep.json())
      rep.event(Json{{"event", "iteration"}, {"iteration", r.iteration}, {"log_likelihood", r.log_likelihood}, {"gain", r.gain}});
    else
      rep.progress("iteration " + std::to_string(r.iteration) + " LL " + format("%.6f", r.log_likelihood));
  };
  const auto method = ci.empty() ? std::optional<qreadout::IntervalMethod>() : io::parse_interval_method(ci);
  // Monte Carlo splits the file into equal consecutive sets; the estimate
  // comes from the first set.
  std::vector<qreadout::TraceSet> parts;
  if (method == qreadout::IntervalMethod::MonteCarlo) {
    if (sets < 2) throw qreadout::ConfigError("--sets must be >= 2 for monte-carlo intervals");
    const std::size_t per = traces.size() / sets;
    if (per < 1) throw qreadout::ConfigError("fewer traces than --sets");
    for (std::size_t s = 0; s < sets; ++s)
      parts.emplace_back(traces.begin() + static_cast<std::ptrdiff_t>(s * per),
                         traces.begin() + static_cast<std::ptrdiff_t>((s + 1) * per));
  }
  const auto& fit_set = parts.empty() ? traces : parts.front();
  const auto result = qreadout::train(cfg, fit_set);
  rep.done();

  const fs::path dir = c.out.empty() ? fs::path("qreadout-out") : fs::path(c.out);
  io::ensure_directory(dir);
  Json star = io::to_json(result);
  star["n_traces"] = fit_set.size();
  std::optional<qreadout::HmmParams> truth;
  if (side && side->params) {
    truth = side->noise ? qreadout::model_matched_params(*side->params, *side->noise) : *side->params;
    star["reference"] = io::to_json(*truth);
  }
  io::write_text_file(dir / "lambda_star.json", io::dump(star));
  std::string hist = "iteration,log_likelihood\n";
  for (std::size_t k = 0; k < result.ll_history.size(); ++k)
    hist += std::to_string(k) + "," + format("%.17g", result.ll_history[k]) + "\n";
  io::write_text_file(dir / "ll_history.csv", hist);

  std::vector<qreadout::ConfidenceInterval> intervals;
  if (method == qreadout::IntervalMethod::LikelihoodRatio) {
    qreadout::ProfileOptions po;
    po.step = cfg.step;
    rep.progress("likelihood-ratio intervals");
    intervals = qreadout::likelihood_ratio_intervals(result.params, fit_set, po);
  } else if (method == qreadout::IntervalMethod::MonteCarlo) {
    rep.progress("Monte Carlo intervals from " + std::to_string(sets) + " sets");
    auto quiet = cfg;
    quiet.on_iteration = nullptr;
    intervals = qreadout::monte_carlo_intervals(quiet, parts);
  }
  rep.done();
  std::vector<qreadout::Residual> residuals;
  if (truth) residuals = qreadout::residual_table(intervals, *truth);
  if (method) {
    Json arr = Json::array(), res = Json::array();
    for (const auto& x : intervals) arr.push_back(io::to_json(x));
    for (const auto& x : residuals) res.push_back(io::to_json(x));
    io::write_text_file(dir / "intervals.json", io::dump(Json{{"intervals", arr}, {"residuals", res}}));
    if (!residuals.empty()) io::write_text_file(dir / "residuals.csv", io::residual_csv(residuals));
  }
  std::printf("trained on %zu traces: %zu iterations, converged=%s, LL=%.6f\n", fit_set.size(), result.iterations,
              result.converged ? "yes" : "no", result.log_likelihood());
  if (method) {
    print_residuals(intervals, residuals);
  } else {
    std::printf("%-8s %14s %14s %14s\n", "param", "estimate", "truth", "residual");
    for (const auto& id : qreadout::estimable_parameters(result.params, cfg.step)) {
      const double v = result.params.get(id);
      if (truth)
        std::printf("%-8s %14.6g %14.6g %14.4g\n", id.name().c_str(), v, truth->get(id), v - truth->get(id));
      else
        std::printf("%-8s %14.6g %14s %14s\n", id.name().c_str(), v, "-", "-");
    }
  }
  return 0;
}

int run_and_write(const qreadout::io::ExperimentConfig& cfg, const std::string& command, Reporter& rep) {
  qreadout::RunOptions opt;
  opt.progress = [&](const std::string& m) { rep.progress(m); };
  opt.interval_method = cfg.intervals.method;
  opt.sets = cfg.intervals.sets;
  opt.freeze = cfg.intervals.freeze;
  const auto result = qreadout::run_scenario(cfg.scenario, opt);
  rep.done();
  const fs::path dir = output_dir(cfg);
  qreadout::io::write_run(dir, cfg, result, command);
  for (const auto& p : result.fidelity) {
    std::printf("%s\n", p.label.c_str());
    for (const auto& r : p.reports)
      std::printf("  %-18s %6zu/%-7zu infidelity %.5f [%.5f, %.5f]\n", r.method.name().c_str(), r.n_errors,
                  r.n_traces, r.infidelity, r.ci_lower, r.ci_upper);
    if (p.effective_snr) std::printf("  effective filtered SNR %.4f\n", *p.effective_snr);
  }
  for (const auto& p : result.calibration) {
    std::printf("%s: %zu iterations, sigma^2 deviation %.4f\n", p.label.c_str(), p.iterations, p.variance_deviation);
    print_residuals(p.intervals, p.residuals);
  }
  std::printf("wrote %s\n", dir.string().c_str());
  return 0;
}

int cmd_fidelity(const Common& c, const std::string& scenario, const std::vector<std::string>& assignments,
                 const std::string& methods, std::optional<std::size_t> filter_ts, Reporter& rep) {
  std::vector<std::string> extra = assignments;
  if (!methods.empty()) extra.push_back("methods=" + methods);
  if (filter_ts) extra.push_back("filter_block=" + std::to_string(*filter_ts));
  const auto cfg = resolve(c, scenario, extra, "psb-white-sweep-A");
  if (cfg.scenario.kind != qreadout::ScenarioKind::Fidelity)
    throw qreadout::ConfigError("scenario '" + cfg.scenario.name + "' is a calibration scenario; use the ci command");
  return run_and_write(cfg, "fidelity", rep);
}

int cmd_ci(const Common& c, const std::string& scenario, const std::vector<std::string>& assignments,
           const std::string& ci, std::optional<std::size_t> sets, const std::string& freeze, Reporter& rep) {
  auto cfg = resolve(c, scenario, assignments, "baumwelch-corrfail");
  if (cfg.scenario.kind != qreadout::ScenarioKind::Calibration)
    throw qreadout::ConfigError("scenario '" + cfg.scenario.name + "' is a fidelity scenario; use the fidelity command");
  if (!ci.empty()) cfg.intervals.method = qreadout::io::parse_interval_method(ci);
  if (sets) cfg.intervals.sets = *sets;
  if (!freeze.empty()) cfg.intervals.freeze = qreadout::io::detail::get_strings(Json(freeze), "--freeze");
  qreadout::expand_fields(cfg.intervals.freeze, cfg.scenario.base.num_states());
  if (cfg.intervals.method == qreadout::IntervalMethod::MonteCarlo && cfg.intervals.sets < 2)
    throw qreadout::ConfigError("--sets must be >= 2 for monte-carlo intervals");
  return run_and_write(cfg, "ci", rep);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Qubit readout analysis with hidden Markov models"};
  app.require_subcommand(1);
  app.set_version_flag("--version", qreadout::io::tool_version());

  Common common;
  std::string scenario, traces, methods, ci, freeze, fmt = "binary";
  std::vector<std::string> assignments;
  std::optional<std::size_t> filter_ts, sets_opt;
  std::size_t sets = 5, point = 0;
  bool presets_json = false;

  auto* presets = app.add_subcommand("presets", "List the built-in scenarios");
  presets->add_flag("--json", presets_json, "Print full scenario definitions");

  auto* generate = app.add_subcommand("generate", "Generate labelled traces for one scenario point");
  add_common(generate, common);
  generate->add_option("scenario", scenario, "Preset name, psb or elzerman");
  generate->add_option("assignments", assignments, "Point overrides KEY=VALUE (N, T, SNR, A, Tc, seed, ...)");
  generate->add_option("--point", point, "Sweep point to generate");
  generate->add_option("--format", fmt, "Trace file format")->check(CLI::IsMember({"binary", "csv"}));

  auto* train = app.add_subcommand("train", "Baum-Welch training on a trace file");
  add_common(train, common);
  train->add_option("traces", traces, "Trace file (.bin or .csv)")->required();
  train->add_option("--freeze", freeze, "Comma-separated fields kept fixed (pi, mu, var, A, mu1, A12, ...)");
  train->add_option("--ci", ci, "Interval method")->check(CLI::IsMember({"likelihood-ratio", "monte-carlo"}));
  train->add_option("--sets", sets, "Monte Carlo sets the file is split into");

  auto* fidelity = app.add_subcommand("fidelity", "Run a fidelity scenario");
  add_common(fidelity, common);
  fidelity->add_option("scenario", scenario, "Preset name");
  fidelity->add_option("assignments", assignments, "Base point overrides KEY=VALUE");
  fidelity->add_option("--methods", methods, "Comma-separated methods");
  fidelity->add_option("--filter-ts", filter_ts, "Averaging filter block size");

  auto* cis = app.add_subcommand("ci", "Run a Baum-Welch calibration scenario with confidence intervals");
  add_common(cis, common);
  cis->add_option("scenario", scenario, "Preset name");
  cis->add_option("assignments", assignments, "Base point overrides KEY=VALUE");
  cis->add_option("--ci", ci, "Interval method")->check(CLI::IsMember({"likelihood-ratio", "monte-carlo"}));
  cis->add_option("--sets", sets_opt, "Monte Carlo training sets");
  cis->add_option("--freeze", freeze, "Comma-separated fields kept fixed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  // A leading KEY=VALUE is an override, not a scenario name.
  if (scenario.find('=') != std::string::npos) {
    assignments.insert(assignments.begin(), scenario);
    scenario.clear();
  }
  Reporter rep(common.log_json);
  auto fail = [&](int code, const char* type, const std::string& msg) {
    rep.done();
    if (rep.json()) rep.event(Json{{"event", "error"}, {"type", type}, {"message", msg}, {"exit_code", code}});
    std::fprintf(stderr, "error (%s): %s\n", type, msg.c_str());
    return code;
  };
  try {
    qreadout::set_thread_count(common.threads);
    if (presets->parsed()) return cmd_presets(presets_json);
    if (generate->parsed()) return cmd_generate(common, scenario, assignments, point, fmt, rep);
    if (train->parsed()) return cmd_train(common, traces, freeze, ci, sets, rep);
    if (fidelity->parsed()) return cmd_fidelity(common, scenario, assignments, methods, filter_ts, rep);
    if (cis->parsed()) return cmd_ci(common, scenario, assignments, ci, sets_opt, freeze, rep);
  } catch (const qreadout::IoError& e) {
    return fail(kExitIo, "io", e.what());
  } catch (const qreadout::InvalidArgument& e) {
    return fail(kExitConfig, "config", e.what());
  } catch (const qreadout::NumericalError& e) {
    return fail(kExitNumerical, "numerical", e.what());
  } catch (const std::exception& e) {
    return fail(1, "internal", e.what());
  }
  return 0;
}
