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

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "qreadout/calibration.hpp"
#include "qreadout/confidence.hpp"
#include "qreadout/errors.hpp"
#include "qreadout/experiments.hpp"
#include "qreadout/model.hpp"
#include "qreadout/noise.hpp"
#include "qreadout/readout.hpp"
#include "qreadout/scenario.hpp"

namespace qreadout::io {

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------- files

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("cannot read " + path.string());
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out << text;
  out.flush();
  if (!out) throw IoError("cannot write " + path.string());
}

inline void ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir))
    throw IoError("cannot create directory " + dir.string() + (ec ? ": " + ec.message() : ""));
}

inline std::string dump(const Json& j) { return j.dump(2) + "\n"; }

/// Parses JSON text; syntax errors report line and column.
inline Json parse_json(const std::string& text, const std::string& source) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t k = 0; k + 1 < e.byte && k < text.size(); ++k) {
      if (text[k] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError(source + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + e.what());
  }
}

// ------------------------------------------------------- field readers

namespace detail {

inline std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

inline void require_object(const Json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError((path.empty() ? std::string("document") : path) + ": expected an object");
}

inline void check_keys(const Json& j, const std::string& path, const std::set<std::string>& allowed) {
  require_object(j, path);
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError(join(path, k) + ": unknown field");
}

inline double get_number(const Json& j, const std::string& path) {
  if (!j.is_number()) throw ConfigError(path + ": expected a number");
  return j.get<double>();
}

inline std::uint64_t get_count(const Json& j, const std::string& path) {
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  if (j.is_number_integer() && j.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(j.get<std::int64_t>());
  if (j.is_number_float()) {
    const double v = j.get<double>();
    if (v >= 0.0 && v == std::floor(v) && v < 1.8e19) return static_cast<std::uint64_t>(v);
  }
  throw ConfigError(path + ": expected a non-negative integer");
}

inline std::string get_string(const Json& j, const std::string& path) {
  if (!j.is_string()) throw ConfigError(path + ": expected a string");
  return j.get<std::string>();
}

inline bool get_bool(const Json& j, const std::string& path) {
  if (!j.is_boolean()) throw ConfigError(path + ": expected true or false");
  return j.get<bool>();
}

inline std::vector<double> get_numbers(const Json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path + ": expected an array of numbers");
  std::vector<double> out;
  for (std::size_t k = 0; k < j.size(); ++k) out.push_back(get_number(j[k], path + "[" + std::to_string(k) + "]"));
  return out;
}

inline std::vector<std::string> get_strings(const Json& j, const std::string& path) {
  if (j.is_string()) {
    // Comma-separated list.
    std::vector<std::string> out;
    std::stringstream ss(j.get<std::string>());
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) out.push_back(item);
    return out;
  }
  if (!j.is_array()) throw ConfigError(path + ": expected an array of strings");
  std::vector<std::string> out;
  for (std::size_t k = 0; k < j.size(); ++k) out.push_back(get_string(j[k], path + "[" + std::to_string(k) + "]"));
  return out;
}

/// Re-raises library validation errors as configuration errors at `path`.
template <class Fn>
auto as_config(const std::string& path, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const InvalidArgument& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace detail

// -------------------------------------------------------- model types

inline Json to_json(const HmmParams& p) {
  const std::size_t m = p.num_states();
  Json a = Json::array();
  for (std::size_t i = 0; i < m; ++i) {
    Json row = Json::array();
    for (std::size_t j = 0; j < m; ++j) row.push_back(p.transition(i, j));
    a.push_back(row);
  }
  Json j;
  j["labels"] = p.labels();
  j["pi"] = std::vector<double>(p.initial().begin(), p.initial().end());
  j["mu"] = std::vector<double>(p.means().begin(), p.means().end());
  j["var"] = std::vector<double>(p.variances().begin(), p.variances().end());
  j["A"] = a;
  return j;
}

inline HmmParams params_from_json(const Json& j, const std::string& path = "params") {
  detail::check_keys(j, path, {"labels", "pi", "mu", "var", "A"});
  for (const char* k : {"pi", "mu", "var", "A"})
    if (!j.contains(k)) throw ConfigError(detail::join(path, k) + ": missing");
  std::vector<double> a;
  const auto& rows = j["A"];
  if (!rows.is_array()) throw ConfigError(path + ".A: expected an array of rows");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = detail::get_numbers(rows[i], path + ".A[" + std::to_string(i) + "]");
    a.insert(a.end(), r.begin(), r.end());
  }
  std::vector<std::string> labels;
  if (j.contains("labels")) labels = detail::get_strings(j["labels"], path + ".labels");
  return detail::as_config(path, [&] {
    return HmmParams(detail::get_numbers(j["pi"], path + ".pi"), detail::get_numbers(j["mu"], path + ".mu"),
                     detail::get_numbers(j["var"], path + ".var"), a, labels);
  });
}

inline Json to_json(const NoiseSpec& n) {
  Json j;
  if (auto* w = std::get_if<WhiteNoise>(&n.shape)) {
    j["kind"] = "white";
    j["variance"] = w->variance;
  } else if (auto* g = std::get_if<GaussianSpectrumNoise>(&n.shape)) {
    j["kind"] = "gaussian-spectrum";
    j["variance"] = g->variance;
    j["correlation_time"] = g->correlation_time;
  } else {
    j["kind"] = "explicit-spectrum";
    j["spectrum"] = std::get<ExplicitSpectrumNoise>(n.shape).spectrum;
  }
  j["mean"] = n.mean;
  return j;
}

inline NoiseSpec noise_from_json(const Json& j, const std::string& path = "noise") {
  detail::require_object(j, path);
  const std::string kind = j.contains("kind") ? detail::get_string(j["kind"], path + ".kind") : "";
  const double mean = j.contains("mean") ? detail::get_number(j["mean"], path + ".mean") : 0.0;
  NoiseSpec n;
  if (kind == "white") {
    detail::check_keys(j, path, {"kind", "variance", "mean"});
    n = NoiseSpec::white(detail::get_number(j.value("variance", Json(1.0)), path + ".variance"), mean);
  } else if (kind == "gaussian-spectrum") {
    detail::check_keys(j, path, {"kind", "variance", "correlation_time", "mean"});
    n = NoiseSpec::gaussian(detail::get_number(j.value("variance", Json(1.0)), path + ".variance"),
                            detail::get_number(j.value("correlation_time", Json(0.0)), path + ".correlation_time"),
                            mean);
  } else if (kind == "explicit-spectrum") {
    detail::check_keys(j, path, {"kind", "spectrum", "mean"});
    if (!j.contains("spectrum")) throw ConfigError(path + ".spectrum: missing");
    n = NoiseSpec::explicit_spectrum(detail::get_numbers(j["spectrum"], path + ".spectrum"), mean);
  } else {
    throw ConfigError(path + ".kind: expected white, gaussian-spectrum or explicit-spectrum");
  }
  detail::as_config(path, [&] { n.validate(); });
  return n;
}

inline Json to_json(const ThresholdConfig& c) {
  return Json{{"mode", to_string(c.mode)},
              {"threshold", c.threshold},
              {"window", c.window},
              {"high_state", c.high_state + 1},
              {"low_state", c.low_state + 1}};
}

inline ThresholdConfig threshold_from_json(const Json& j, const std::string& path = "threshold") {
  detail::check_keys(j, path, {"mode", "threshold", "window", "high_state", "low_state"});
  ThresholdConfig c;
  if (j.contains("mode")) {
    const auto m = detail::get_string(j["mode"], path + ".mode");
    if (m == "integrated") c.mode = ThresholdMode::IntegratedSignal;
    else if (m == "peak") c.mode = ThresholdMode::PeakSignal;
    else throw ConfigError(path + ".mode: expected integrated or peak");
  }
  if (j.contains("threshold")) c.threshold = detail::get_number(j["threshold"], path + ".threshold");
  if (j.contains("window")) c.window = detail::get_count(j["window"], path + ".window");
  auto state = [&](const char* key, StateIndex fallback) {
    if (!j.contains(key)) return fallback;
    const auto s = detail::get_count(j[key], detail::join(path, key));
    if (s < 1) throw ConfigError(detail::join(path, key) + ": states are numbered from 1");
    return static_cast<StateIndex>(s - 1);
  };
  c.high_state = state("high_state", c.high_state);
  c.low_state = state("low_state", c.low_state);
  detail::as_config(path, [&] { c.validate(); });
  return c;
}

inline Json to_json(const FilterConfig& f) { return Json{{"block_size", f.block_size}}; }

inline FilterConfig filter_from_json(const Json& j, const std::string& path = "filter") {
  detail::check_keys(j, path, {"block_size"});
  FilterConfig f;
  if (j.contains("block_size")) f.block_size = detail::get_count(j["block_size"], path + ".block_size");
  detail::as_config(path, [&] { f.validate(); });
  return f;
}

inline Json to_json(const ThresholdCalibration& c) {
  return Json{{"config", to_json(c.config)},
              {"training_fidelity", c.training_fidelity},
              {"training_traces", c.training_traces},
              {"windows", c.windows},
              {"window_fidelity", c.window_fidelity},
              {"threshold_grid", Json{{"lower", c.thresholds.front()},
                                      {"upper", c.thresholds.back()},
                                      {"points", c.thresholds.size()}}}};
}

inline Json to_json(const TrainingResult& r) {
  return Json{{"params", to_json(r.params)},
              {"log_likelihood", r.log_likelihood()},
              {"iterations", r.iterations},
              {"converged", r.converged},
              {"ll_history", r.ll_history}};
}

inline Json finite_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline Json to_json(const ConfidenceInterval& c) {
  return Json{{"parameter", c.parameter},
              {"estimate", c.estimate},
              {"lower", c.lower},
              {"upper", c.upper},
              {"minus", c.minus()},
              {"plus", c.plus()},
              {"method", to_string(c.method)},
              {"level", c.level},
              {"lower_clamped", c.lower_clamped},
              {"upper_clamped", c.upper_clamped}};
}

inline Json to_json(const Residual& r) {
  return Json{{"parameter", r.parameter},
              {"truth", r.truth},
              {"residual", r.residual},
              {"lower", r.lower},
              {"upper", r.upper},
              {"normalized", finite_or_null(r.normalized)}};
}

inline std::string residual_csv(const std::vector<Residual>& rows) {
  std::string out = "parameter,truth,estimate_minus_truth,lower,upper,normalized\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.parameter.c_str(), r.truth, r.residual,
                  r.lower, r.upper, r.normalized);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------- scenarios

inline Json to_json(const ScenarioPoint& p) {
  Json methods = Json::array();
  for (const auto& m : p.methods) methods.push_back(m.name());
  Json j;
  j["model"] = to_string(p.model);
  j["n_traces"] = p.n_traces;
  j["length"] = p.length;
  j["snr"] = p.snr;
  j["rate"] = p.rate;
  j["zeeman_ratio"] = p.zeeman_ratio ? Json(*p.zeeman_ratio) : Json(nullptr);
  j["correlation_time"] = p.correlation_time;
  j["filter_block"] = p.filter_block;
  j["methods"] = methods;
  j["threshold_training"] = p.threshold_training;
  j["hmm_training"] = p.hmm_training;
  j["hmm_tolerance"] = p.hmm_tolerance;
  j["hmm_max_iterations"] = p.hmm_max_iterations;
  j["intervals"] = p.intervals;
  return j;
}

/// Applies the fields present in `j` onto `p`.
inline void merge_point(ScenarioPoint& p, const Json& j, const std::string& path) {
  detail::check_keys(j, path,
                     {"model", "n_traces", "length", "snr", "rate", "zeeman_ratio", "correlation_time", "filter_block",
                      "methods", "threshold_training", "hmm_training", "hmm_tolerance", "hmm_max_iterations",
                      "intervals"});
  auto at = [&](const char* k) { return detail::join(path, k); };
  if (j.contains("model")) p.model = detail::as_config(at("model"), [&] { return parse_state_model(detail::get_string(j["model"], at("model"))); });
  if (j.contains("n_traces")) p.n_traces = detail::get_count(j["n_traces"], at("n_traces"));
  if (j.contains("length")) p.length = detail::get_count(j["length"], at("length"));
  if (j.contains("snr")) p.snr = detail::get_number(j["snr"], at("snr"));
  if (j.contains("rate")) p.rate = detail::get_number(j["rate"], at("rate"));
  if (j.contains("zeeman_ratio")) {
    if (j["zeeman_ratio"].is_null()) p.zeeman_ratio.reset();
    else p.zeeman_ratio = detail::get_number(j["zeeman_ratio"], at("zeeman_ratio"));
  }
  if (j.contains("correlation_time")) p.correlation_time = detail::get_number(j["correlation_time"], at("correlation_time"));
  if (j.contains("filter_block")) p.filter_block = detail::get_count(j["filter_block"], at("filter_block"));
  if (j.contains("methods")) {
    p.methods.clear();
    for (const auto& s : detail::get_strings(j["methods"], at("methods")))
      p.methods.push_back(detail::as_config(at("methods"), [&] { return MethodSpec::parse(s); }));
  }
  if (j.contains("threshold_training")) p.threshold_training = detail::get_count(j["threshold_training"], at("threshold_training"));
  if (j.contains("hmm_training")) p.hmm_training = detail::get_count(j["hmm_training"], at("hmm_training"));
  if (j.contains("hmm_tolerance")) p.hmm_tolerance = detail::get_number(j["hmm_tolerance"], at("hmm_tolerance"));
  if (j.contains("hmm_max_iterations")) p.hmm_max_iterations = detail::get_count(j["hmm_max_iterations"], at("hmm_max_iterations"));
  if (j.contains("intervals")) p.intervals = detail::get_bool(j["intervals"], at("intervals"));
}

inline Json to_json(const Scenario& s) {
  Json points = Json::array();
  for (const auto& sp : s.points) {
    Json o = Json::object();
    for (const auto& [k, v] : sp.overrides) o[k] = v;
    points.push_back(Json{{"label", sp.label}, {"x", sp.x}, {"overrides", o}});
  }
  return Json{{"name", s.name},         {"description", s.description}, {"kind", to_string(s.kind)},
              {"sweep_axis", s.sweep_axis}, {"seed", s.seed},            {"base", to_json(s.base)},
              {"points", points}};
}

/// Inline scenario. Fields absent from `j` keep the values of `defaults`.
inline Scenario scenario_from_json(const Json& j, const std::string& path = "scenario",
                                   const Scenario& defaults = {}) {
  detail::check_keys(j, path, {"name", "description", "kind", "sweep_axis", "seed", "base", "points"});
  Scenario s = defaults;
  auto at = [&](const char* k) { return detail::join(path, k); };
  if (j.contains("name")) s.name = detail::get_string(j["name"], at("name"));
  if (j.contains("description")) s.description = detail::get_string(j["description"], at("description"));
  if (j.contains("kind")) s.kind = detail::as_config(at("kind"), [&] { return parse_scenario_kind(detail::get_string(j["kind"], at("kind"))); });
  if (j.contains("sweep_axis")) s.sweep_axis = detail::get_string(j["sweep_axis"], at("sweep_axis"));
  if (j.contains("seed")) s.seed = detail::get_count(j["seed"], at("seed"));
  if (j.contains("base")) merge_point(s.base, j["base"], at("base"));
  if (j.contains("points")) {
    const auto& pts = j["points"];
    if (!pts.is_array()) throw ConfigError(at("points") + ": expected an array");
    s.points.clear();
    for (std::size_t k = 0; k < pts.size(); ++k) {
      const std::string pp = at("points") + "[" + std::to_string(k) + "]";
      detail::check_keys(pts[k], pp, {"label", "x", "overrides"});
      SweepPoint sp;
      if (pts[k].contains("label")) sp.label = detail::get_string(pts[k]["label"], pp + ".label");
      if (pts[k].contains("x")) sp.x = detail::get_number(pts[k]["x"], pp + ".x");
      if (pts[k].contains("overrides")) {
        detail::require_object(pts[k]["overrides"], pp + ".overrides");
        for (const auto& [key, v] : pts[k]["overrides"].items())
          sp.overrides[key] = detail::get_number(v, pp + ".overrides." + key);
      }
      if (sp.label.empty()) sp.label = "point" + std::to_string(k);
      s.points.push_back(sp);
    }
  }
  detail::as_config(path, [&] { s.validate(); });
  return s;
}

// ------------------------------------------------ experiment configs

/// Interval settings of calibration runs.
struct IntervalSettings {
  IntervalMethod method = IntervalMethod::LikelihoodRatio;
  std::size_t sets = 5;
  std::vector<std::string> freeze;
};

inline IntervalMethod parse_interval_method(const std::string& s) {
  if (s == "likelihood-ratio") return IntervalMethod::LikelihoodRatio;
  if (s == "monte-carlo") return IntervalMethod::MonteCarlo;
  throw ConfigError("unknown interval method '" + s + "' (expected likelihood-ratio or monte-carlo)");
}

/// A fully resolved run: everything needed to reproduce its results.
struct ExperimentConfig {
  Scenario scenario;
  std::optional<std::string> output_dir;
  IntervalSettings intervals;
};

inline Json to_json(const IntervalSettings& s) {
  return Json{{"method", to_string(s.method)}, {"sets", s.sets}, {"freeze", s.freeze}};
}

/// Accepts a config document or a manifest written by a previous run.
/// "scenario" is a preset name or an inline scenario; "overrides" are point
/// fields applied onto the scenario's base point.
inline ExperimentConfig config_from_json(const Json& j) {
  detail::check_keys(j, "", {"scenario", "seed", "output_dir", "overrides", "ci", "tool", "version", "command"});
  if (!j.contains("scenario")) throw ConfigError("scenario: missing");
  ExperimentConfig c;
  const auto& sj = j["scenario"];
  if (sj.is_string()) {
    c.scenario = detail::as_config("scenario", [&] { return find_scenario(sj.get<std::string>()); });
  } else if (sj.is_object()) {
    Scenario start;
    if (sj.contains("name") && sj["name"].is_string()) {
      for (const auto& s : scenario_catalog())
        if (s.name == sj["name"].get<std::string>()) start = s;
    }
    c.scenario = scenario_from_json(sj, "scenario", start);
  } else {
    throw ConfigError("scenario: expected a preset name or an object");
  }
  if (j.contains("seed")) c.scenario.seed = detail::get_count(j["seed"], "seed");
  if (j.contains("overrides")) merge_point(c.scenario.base, j["overrides"], "overrides");
  if (j.contains("output_dir")) c.output_dir = detail::get_string(j["output_dir"], "output_dir");
  if (j.contains("ci")) {
    detail::check_keys(j["ci"], "ci", {"method", "sets", "freeze"});
    const auto& ci = j["ci"];
    if (ci.contains("method"))
      c.intervals.method = detail::as_config("ci.method", [&] { return parse_interval_method(detail::get_string(ci["method"], "ci.method")); });
    if (ci.contains("sets")) c.intervals.sets = detail::get_count(ci["sets"], "ci.sets");
    if (ci.contains("freeze")) c.intervals.freeze = detail::get_strings(ci["freeze"], "ci.freeze");
  }
  detail::as_config("scenario", [&] { c.scenario.validate(); });
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  return config_from_json(parse_json(read_text_file(path), path.string()));
}

inline std::string tool_version() {
#ifdef QREADOUT_VERSION
  return QREADOUT_VERSION;
#else
  return "unknown";
#endif
}

/// Manifest: the resolved scenario, seed and interval settings. Loading it
/// with load_config reproduces the run.
inline Json manifest_json(const ExperimentConfig& c, const std::string& command) {
  Json j;
  j["tool"] = "qreadout";
  j["version"] = tool_version();
  j["command"] = command;
  j["scenario"] = to_json(c.scenario);
  j["seed"] = c.scenario.seed;
  j["ci"] = to_json(c.intervals);
  return j;
}

// ------------------------------------------------------------ results

inline Json to_json(const FidelityReport& r) {
  Json j;
  j["method"] = r.method.name();
  j["filtered"] = r.method.filtered;
  j["n_traces"] = r.n_traces;
  j["n_errors"] = r.n_errors;
  j["infidelity"] = r.infidelity;
  j["ci_lower"] = r.ci_lower;
  j["ci_upper"] = r.ci_upper;
  j["config_digest"] = r.config_digest;
  j["seed"] = r.seed;
  if (r.threshold) j["threshold"] = to_json(*r.threshold);
  if (r.training_fidelity) j["training_fidelity"] = *r.training_fidelity;
  if (r.params) j["params"] = to_json(*r.params);
  if (r.training_iterations) {
    j["training"] = Json{{"iterations", *r.training_iterations},
                         {"converged", *r.training_converged},
                         {"log_likelihood", *r.training_log_likelihood}};
  }
  return j;
}

inline Json to_json(const PointResult& r) {
  Json reports = Json::array();
  for (const auto& rep : r.reports) reports.push_back(to_json(rep));
  Json j;
  j["index"] = r.index;
  j["label"] = r.label;
  j["x"] = r.x;
  j["config"] = to_json(r.config);
  if (r.effective_snr) j["effective_snr"] = *r.effective_snr;
  j["reports"] = reports;
  return j;
}

inline Json to_json(const CalibrationResult& r) {
  Json intervals = Json::array(), residuals = Json::array();
  for (const auto& ci : r.intervals) intervals.push_back(to_json(ci));
  for (const auto& res : r.residuals) residuals.push_back(to_json(res));
  Json j;
  j["index"] = r.index;
  j["label"] = r.label;
  j["x"] = r.x;
  j["config"] = to_json(r.config);
  j["config_digest"] = r.config_digest;
  j["seed"] = r.seed;
  j["model_matched"] = to_json(r.reference);
  j["estimate"] = to_json(r.estimate);
  j["iterations"] = r.iterations;
  j["converged"] = r.converged;
  j["log_likelihood"] = r.ll_history.empty() ? Json(nullptr) : Json(r.ll_history.back());
  j["variance_deviation"] = r.variance_deviation;
  j["max_normalized_residual"] = finite_or_null(r.max_normalized_residual());
  j["intervals"] = intervals;
  j["residuals"] = residuals;
  return j;
}

/// results.json; contains no timing or host data.
inline Json results_json(const ScenarioResult& r) {
  Json points = Json::array();
  for (const auto& p : r.fidelity) points.push_back(to_json(p));
  for (const auto& p : r.calibration) points.push_back(to_json(p));
  Json j;
  j["scenario"] = r.scenario.name;
  j["kind"] = to_string(r.scenario.kind);
  j["sweep_axis"] = r.scenario.sweep_axis;
  j["seed"] = r.scenario.seed;
  j["points"] = points;
  return j;
}

/// One row per sweep point and method (fidelity) or per point and
/// parameter (calibration).
inline std::string sweep_csv(const ScenarioResult& r) {
  std::string out;
  char buf[512];
  if (r.scenario.kind == ScenarioKind::Fidelity) {
    out = "x,label,method,n_traces,n_errors,infidelity,ci_lower,ci_upper\n";
    for (const auto& p : r.fidelity)
      for (const auto& rep : p.reports) {
        std::snprintf(buf, sizeof buf, "%.17g,\"%s\",%s,%zu,%zu,%.17g,%.17g,%.17g\n", p.x, p.label.c_str(),
                      rep.method.name().c_str(), rep.n_traces, rep.n_errors, rep.infidelity, rep.ci_lower,
                      rep.ci_upper);
        out += buf;
      }
  } else {
    out = "x,label,parameter,model_matched,estimate,lower,upper,normalized,variance_deviation\n";
    for (const auto& p : r.calibration)
      for (std::size_t k = 0; k < p.intervals.size(); ++k) {
        const auto& ci = p.intervals[k];
        const auto& res = p.residuals[k];
        std::snprintf(buf, sizeof buf, "%.17g,\"%s\",%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", p.x, p.label.c_str(),
                      ci.parameter.c_str(), res.truth, ci.estimate, ci.lower, ci.upper, res.normalized,
                      p.variance_deviation);
        out += buf;
      }
  }
  return out;
}

inline void write_run(const std::filesystem::path& dir, const ExperimentConfig& config, const ScenarioResult& r,
                      const std::string& command) {
  ensure_directory(dir);
  write_text_file(dir / "results.json", dump(results_json(r)));
  write_text_file(dir / "sweep.csv", sweep_csv(r));
  write_text_file(dir / "manifest.json", dump(manifest_json(config, command)));
}

// ------------------------------------------------------------- traces

/// Metadata stored next to a trace file.
struct TraceSidecar {
  std::string format;
  std::size_t n_traces = 0;
  std::vector<std::size_t> lengths;
  std::optional<HmmParams> params;
  std::optional<NoiseSpec> noise;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> stream;
  std::optional<ScenarioPoint> point;
  std::string created;
};

inline Json to_json(const TraceSidecar& s) {
  Json j;
  j["format"] = s.format;
  j["n_traces"] = s.n_traces;
  bool same = !s.lengths.empty();
  for (auto l : s.lengths) same = same && l == s.lengths.front();
  if (same) j["length"] = s.lengths.front();
  else j["lengths"] = s.lengths;
  if (s.params) j["params"] = to_json(*s.params);
  if (s.noise) j["noise"] = to_json(*s.noise);
  if (s.seed) j["seed"] = *s.seed;
  if (s.stream) j["stream"] = *s.stream;
  if (s.point) j["point"] = to_json(*s.point);
  j["created"] = s.created;
  return j;
}

inline TraceSidecar sidecar_from_json(const Json& j, const std::string& path = "sidecar") {
  detail::check_keys(j, path, {"format", "n_traces", "length", "lengths", "params", "noise", "seed", "stream", "point", "created"});
  TraceSidecar s;
  if (j.contains("format")) s.format = detail::get_string(j["format"], path + ".format");
  if (j.contains("n_traces")) s.n_traces = detail::get_count(j["n_traces"], path + ".n_traces");
  if (j.contains("length")) s.lengths.assign(s.n_traces, detail::get_count(j["length"], path + ".length"));
  if (j.contains("lengths"))
    for (const auto& v : j["lengths"]) s.lengths.push_back(detail::get_count(v, path + ".lengths"));
  if (j.contains("params")) s.params = params_from_json(j["params"], path + ".params");
  if (j.contains("noise")) s.noise = noise_from_json(j["noise"], path + ".noise");
  if (j.contains("seed")) s.seed = detail::get_count(j["seed"], path + ".seed");
  if (j.contains("stream")) s.stream = detail::get_count(j["stream"], path + ".stream");
  if (j.contains("point")) {
    ScenarioPoint p;
    merge_point(p, j["point"], path + ".point");
    s.point = p;
  }
  if (j.contains("created")) s.created = detail::get_string(j["created"], path + ".created");
  return s;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& traces) {
  auto p = traces;
  p += ".json";
  return p;
}

/// CSV with one row per sample: trace_id, t, y, true_state (1-based, empty
/// when unknown).
inline std::string traces_to_csv(const TraceSet& traces) {
  std::string out = "trace_id,t,y,true_state\n";
  char buf[96];
  for (const auto& tr : traces)
    for (std::size_t t = 0; t < tr.length(); ++t) {
      if (tr.labeled())
        std::snprintf(buf, sizeof buf, "%llu,%zu,%.17g,%zu\n", static_cast<unsigned long long>(tr.id), t,
                      tr.samples[t], tr.true_states[t] + 1);
      else
        std::snprintf(buf, sizeof buf, "%llu,%zu,%.17g,\n", static_cast<unsigned long long>(tr.id), t, tr.samples[t]);
      out += buf;
    }
  return out;
}

inline TraceSet traces_from_csv(const std::string& text, const std::string& source = "csv") {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("trace_id,t,y,true_state", 0) != 0)
    throw IoError(source + ": expected header trace_id,t,y,true_state");
  TraceSet out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fail = [&](const std::string& why) { throw IoError(source + ":" + std::to_string(lineno) + ": " + why); };
    std::array<std::string, 4> f;
    std::size_t k = 0, start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i)
      if (i == line.size() || line[i] == ',') {
        if (k >= 4) fail("too many fields");
        f[k++] = line.substr(start, i - start);
        start = i + 1;
      }
    if (k != 4) fail("expected 4 fields");
    try {
      const auto id = std::stoull(f[0]);
      const auto t = std::stoull(f[1]);
      const double y = std::stod(f[2]);
      if (out.empty() || out.back().id != id) {
        if (t != 0) fail("trace " + f[0] + " does not start at t=0");
        out.emplace_back();
        out.back().id = id;
      }
      auto& tr = out.back();
      if (t != tr.samples.size()) fail("samples out of order");
      tr.samples.push_back(y);
      if (!f[3].empty()) {
        const auto s = std::stoull(f[3]);
        if (s < 1) fail("states are numbered from 1");
        if (tr.true_states.size() != t) fail("true_state missing on earlier rows");
        tr.true_states.push_back(static_cast<StateIndex>(s - 1));
      } else if (!tr.true_states.empty()) {
        fail("true_state missing");
      }
    } catch (const std::invalid_argument&) {
      fail("malformed number");
    } catch (const std::out_of_range&) {
      fail("number out of range");
    }
  }
  return out;
}

namespace detail {
inline constexpr char kMagic[8] = {'Q', 'R', 'T', 'R', 'A', 'C', 'E', '1'};

template <class T>
void put(std::string& out, const T& v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.append(b, sizeof(T));
}

template <class T>
T take(const std::string& in, std::size_t& pos, const std::string& source) {
  if (pos + sizeof(T) > in.size()) throw IoError(source + ": truncated binary trace file");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}
}  // namespace detail

/// Binary container (native little-endian): magic, count, then per trace
/// id, length, flags, optional sample interval, samples, optional states.
inline std::string traces_to_binary(const TraceSet& traces) {
  std::string out(detail::kMagic, sizeof detail::kMagic);
  detail::put<std::uint64_t>(out, traces.size());
  for (const auto& tr : traces) {
    detail::put<std::uint64_t>(out, tr.id);
    detail::put<std::uint64_t>(out, tr.length());
    const std::uint8_t flags = (tr.labeled() ? 1 : 0) | (tr.sample_interval ? 2 : 0);
    detail::put<std::uint8_t>(out, flags);
    if (tr.sample_interval) detail::put<double>(out, *tr.sample_interval);
    out.append(reinterpret_cast<const char*>(tr.samples.data()), tr.samples.size() * sizeof(double));
    if (tr.labeled())
      for (auto s : tr.true_states) detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(s));
  }
  return out;
}

inline TraceSet traces_from_binary(const std::string& in, const std::string& source = "binary") {
  if (in.size() < sizeof detail::kMagic || std::memcmp(in.data(), detail::kMagic, sizeof detail::kMagic) != 0)
    throw IoError(source + ": not a qreadout binary trace file");
  std::size_t pos = sizeof detail::kMagic;
  const auto n = detail::take<std::uint64_t>(in, pos, source);
  TraceSet out;
  for (std::uint64_t k = 0; k < n; ++k) {
    SignalTrace tr;
    tr.id = detail::take<std::uint64_t>(in, pos, source);
    const auto len = detail::take<std::uint64_t>(in, pos, source);
    const auto flags = detail::take<std::uint8_t>(in, pos, source);
    if (flags & 2) tr.sample_interval = detail::take<double>(in, pos, source);
    if (len > (in.size() - pos) / sizeof(double)) throw IoError(source + ": truncated binary trace file");
    tr.samples.resize(len);
    std::memcpy(tr.samples.data(), in.data() + pos, len * sizeof(double));
    pos += len * sizeof(double);
    if (flags & 1) {
      tr.true_states.resize(len);
      for (auto& s : tr.true_states) s = detail::take<std::uint32_t>(in, pos, source);
    }
    out.push_back(std::move(tr));
  }
  if (pos != in.size()) throw IoError(source + ": trailing bytes in binary trace file");
  return out;
}

inline bool is_csv_path(const std::filesystem::path& p) { return p.extension() == ".csv"; }

/// Writes traces (CSV for a .csv path, binary otherwise) plus the sidecar.
inline void write_traces(const std::filesystem::path& path, const TraceSet& traces, TraceSidecar sidecar) {
  sidecar.format = is_csv_path(path) ? "csv" : "binary";
  sidecar.n_traces = traces.size();
  sidecar.lengths.clear();
  for (const auto& tr : traces) sidecar.lengths.push_back(tr.length());
  write_text_file(path, is_csv_path(path) ? traces_to_csv(traces) : traces_to_binary(traces));
  write_text_file(sidecar_path(path), dump(to_json(sidecar)));
}

inline TraceSet read_traces(const std::filesystem::path& path) {
  const auto text = read_text_file(path);
  return is_csv_path(path) ? traces_from_csv(text, path.string()) : traces_from_binary(text, path.string());
}

inline std::optional<TraceSidecar> read_sidecar(const std::filesystem::path& traces) {
  const auto p = sidecar_path(traces);
  if (!std::filesystem::exists(p)) return std::nullopt;
  try {
    return sidecar_from_json(parse_json(read_text_file(p), p.string()));
  } catch (const ConfigError& e) {
    throw IoError(e.what());
  }
}

}  // namespace qreadout::io
