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

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qreadout/calibration.hpp"
#include "qreadout/errors.hpp"
#include "qreadout/model.hpp"
#include "qreadout/noise.hpp"
#include "qreadout/thermal.hpp"

namespace qreadout {

/// Pauli spin blockade (triplet 0, singlet 1) or Elzerman (spin up 0,
/// empty dot 1, spin down 2).
enum class StateModel { Psb, Elzerman };

inline std::string to_string(StateModel m) { return m == StateModel::Psb ? "psb" : "elzerman"; }

inline StateModel parse_state_model(const std::string& s) {
  if (s == "psb") return StateModel::Psb;
  if (s == "elzerman") return StateModel::Elzerman;
  throw ConfigError("unknown state model '" + s + "' (expected psb or elzerman)");
}

enum class Method { Threshold, Hmm, HmmStar };

/// A readout method; HMM methods may run on averaged (filtered) traces.
struct MethodSpec {
  Method method = Method::Hmm;
  bool filtered = false;

  std::string name() const {
    std::string base = method == Method::Threshold ? "threshold" : method == Method::Hmm ? "hmm" : "hmm-star";
    return filtered ? base + "-filtered" : base;
  }

  static MethodSpec parse(const std::string& s) {
    for (auto m : {Method::Threshold, Method::Hmm, Method::HmmStar})
      for (bool f : {false, true}) {
        MethodSpec spec{m, f};
        if (m == Method::Threshold && f) continue;
        if (spec.name() == s) return spec;
      }
    throw ConfigError("unknown method '" + s +
                      "' (expected threshold, hmm, hmm-star, hmm-filtered or hmm-star-filtered)");
  }

  friend bool operator==(const MethodSpec&, const MethodSpec&) = default;
};

/// Everything that defines one fidelity or calibration run.
struct ScenarioPoint {
  StateModel model = StateModel::Psb;
  /// Test traces (fidelity) or training traces (calibration).
  std::size_t n_traces = 10000;
  std::size_t length = 300;
  /// |mu_high - mu_low| / sqrt(Sigma_0) with unit signal contrast.
  double snr = 1.0;
  /// PSB: relaxation probability A12. Elzerman: tunnelling probability A0.
  double rate = 0.0022;
  /// Elzerman only: E_Z / (k_B T). Absent means zero temperature.
  std::optional<double> zeeman_ratio;
  /// Gaussian-spectrum correlation time T_c; 0 is white noise.
  double correlation_time = 0.0;
  /// Averaging filter block size t_s for the filtered HMM methods.
  std::size_t filter_block = 0;
  std::vector<MethodSpec> methods{{Method::Threshold, false}, {Method::Hmm, false}};
  /// Threshold training traces; 0 means as many as test traces.
  std::size_t threshold_training = 0;
  /// Baum-Welch training traces for the starred methods.
  std::size_t hmm_training = 2000;
  double hmm_tolerance = 1e-3;
  std::size_t hmm_max_iterations = 1000;
  /// Calibration runs: compute likelihood-ratio intervals.
  bool intervals = true;

  std::size_t num_states() const { return model == StateModel::Psb ? 2 : 3; }
  std::size_t threshold_training_traces() const {
    return threshold_training == 0 ? n_traces : threshold_training;
  }
  bool uses(Method m) const {
    for (const auto& s : methods)
      if (s.method == m) return true;
    return false;
  }
  bool uses_filter() const {
    for (const auto& s : methods)
      if (s.filtered) return true;
    return false;
  }

  void validate() const {
    if (n_traces < 1) throw ConfigError("n_traces must be >= 1");
    if (length < 1) throw ConfigError("length must be >= 1");
    if (!(snr > 0.0) || !std::isfinite(snr)) throw ConfigError("snr must be > 0");
    if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("rate must lie in [0, 1)");
    if (zeeman_ratio) {
      if (model != StateModel::Elzerman) throw ConfigError("zeeman_ratio applies to the elzerman model only");
      if (!(*zeeman_ratio >= 0.0)) throw ConfigError("zeeman_ratio must be >= 0");
      if (!(rate > 0.0)) throw ConfigError("thermal model needs rate > 0");
    }
    if (!(correlation_time >= 0.0) || !std::isfinite(correlation_time))
      throw ConfigError("correlation_time must be >= 0");
    if (uses_filter()) {
      if (filter_block < 1) throw ConfigError("filtered methods need filter_block >= 1");
      if (filter_block > length) throw ConfigError("filter_block exceeds the trace length");
    }
    for (const auto& s : methods)
      if (s.method == Method::Threshold && s.filtered)
        throw ConfigError("the threshold method runs on raw traces only");
    if (uses(Method::HmmStar) && hmm_training < 1) throw ConfigError("hmm-star needs hmm_training >= 1");
    if (!(hmm_tolerance > 0.0)) throw ConfigError("hmm_tolerance must be > 0");
    if (hmm_max_iterations < 1) throw ConfigError("hmm_max_iterations must be >= 1");
  }

  /// Data-generating model. PSB: mu = (1, 0), A21 = 0. Elzerman: mu =
  /// (0, 1, 0), A12 = A23 = rate at zero temperature, thermal rates
  /// otherwise. Initial states are split evenly.
  HmmParams truth() const {
    const double var = 1.0 / (snr * snr);
    if (model == StateModel::Psb)
      return HmmParams({0.5, 0.5}, {1.0, 0.0}, {var, var}, {1.0 - rate, rate, 0.0, 1.0},
                       {"triplet", "singlet"});
    if (zeeman_ratio) return elzerman_thermal_params({rate, *zeeman_ratio}, snr);
    return HmmParams({0.5, 0.0, 0.5}, {0.0, 1.0, 0.0}, {var, var, var},
                     {1.0 - rate, rate, 0.0, 0.0, 1.0 - rate, rate, 0.0, 0.0, 1.0},
                     {"up", "empty", "down"});
  }

  /// Zero-mean noise with Sigma_0 = 1 / SNR^2.
  NoiseSpec noise() const {
    const double var = 1.0 / (snr * snr);
    return correlation_time > 0.0 ? NoiseSpec::gaussian(var, correlation_time) : NoiseSpec::white(var);
  }

  /// State whose initial occupation gives the larger signal statistic, and
  /// the other initial state.
  StateIndex high_state() const { return 0; }
  StateIndex low_state() const { return model == StateModel::Psb ? 1 : 2; }
};

/// Baum-Welch start point: the standard initial guesses for each model,
/// with pi frozen for Elzerman.
inline TrainingConfig default_training_config(StateModel model, double tolerance = 1e-3,
                                              std::size_t max_iterations = 1000) {
  if (model == StateModel::Psb) {
    TrainingConfig cfg{HmmParams({0.45, 0.55}, {0.4, 0.3}, {0.36, 0.36},
                                 {1 - 3e-4, 3e-4, 3e-4, 1 - 3e-4}, {"triplet", "singlet"})};
    cfg.ll_tolerance = tolerance;
    cfg.max_iterations = max_iterations;
    return cfg;
  }
  TrainingConfig cfg{HmmParams({0.5, 0.0, 0.5}, {0.3, 0.4, 0.3}, {0.36, 0.36, 0.36},
                               {1 - 3e-4, 2e-4, 1e-4, 1e-4, 1 - 3e-4, 2e-4, 1e-4, 1e-4, 1 - 2e-4},
                               {"up", "empty", "down"})};
  cfg.step.frozen = expand_fields({"pi"}, 3);
  cfg.ll_tolerance = tolerance;
  cfg.max_iterations = max_iterations;
  return cfg;
}

/// Point overrides are keyed by field name.
inline void apply_override(ScenarioPoint& p, const std::string& key, double value) {
  auto count = [&](const char* what) {
    if (!(value >= 0.0) || value != std::floor(value))
      throw ConfigError(std::string(what) + " must be a non-negative integer");
    return static_cast<std::size_t>(value);
  };
  if (key == "rate") p.rate = value;
  else if (key == "snr") p.snr = value;
  else if (key == "zeeman_ratio") p.zeeman_ratio = value;
  else if (key == "correlation_time") p.correlation_time = value;
  else if (key == "length") p.length = count("length");
  else if (key == "n_traces") p.n_traces = count("n_traces");
  else if (key == "filter_block") p.filter_block = count("filter_block");
  else if (key == "threshold_training") p.threshold_training = count("threshold_training");
  else if (key == "hmm_training") p.hmm_training = count("hmm_training");
  else throw ConfigError("unknown sweep field '" + key + "'");
}

struct SweepPoint {
  std::string label;
  /// Abscissa for plotting.
  double x = 0.0;
  std::map<std::string, double> overrides;
};

enum class ScenarioKind { Fidelity, Calibration };

inline std::string to_string(ScenarioKind k) { return k == ScenarioKind::Fidelity ? "fidelity" : "calibration"; }

inline ScenarioKind parse_scenario_kind(const std::string& s) {
  if (s == "fidelity") return ScenarioKind::Fidelity;
  if (s == "calibration") return ScenarioKind::Calibration;
  throw ConfigError("unknown scenario kind '" + s + "'");
}

struct Scenario {
  std::string name;
  std::string description;
  ScenarioKind kind = ScenarioKind::Fidelity;
  /// Name of the swept quantity, used as the x column.
  std::string sweep_axis;
  ScenarioPoint base;
  /// Empty means a single run of `base`.
  std::vector<SweepPoint> points;
  std::uint64_t seed = 1;

  std::vector<ScenarioPoint> expand() const {
    std::vector<ScenarioPoint> out;
    if (points.empty()) {
      out.push_back(base);
    } else {
      for (const auto& sp : points) {
        ScenarioPoint p = base;
        for (const auto& [k, v] : sp.overrides) apply_override(p, k, v);
        out.push_back(p);
      }
    }
    return out;
  }

  void validate() const {
    if (kind == ScenarioKind::Calibration && !points.empty() && sweep_axis.empty())
      throw ConfigError("a sweep needs sweep_axis");
    for (const auto& p : expand()) p.validate();
  }
};

namespace detail {

inline std::vector<double> log_space(double lo, double hi, std::size_t n) {
  std::vector<double> v(n);
  for (std::size_t k = 0; k < n; ++k)
    v[k] = lo * std::pow(hi / lo, static_cast<double>(k) / static_cast<double>(n - 1));
  return v;
}

inline std::string number_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::vector<SweepPoint> sweep_over(const std::string& key, const std::vector<double>& values) {
  std::vector<SweepPoint> out;
  for (double v : values) out.push_back({key + "=" + number_label(v), v, {{key, v}}});
  return out;
}

}  // namespace detail

/// Built-in scenario sweeps.
inline std::vector<Scenario> scenario_catalog() {
  using detail::log_space;
  using detail::sweep_over;
  const MethodSpec threshold{Method::Threshold, false}, hmm{Method::Hmm, false},
      hmm_star{Method::HmmStar, false}, hmm_filtered{Method::Hmm, true};
  std::vector<Scenario> out;

  {
    Scenario s;
    s.name = "psb-white-sweep-A";
    s.description = "PSB, white noise, SNR 1, relaxation probability sweep";
    s.sweep_axis = "A12";
    s.base.methods = {threshold, hmm, hmm_star};
    s.points = sweep_over("rate", log_space(1e-4, 1e-2, 7));
    out.push_back(s);
  }
  {
    Scenario s;
    s.name = "psb-white-sweep-snr";
    s.description = "PSB, white noise, A12 = 0.0022, SNR sweep";
    s.sweep_axis = "SNR";
    s.base.methods = {threshold, hmm, hmm_star};
    s.points = sweep_over("snr", {0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0});
    out.push_back(s);
  }
  {
    Scenario s;
    s.name = "psb-corr-Tc1";
    s.description = "PSB, Gaussian-spectrum noise T_c = 1, short traces";
    s.sweep_axis = "A12";
    s.base.n_traces = 100000;
    s.base.length = 30;
    s.base.correlation_time = 1.0;
    s.base.methods = {threshold, hmm};
    s.points = sweep_over("rate", log_space(1e-3, 1e-1, 7));
    out.push_back(s);
  }
  {
    Scenario s;
    s.name = "psb-corr-Tc3-filter";
    s.description = "PSB, Gaussian-spectrum noise T_c = 3, averaging filter t_s = 20";
    s.sweep_axis = "A12";
    s.base.correlation_time = 3.0;
    s.base.filter_block = 20;
    s.base.methods = {threshold, hmm, hmm_filtered};
    s.points = sweep_over("rate", log_space(std::pow(10.0, -4.5), std::pow(10.0, -1.5), 7));
    out.push_back(s);
  }
  {
    Scenario s;
    s.name = "elzerman-snr";
    s.description = "Elzerman, zero temperature, A12 = A23 = 0.02, SNR sweep";
    s.sweep_axis = "SNR";
    s.base.model = StateModel::Elzerman;
    s.base.length = 400;
    s.base.rate = 0.02;
    s.base.methods = {threshold, hmm, hmm_star};
    s.points = sweep_over("snr", {1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0});
    out.push_back(s);
  }
  {
    Scenario s;
    s.name = "elzerman-thermal";
    s.description = "Elzerman at finite temperature, SNR 4, four tunnelling probabilities";
    s.sweep_axis = "kT/EZ";
    s.base.model = StateModel::Elzerman;
    s.base.snr = 4.0;
    s.base.methods = {threshold, hmm};
    const std::vector<std::pair<double, std::size_t>> rates{{0.005, 800}, {0.01, 400}, {0.02, 250}, {0.04, 150}};
    for (const auto& [a0, len] : rates)
      for (double kt : {0.05, 0.1, 0.2, 0.4, 0.7, 1.0, 2.0})
        s.points.push_back({"A0=" + detail::number_label(a0) + ",kT/EZ=" + detail::number_label(kt), kt,
                            {{"rate", a0}, {"length", static_cast<double>(len)}, {"zeeman_ratio", 1.0 / kt}}});
    out.push_back(s);
  }
  {
    Scenario s;
    s.name = "baumwelch-corrfail";
    s.description = "Baum-Welch calibration on Gaussian-spectrum noise, correlation time sweep";
    s.kind = ScenarioKind::Calibration;
    s.sweep_axis = "Tc";
    s.base.n_traces = 2000;
    s.base.length = 1000;
    s.base.rate = 1e-4;
    s.base.methods = {};
    s.points = sweep_over("correlation_time", {0.0, 1.0, 2.0, 3.0});
    out.push_back(s);
  }
  return out;
}

inline Scenario find_scenario(const std::string& name) {
  for (auto& s : scenario_catalog())
    if (s.name == name) return s;
  std::string known;
  for (const auto& s : scenario_catalog()) known += (known.empty() ? "" : ", ") + s.name;
  throw ConfigError("unknown scenario '" + name + "' (known: " + known + ")");
}

}  // namespace qreadout
