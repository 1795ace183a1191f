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

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "qreadout/binomial.hpp"
#include "qreadout/calibration.hpp"
#include "qreadout/confidence.hpp"
#include "qreadout/errors.hpp"
#include "qreadout/hmm.hpp"
#include "qreadout/model.hpp"
#include "qreadout/noise.hpp"
#include "qreadout/parallel.hpp"
#include "qreadout/readout.hpp"
#include "qreadout/rng.hpp"
#include "qreadout/scenario.hpp"

namespace qreadout {

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Canonical text of every field that affects a point's results.
inline std::string canonical_description(const ScenarioPoint& p) {
  std::string out;
  auto put = [&](const char* key, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s=%.17g;", key, v);
    out += buf;
  };
  out += "model=" + to_string(p.model) + ";";
  put("n_traces", static_cast<double>(p.n_traces));
  put("length", static_cast<double>(p.length));
  put("snr", p.snr);
  put("rate", p.rate);
  if (p.zeeman_ratio) put("zeeman_ratio", *p.zeeman_ratio);
  put("correlation_time", p.correlation_time);
  put("filter_block", static_cast<double>(p.filter_block));
  out += "methods=";
  for (const auto& m : p.methods) out += m.name() + ",";
  out += ";";
  put("threshold_training", static_cast<double>(p.threshold_training_traces()));
  put("hmm_training", static_cast<double>(p.hmm_training));
  put("hmm_tolerance", p.hmm_tolerance);
  put("hmm_max_iterations", static_cast<double>(p.hmm_max_iterations));
  put("intervals", p.intervals ? 1.0 : 0.0);
  return out;
}

inline std::string config_digest(const ScenarioPoint& p, std::uint64_t seed, std::size_t index) {
  return hex64(fnv1a(canonical_description(p) + "seed=" + std::to_string(seed) +
                     ";point=" + std::to_string(index) + ";"));
}

/// Half-open range of trace ids.
struct IdRange {
  std::uint64_t begin = 0, end = 0;
  std::size_t size() const { return static_cast<std::size_t>(end - begin); }
  bool overlaps(const IdRange& o) const { return begin < o.end && o.begin < end && size() && o.size(); }
};

/// Regenerates any trace of a point from (stream, id). Even ids start in the
/// high state, odd ids in the low state.
class TraceFactory {
 public:
  TraceFactory(const ScenarioPoint& point, std::uint64_t seed, std::size_t index)
      : truth_(point.truth()),
        length_(point.length),
        seed_(seed),
        index_(index),
        high_(point.high_state()),
        low_(point.low_state()) {
    if (point.correlation_time > 0.0) noise_.assign(truth_.num_states(), point.noise());
  }

  const HmmParams& truth() const { return truth_; }
  bool white() const { return noise_.empty(); }

  SignalTrace make(std::uint64_t stream, std::uint64_t id) const {
    Rng rng = make_rng(seed_, {stream, index_, id});
    const StateIndex s0 = id % 2 == 0 ? high_ : low_;
    SignalTrace tr = white() ? sample_hmm_trace(truth_, s0, length_, rng)
                             : sample_trace(truth_, noise_, s0, length_, rng);
    tr.id = id;
    return tr;
  }

  TraceSet make_set(std::uint64_t stream, IdRange ids) const {
    TraceSet out(ids.size());
    parallel_chunks(ids.size(), detail::kTraceChunk, [&](std::size_t b, std::size_t e, std::size_t) {
      for (std::size_t k = b; k < e; ++k) out[k] = make(stream, ids.begin + k);
    });
    return out;
  }

 private:
  HmmParams truth_;
  std::vector<NoiseSpec> noise_;
  std::size_t length_;
  std::uint64_t seed_;
  std::size_t index_;
  StateIndex high_, low_;
};

struct FidelityReport {
  MethodSpec method;
  std::size_t n_traces = 0;
  std::size_t n_errors = 0;
  double infidelity = 0.0;
  double ci_lower = 0.0;
  double ci_upper = 0.0;
  std::string config_digest;
  std::uint64_t seed = 0;
  /// Threshold method: the calibrated rule and its training fidelity.
  std::optional<ThresholdConfig> threshold;
  std::optional<double> training_fidelity;
  /// HMM methods: the parameters used for decoding.
  std::optional<HmmParams> params;
  /// Starred methods: Baum-Welch summary.
  std::optional<std::size_t> training_iterations;
  std::optional<bool> training_converged;
  std::optional<double> training_log_likelihood;

  BinomialInterval interval() const { return {infidelity, ci_lower, ci_upper}; }
};

struct PointResult {
  std::size_t index = 0;
  std::string label;
  double x = 0.0;
  ScenarioPoint config;
  std::vector<FidelityReport> reports;
  /// |mu_high - mu_low| / sigma of the filtered model-matched HMM.
  std::optional<double> effective_snr;

  const FidelityReport& report(const MethodSpec& m) const {
    for (const auto& r : reports)
      if (r.method == m) return r;
    throw InvalidArgument("no report for method " + m.name());
  }
};

struct RunOptions {
  /// Single-line progress messages.
  std::function<void(const std::string&)> progress;
  /// Likelihood-ratio or Monte Carlo intervals for calibration runs.
  IntervalMethod interval_method = IntervalMethod::LikelihoodRatio;
  /// Independent training sets for Monte Carlo intervals.
  std::size_t sets = 5;
  /// Extra frozen fields for calibration runs.
  std::vector<std::string> freeze;
  ProfileOptions profile;

  void say(const std::string& msg) const {
    if (progress) progress(msg);
  }
};

namespace detail {

inline std::vector<StateIndex> decision_states(const ScenarioPoint& p) {
  if (p.model == StateModel::Psb) return {0, 1};
  return {0, 2};
}

inline StateIndex hmm_decide(const HmmParams& params, std::span<const double> samples,
                             std::span<const StateIndex> candidates) {
  return decide_initial_state(posteriors(params, samples), candidates).state;
}

inline std::string point_context(const ScenarioPoint& p, std::size_t index) {
  return "point " + std::to_string(index) + " (" + canonical_description(p) + ")";
}

/// Adds scenario context to module errors without changing their type.
template <class Fn>
auto with_context(const std::string& context, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError(context + ": " + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError(context + ": " + e.what());
  } catch (const InvalidArgument& e) {
    throw InvalidArgument(context + ": " + e.what());
  }
}

}  // namespace detail

/// Id layout of a fidelity point: test ids first, then threshold training,
/// then Baum-Welch training.
struct FidelityIdLayout {
  IdRange test, threshold_training, hmm_training;

  explicit FidelityIdLayout(const ScenarioPoint& p) {
    test = {0, p.n_traces};
    threshold_training = {test.end, test.end + (p.uses(Method::Threshold) ? p.threshold_training_traces() : 0)};
    hmm_training = {threshold_training.end,
                    threshold_training.end + (p.uses(Method::HmmStar) ? p.hmm_training : 0)};
    if (test.overlaps(threshold_training) || test.overlaps(hmm_training) ||
        threshold_training.overlaps(hmm_training))
      throw InvalidArgument("training and test trace ids overlap");
  }
};

/// Infidelity of each requested method on one point.
inline PointResult run_fidelity_point(const ScenarioPoint& point, std::uint64_t seed, std::size_t index,
                                      const RunOptions& opt = {}) {
  point.validate();
  const std::string context = detail::point_context(point, index);
  return detail::with_context(context, [&] {
    const TraceFactory factory(point, seed, index);
    const FidelityIdLayout ids(point);
    const auto candidates = detail::decision_states(point);
    const std::optional<FilterConfig> filter =
        point.uses_filter() ? std::optional<FilterConfig>(FilterConfig{point.filter_block}) : std::nullopt;
    PointResult result;
    result.index = index;
    result.config = point;

    const std::string digest = config_digest(point, seed, index);
    std::vector<FidelityReport> reports;
    for (const auto& m : point.methods) {
      FidelityReport r;
      r.method = m;
      r.config_digest = digest;
      r.seed = seed;
      reports.push_back(r);
    }

    // Calibration of every method, on training ids only.
    std::optional<ThresholdConfig> threshold;
    if (point.uses(Method::Threshold)) {
      opt.say("threshold calibration on " + std::to_string(ids.threshold_training.size()) + " traces");
      const auto training = factory.make_set(stream::kThresholdTraining, ids.threshold_training);
      ThresholdSearch search;
      search.points = 1001;
      const auto mode = point.model == StateModel::Psb ? ThresholdMode::IntegratedSignal : ThresholdMode::PeakSignal;
      const auto cal = calibrate_threshold(mode, training, point.high_state(), point.low_state(), search);
      threshold = cal.config;
      for (auto& r : reports)
        if (r.method.method == Method::Threshold) {
          r.threshold = cal.config;
          r.training_fidelity = cal.training_fidelity;
        }
    }
    const HmmParams matched = model_matched_params(factory.truth(), point.noise());
    std::optional<HmmParams> matched_filtered;
    if (filter) {
      ModelMatchOptions mm;
      mm.trace_length = point.length;
      matched_filtered = model_matched_params(factory.truth(), point.noise(), filter,
                                              derive_seed(seed, {stream::kNoiseVariance, index}), mm);
      result.effective_snr = std::abs(matched_filtered->mean(point.high_state()) -
                                      matched_filtered->mean(point.low_state())) /
                             std::sqrt(matched_filtered->variance(0));
    }
    std::optional<TraceSet> hmm_training, hmm_training_filtered;
    std::vector<HmmParams> decode(reports.size(), matched);
    for (std::size_t k = 0; k < reports.size(); ++k) {
      auto& r = reports[k];
      if (r.method.method == Method::Threshold) continue;
      if (r.method.method == Method::Hmm) {
        decode[k] = r.method.filtered ? *matched_filtered : matched;
      } else {
        if (!hmm_training) {
          opt.say("Baum-Welch training on " + std::to_string(ids.hmm_training.size()) + " traces");
          hmm_training = factory.make_set(stream::kHmmTraining, ids.hmm_training);
        }
        if (r.method.filtered && !hmm_training_filtered)
          hmm_training_filtered = averaging_filter(*filter, *hmm_training);
        const auto cfg = default_training_config(point.model, point.hmm_tolerance, point.hmm_max_iterations);
        const auto fit = train(cfg, r.method.filtered ? *hmm_training_filtered : *hmm_training);
        decode[k] = fit.params;
        r.training_iterations = fit.iterations;
        r.training_converged = fit.converged;
        r.training_log_likelihood = fit.log_likelihood();
      }
      r.params = decode[k];
    }
    hmm_training.reset();
    hmm_training_filtered.reset();

    // Test set, generated and scored chunk by chunk.
    opt.say("scoring " + std::to_string(ids.test.size()) + " test traces");
    const std::size_t nm = reports.size();
    const std::size_t chunks = (ids.test.size() + detail::kTraceChunk - 1) / detail::kTraceChunk;
    std::vector<std::size_t> errors(chunks * nm, 0);
    parallel_chunks(ids.test.size(), detail::kTraceChunk, [&](std::size_t b, std::size_t e, std::size_t c) {
      for (std::size_t n = b; n < e; ++n) {
        const auto tr = factory.make(stream::kTest, ids.test.begin + n);
        const StateIndex truth = tr.true_states[0];
        std::optional<SignalTrace> filtered;
        if (filter) filtered = averaging_filter(*filter, tr);
        for (std::size_t k = 0; k < nm; ++k) {
          const auto& m = reports[k].method;
          StateIndex guess;
          if (m.method == Method::Threshold)
            guess = threshold_assign(*threshold, tr);
          else
            guess = detail::hmm_decide(decode[k], m.filtered ? filtered->samples : tr.samples, candidates);
          if (guess != truth) ++errors[c * nm + k];
        }
      }
    });
    for (std::size_t k = 0; k < nm; ++k) {
      auto& r = reports[k];
      r.n_traces = ids.test.size();
      for (std::size_t c = 0; c < chunks; ++c) r.n_errors += errors[c * nm + k];
      const auto ci = binomial_infidelity_interval(r.n_errors, r.n_traces);
      r.infidelity = ci.estimate;
      r.ci_lower = ci.lower;
      r.ci_upper = ci.upper;
    }
    result.reports = std::move(reports);
    return result;
  });
}

/// Baum-Welch calibration of one point against its model-matched HMM.
struct CalibrationResult {
  std::size_t index = 0;
  std::string label;
  double x = 0.0;
  ScenarioPoint config;
  std::string config_digest;
  std::uint64_t seed = 0;
  /// Model-matched parameters: the generating model with every variance
  /// replaced by Sigma_0.
  HmmParams reference;
  HmmParams estimate;
  std::vector<double> ll_history;
  std::size_t iterations = 0;
  bool converged = false;
  std::vector<ConfidenceInterval> intervals;
  std::vector<Residual> residuals;
  /// Mean over states of |sigma_i^2 - Sigma_0| / Sigma_0.
  double variance_deviation = 0.0;

  double max_normalized_residual() const {
    double m = 0.0;
    for (const auto& r : residuals) m = std::max(m, r.normalized);
    return m;
  }
};

inline CalibrationResult run_calibration_point(const ScenarioPoint& point, std::uint64_t seed, std::size_t index,
                                               const RunOptions& opt = {}) {
  point.validate();
  return detail::with_context(detail::point_context(point, index), [&] {
    const TraceFactory factory(point, seed, index);
    auto cfg = default_training_config(point.model, point.hmm_tolerance, point.hmm_max_iterations);
    for (const auto& id : expand_fields(opt.freeze, point.num_states())) cfg.step.frozen.insert(id);
    const auto sets = opt.interval_method == IntervalMethod::MonteCarlo ? std::max<std::size_t>(opt.sets, 2) : 1;
    std::vector<TraceSet> data;
    for (std::size_t s = 0; s < sets; ++s) {
      const std::uint64_t first = static_cast<std::uint64_t>(s) * point.n_traces;
      data.push_back(factory.make_set(stream::kHmmTraining, {first, first + point.n_traces}));
    }
    opt.say("Baum-Welch on " + std::to_string(point.n_traces) + " traces of length " + std::to_string(point.length));
    const auto fit = train(cfg, data.front());

    CalibrationResult r{index, "", 0.0, point, config_digest(point, seed, index), seed,
                        model_matched_params(factory.truth(), point.noise()), fit.params,
                        fit.ll_history, fit.iterations, fit.converged, {}, {}, 0.0};
    if (point.intervals) {
      if (opt.interval_method == IntervalMethod::LikelihoodRatio) {
        opt.say("likelihood-ratio intervals");
        auto po = opt.profile;
        po.step = cfg.step;
        r.intervals = likelihood_ratio_intervals(fit.params, data.front(), po);
      } else {
        opt.say("Monte Carlo intervals from " + std::to_string(sets) + " training sets");
        r.intervals = monte_carlo_intervals(cfg, data);
      }
      r.residuals = residual_table(r.intervals, r.reference);
    }
    const double sigma0 = point.noise().variance();
    double dev = 0.0;
    for (std::size_t i = 0; i < fit.params.num_states(); ++i) dev += std::abs(fit.params.variance(i) - sigma0) / sigma0;
    r.variance_deviation = dev / static_cast<double>(fit.params.num_states());
    return r;
  });
}

struct ScenarioResult {
  Scenario scenario;
  std::vector<PointResult> fidelity;
  std::vector<CalibrationResult> calibration;
};

inline ScenarioResult run_scenario(const Scenario& scenario, const RunOptions& opt = {}) {
  scenario.validate();
  ScenarioResult out;
  out.scenario = scenario;
  const auto points = scenario.expand();
  for (std::size_t k = 0; k < points.size(); ++k) {
    const std::string label = scenario.points.empty() ? scenario.name : scenario.points[k].label;
    const double x = scenario.points.empty() ? 0.0 : scenario.points[k].x;
    RunOptions local = opt;
    if (opt.progress)
      local.progress = [&, k](const std::string& msg) {
        opt.progress("[" + std::to_string(k + 1) + "/" + std::to_string(points.size()) + "] " + label + ": " + msg);
      };
    if (scenario.kind == ScenarioKind::Fidelity) {
      auto r = run_fidelity_point(points[k], scenario.seed, k, local);
      r.label = label;
      r.x = x;
      out.fidelity.push_back(std::move(r));
    } else {
      auto r = run_calibration_point(points[k], scenario.seed, k, local);
      r.label = label;
      r.x = x;
      out.calibration.push_back(std::move(r));
    }
  }
  return out;
}

}  // namespace qreadout
