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
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qreadout/errors.hpp"
#include "qreadout/model.hpp"
#include "qreadout/noise.hpp"
#include "qreadout/parallel.hpp"
#include "qreadout/rng.hpp"

namespace qreadout {

enum class ThresholdMode { IntegratedSignal, PeakSignal };

inline std::string to_string(ThresholdMode m) {
  return m == ThresholdMode::IntegratedSignal ? "integrated" : "peak";
}

/// Threshold rule: the statistic over the first `window` samples (mean for
/// IntegratedSignal, maximum for PeakSignal) is compared to `threshold`.
struct ThresholdConfig {
  ThresholdMode mode = ThresholdMode::IntegratedSignal;
  double threshold = 0.5;
  std::size_t window = 1;
  /// State reported when the statistic exceeds the threshold.
  StateIndex high_state = 0;
  /// State reported otherwise.
  StateIndex low_state = 1;

  void validate(std::optional<std::size_t> length = std::nullopt) const {
    if (window < 1) throw InvalidArgument("threshold window must be >= 1");
    if (length && window > *length)
      throw InvalidArgument("threshold window " + std::to_string(window) +
                            " exceeds trace length " + std::to_string(*length));
    if (!std::isfinite(threshold)) throw InvalidArgument("threshold must be finite");
  }
};

inline double threshold_statistic(ThresholdMode mode, std::size_t window,
                                  std::span<const double> samples) {
  if (window < 1 || window > samples.size())
    throw InvalidArgument("threshold window " + std::to_string(window) +
                          " does not fit a trace of length " + std::to_string(samples.size()));
  if (mode == ThresholdMode::PeakSignal)
    return *std::max_element(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(window));
  double s = 0.0;
  for (std::size_t t = 0; t < window; ++t) s += samples[t];
  return s / static_cast<double>(window);
}

inline StateIndex threshold_assign(const ThresholdConfig& config, std::span<const double> samples) {
  config.validate(samples.size());
  return threshold_statistic(config.mode, config.window, samples) > config.threshold
             ? config.high_state
             : config.low_state;
}

inline StateIndex threshold_assign(const ThresholdConfig& config, const SignalTrace& trace) {
  return threshold_assign(config, trace.samples);
}

/// Search grid for calibrate_threshold.
struct ThresholdSearch {
  /// Threshold range; both ends default to the 1% and 99% quantiles of the
  /// window-1 statistic over the training set.
  std::optional<double> lower, upper;
  std::size_t points = 201;
  /// Every window up to this value is tried; above it the windows grow
  /// geometrically by `growth`. The full trace length is always included.
  std::size_t dense_windows = 64;
  double growth = 1.05;
  std::optional<std::size_t> max_window;
};

/// Threshold range [min mu - 2 sigma, max mu + 2 sigma] of a model.
inline ThresholdSearch threshold_search_for(const HmmParams& params) {
  double lo = params.mean(0), hi = params.mean(0), sd = 0.0;
  for (std::size_t i = 0; i < params.num_states(); ++i) {
    lo = std::min(lo, params.mean(i));
    hi = std::max(hi, params.mean(i));
    sd = std::max(sd, std::sqrt(params.variance(i)));
  }
  ThresholdSearch s;
  s.lower = lo - 2.0 * sd;
  s.upper = hi + 2.0 * sd;
  return s;
}

inline std::vector<std::size_t> threshold_windows(std::size_t length, const ThresholdSearch& s) {
  const std::size_t top = std::min(length, s.max_window.value_or(length));
  std::vector<std::size_t> w;
  for (std::size_t k = 1; k <= std::min(top, s.dense_windows); ++k) w.push_back(k);
  double x = static_cast<double>(s.dense_windows);
  while (true) {
    x *= std::max(s.growth, 1.0 + 1e-9);
    const auto k = static_cast<std::size_t>(std::llround(x));
    if (k >= top) break;
    if (k > w.back()) w.push_back(k);
  }
  if (w.empty() || w.back() != top) w.push_back(top);
  return w;
}

struct ThresholdCalibration {
  ThresholdConfig config;
  double training_fidelity = 0.0;
  std::size_t training_traces = 0;
  std::vector<std::size_t> windows;
  /// Best training fidelity reached for each window.
  std::vector<double> window_fidelity;
  std::vector<double> thresholds;
};

/// Grid search over (threshold, window) maximising the fraction of training
/// traces whose true initial state is recovered. Ties go to the smallest
/// window, then the smallest threshold. Traces whose initial state is neither
/// high_state nor low_state count as errors for every rule.
inline ThresholdCalibration calibrate_threshold(ThresholdMode mode, const TraceSet& training,
                                                StateIndex high_state, StateIndex low_state,
                                                const ThresholdSearch& search = {}) {
  if (training.empty()) throw InvalidArgument("threshold calibration needs training traces");
  std::size_t len = training.front().length();
  for (const auto& tr : training) {
    if (!tr.labeled()) throw InvalidArgument("threshold calibration needs labelled traces");
    tr.validate();
    len = std::min(len, tr.length());
  }
  ThresholdCalibration out;
  out.training_traces = training.size();
  out.windows = threshold_windows(len, search);

  double lo, hi;
  if (search.lower && search.upper) {
    lo = *search.lower;
    hi = *search.upper;
  } else {
    std::vector<double> first;
    for (const auto& tr : training) first.push_back(tr.samples[0]);
    std::sort(first.begin(), first.end());
    auto q = [&](double p) { return first[static_cast<std::size_t>(p * (first.size() - 1))]; };
    lo = search.lower.value_or(q(0.01));
    hi = search.upper.value_or(q(0.99));
  }
  if (!(hi > lo)) hi = lo + 1.0;
  const std::size_t points = std::max<std::size_t>(search.points, 2);
  out.thresholds.resize(points);
  for (std::size_t k = 0; k < points; ++k)
    out.thresholds[k] = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(points - 1);

  const std::size_t n = training.size();
  std::vector<double> running(n, 0.0);
  std::vector<double> high_stats, low_stats;
  double best = -1.0;
  std::size_t wi = 0;
  for (std::size_t t = 0; t < len && wi < out.windows.size(); ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      const double y = training[i].samples[t];
      if (mode == ThresholdMode::PeakSignal)
        running[i] = t == 0 ? y : std::max(running[i], y);
      else
        running[i] += y;
    }
    if (t + 1 != out.windows[wi]) continue;
    const std::size_t w = out.windows[wi++];
    high_stats.clear();
    low_stats.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const double s = mode == ThresholdMode::PeakSignal ? running[i] : running[i] / static_cast<double>(w);
      const StateIndex truth = training[i].true_states[0];
      if (truth == high_state)
        high_stats.push_back(s);
      else if (truth == low_state)
        low_stats.push_back(s);
    }
    std::sort(high_stats.begin(), high_stats.end());
    std::sort(low_stats.begin(), low_stats.end());
    double window_best = -1.0;
    for (double th : out.thresholds) {
      // high correct: s > th; low correct: s <= th.
      const auto high_ok = high_stats.end() - std::upper_bound(high_stats.begin(), high_stats.end(), th);
      const auto low_ok = std::upper_bound(low_stats.begin(), low_stats.end(), th) - low_stats.begin();
      const double fid = static_cast<double>(high_ok + low_ok) / static_cast<double>(n);
      window_best = std::max(window_best, fid);
      if (fid > best) {
        best = fid;
        out.config = ThresholdConfig{mode, th, w, high_state, low_state};
      }
    }
    out.window_fidelity.push_back(window_best);
  }
  out.training_fidelity = best;
  return out;
}

inline ThresholdCalibration calibrate_threshold(ThresholdMode mode, const TraceSet& training,
                                                const ThresholdSearch& search = {}) {
  return mode == ThresholdMode::IntegratedSignal
             ? calibrate_threshold(mode, training, 0, 1, search)
             : calibrate_threshold(mode, training, 0, 2, search);
}

struct FilterConfig {
  std::size_t block_size = 1;

  void validate() const {
    if (block_size < 1) throw InvalidArgument("filter block size t_s must be >= 1");
  }
};

/// Replaces each block of t_s consecutive samples by its mean; the trailing
/// remainder is dropped. True states are downsampled by majority within the
/// block, ties going to the state that occurs first in the block.
inline SignalTrace averaging_filter(const FilterConfig& config, const SignalTrace& trace) {
  config.validate();
  const std::size_t ts = config.block_size;
  const std::size_t len = trace.length();
  if (ts > len)
    throw InvalidArgument("filter block size " + std::to_string(ts) + " exceeds trace length " +
                          std::to_string(len));
  const std::size_t blocks = len / ts;
  SignalTrace out;
  out.id = trace.id;
  if (trace.sample_interval) out.sample_interval = *trace.sample_interval * static_cast<double>(ts);
  out.samples.resize(blocks);
  for (std::size_t j = 0; j < blocks; ++j) {
    double s = 0.0;
    for (std::size_t k = 0; k < ts; ++k) s += trace.samples[j * ts + k];
    out.samples[j] = s / static_cast<double>(ts);
  }
  if (trace.labeled()) {
    out.true_states.resize(blocks);
    std::vector<std::size_t> count;
    for (std::size_t j = 0; j < blocks; ++j) {
      const auto* s = trace.true_states.data() + j * ts;
      StateIndex top = 0;
      for (std::size_t k = 0; k < ts; ++k) top = std::max(top, s[k]);
      count.assign(top + 1, 0);
      for (std::size_t k = 0; k < ts; ++k) ++count[s[k]];
      StateIndex pick = s[0];
      for (std::size_t k = 1; k < ts; ++k)
        if (count[s[k]] > count[pick]) pick = s[k];
      out.true_states[j] = pick;
    }
  }
  return out;
}

inline TraceSet averaging_filter(const FilterConfig& config, const TraceSet& traces) {
  TraceSet out;
  out.reserve(traces.size());
  for (const auto& tr : traces) out.push_back(averaging_filter(config, tr));
  return out;
}

/// How the filtered variance in model_matched_params is obtained.
struct ModelMatchOptions {
  /// Length of the unfiltered noise traces.
  std::size_t trace_length = 300;
  /// Number of no-transition noise traces used for the sample variance.
  std::size_t variance_traces = 2000;
  /// Use the exact variance of a block mean of the circular process instead
  /// of the sample variance.
  bool exact = false;
};

/// Variance of the mean of t_s consecutive samples of a stationary process
/// with the given spectrum (circular, length T).
inline double block_mean_variance(const NoiseSpec& noise, std::size_t block_size,
                                  std::size_t length) {
  const auto sigma = autocorrelation_from_spectrum(noise.spectrum(length));
  const auto ts = static_cast<std::ptrdiff_t>(block_size);
  const auto n = static_cast<std::ptrdiff_t>(length);
  double v = 0.0;
  for (std::ptrdiff_t d = -(ts - 1); d <= ts - 1; ++d) {
    const std::ptrdiff_t lag = ((d % n) + n) % n;
    v += static_cast<double>(ts - std::abs(d)) * sigma[static_cast<std::size_t>(lag)];
  }
  return v / static_cast<double>(ts * ts);
}

/// Sample variance of filtered noise generated without transitions.
inline double filtered_noise_variance(const NoiseSpec& noise, const FilterConfig& filter,
                                      const ModelMatchOptions& opt, std::uint64_t seed) {
  const NoiseSpec centred = noise.with_mean(0.0);
  const std::size_t chunk = 16;
  const std::size_t chunks = (opt.variance_traces + chunk - 1) / chunk;
  std::vector<double> s1(chunks, 0.0), s2(chunks, 0.0);
  std::vector<std::size_t> cnt(chunks, 0);
  parallel_chunks(opt.variance_traces, chunk, [&](std::size_t b, std::size_t e, std::size_t c) {
    for (std::size_t n = b; n < e; ++n) {
      Rng rng = make_rng(seed, {stream::kNoiseVariance, n});
      SignalTrace tr;
      tr.samples = sample_noise(centred, opt.trace_length, rng);
      const auto f = averaging_filter(filter, tr);
      for (double v : f.samples) {
        s1[c] += v;
        s2[c] += v * v;
      }
      cnt[c] += f.samples.size();
    }
  });
  double a = 0.0, b = 0.0, k = 0.0;
  for (std::size_t c = 0; c < chunks; ++c) {
    a += s1[c];
    b += s2[c];
    k += static_cast<double>(cnt[c]);
  }
  if (k < 2.0) throw InvalidArgument("too few filtered samples for a variance estimate");
  const double mean = a / k;
  return (b - k * mean * mean) / (k - 1.0);
}

/// Model-matched HMM for data generated with `original`'s pi, mu and A and
/// stationary noise `noise`. Without filtering (or t_s = 1) every variance
/// becomes Sigma_0. With filtering, off-diagonal A_ij become t_s A_ij and the
/// variances are those of the filtered noise.
inline HmmParams model_matched_params(const HmmParams& original, const NoiseSpec& noise,
                                      std::optional<FilterConfig> filter = std::nullopt,
                                      std::uint64_t seed = 0, const ModelMatchOptions& opt = {}) {
  noise.validate();
  const std::size_t m = original.num_states();
  std::vector<double> pi(original.initial().begin(), original.initial().end());
  std::vector<double> mu(original.means().begin(), original.means().end());
  std::vector<double> a(original.transitions().begin(), original.transitions().end());
  if (!filter || filter->block_size == 1) {
    if (filter) filter->validate();
    return HmmParams(pi, mu, std::vector<double>(m, noise.variance()), a, original.labels());
  }
  filter->validate();
  const double ts = static_cast<double>(filter->block_size);
  for (std::size_t i = 0; i < m; ++i) {
    double off = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (i == j) continue;
      const double scaled = a[i * m + j] * ts;
      if (scaled >= 1.0)
        throw ScaledProbabilityInvalid(ParamId::transition(i, j).name() + " * t_s = " +
                                       std::to_string(scaled) + " is not a probability");
      a[i * m + j] = scaled;
      off += scaled;
    }
    if (off > 1.0)
      throw ScaledProbabilityInvalid("row " + std::to_string(i + 1) +
                                     " of the scaled transition matrix exceeds one");
    a[i * m + i] = 1.0 - off;
  }
  double var;
  if (opt.exact)
    var = block_mean_variance(noise, filter->block_size, opt.trace_length);
  else
    var = filtered_noise_variance(noise, *filter, opt, seed);
  return HmmParams(pi, mu, std::vector<double>(m, var), a, original.labels());
}

/// Two Gaussian hypotheses without transitions.
struct TwoStateGaussians {
  double prior_a = 0.5, prior_b = 0.5;
  double mean_a = 0.0, var_a = 1.0;
  double mean_b = 1.0, var_b = 1.0;
};

/// ln R = ln P(A | y) - ln P(B | y), written through the sufficient
/// statistics mean(y) and mean(y^2). Positive values favour A.
inline double log_posterior_ratio_two_state(const TwoStateGaussians& g,
                                            std::span<const double> samples) {
  if (samples.empty()) throw InvalidArgument("empty trace");
  const double t = static_cast<double>(samples.size());
  double y1 = 0.0, y2 = 0.0;
  for (double y : samples) {
    y1 += y;
    y2 += y * y;
  }
  y1 /= t;
  y2 /= t;
  const double sa = std::sqrt(g.var_a), sb = std::sqrt(g.var_b);
  return std::log(g.prior_a / g.prior_b) + t * std::log(sb / sa) +
         t * ((g.mean_b * g.mean_b / (2.0 * g.var_b) - g.mean_a * g.mean_a / (2.0 * g.var_a)) +
              y2 * (1.0 / (2.0 * g.var_b) - 1.0 / (2.0 * g.var_a)) +
              y1 * (g.mean_a / g.var_a - g.mean_b / g.var_b));
}

/// Mean-signal threshold where ln R = 0 for equal variances; for
/// mean_a < mean_b, state A is the more probable one below it.
inline double optimal_integrated_threshold(const TwoStateGaussians& g, std::size_t length) {
  if (g.var_a != g.var_b) throw InvalidArgument("the integrated-signal threshold needs equal variances");
  if (g.mean_a == g.mean_b) throw InvalidArgument("the two means must differ");
  return 0.5 * (g.mean_a + g.mean_b) +
         g.var_a * std::log(g.prior_a / g.prior_b) /
             (static_cast<double>(length) * (g.mean_b - g.mean_a));
}

}  // namespace qreadout
