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

#include "qreadout/readout.hpp"

#include <cmath>
#include <random>
#include <vector>

#include "gtest/gtest.h"
#include "qreadout/hmm.hpp"
#include "qreadout/noise.hpp"

namespace qreadout {
namespace {

HmmParams psb(double a12, double snr = 1.0) {
  const double var = 1.0 / (snr * snr);
  return HmmParams({0.5, 0.5}, {1.0, 0.0}, {var, var}, {1.0 - a12, a12, 0.0, 1.0});
}

TraceSet labelled_set(const HmmParams& p, std::size_t n, std::size_t len, std::uint64_t seed) {
  TraceSet ts;
  for (std::size_t k = 0; k < n; ++k) {
    auto tr = sample_hmm_trace(p, StateIndex(k % 2), len, derive_seed(seed, {k}));
    tr.id = k;
    ts.push_back(std::move(tr));
  }
  return ts;
}

TEST(ThresholdAssign, ZeroNoiseTriplet) {
  std::vector<double> y(50, 1.0);
  ThresholdConfig c{ThresholdMode::IntegratedSignal, 0.5, 20, 0, 1};
  EXPECT_EQ(threshold_assign(c, y), 0u);
}

TEST(ThresholdAssign, EarlyDecayGivesFalseSinglet) {
  std::vector<double> y(300, 0.0);
  for (int t = 0; t < 14; ++t) y[t] = 1.0;
  ThresholdConfig c{ThresholdMode::IntegratedSignal, 0.5, 100, 0, 1};
  EXPECT_EQ(threshold_assign(c, y), 1u);
}

TEST(ThresholdAssign, ElzermanBlipCrossesPeakThreshold) {
  Rng rng(5);
  std::normal_distribution<double> noise(0.0, 0.25);
  std::vector<double> y(60);
  for (auto& v : y) v = noise(rng);
  y[30] += 1.0;
  y[31] += 1.0;
  double noise_max = -1e9;
  for (int t = 0; t < 60; ++t)
    if (t != 30 && t != 31) noise_max = std::max(noise_max, y[t]);
  const double th = 0.5 * (noise_max + std::max(y[30], y[31]));
  ASSERT_LT(noise_max, th);
  ThresholdConfig c{ThresholdMode::PeakSignal, th, 60, 0, 2};
  EXPECT_EQ(threshold_assign(c, y), 0u);
  c.window = 30;
  EXPECT_EQ(threshold_assign(c, y), 2u);
}

TEST(ThresholdAssign, WindowMustFit) {
  std::vector<double> y(10, 0.0);
  ThresholdConfig c{ThresholdMode::IntegratedSignal, 0.5, 11, 0, 1};
  EXPECT_THROW(threshold_assign(c, y), InvalidArgument);
}

TEST(CalibrateThreshold, SeparableDataPicksSmallestWindowAndThreshold) {
  TraceSet ts;
  for (int k = 0; k < 10; ++k) {
    SignalTrace tr;
    tr.samples.assign(30, k % 2 == 0 ? 1.0 : 0.0);
    tr.true_states.assign(30, StateIndex(k % 2));
    ts.push_back(tr);
  }
  ThresholdSearch s;
  s.lower = -1.0;
  s.upper = 2.0;
  auto cal = calibrate_threshold(ThresholdMode::IntegratedSignal, ts, 0, 1, s);
  EXPECT_EQ(cal.training_fidelity, 1.0);
  EXPECT_EQ(cal.config.window, 1u);
  // The first point of the 201-point grid over [-1, 2] with 0 <= th < 1.
  EXPECT_NEAR(cal.config.threshold, -1.0 + 3.0 * 67 / 200, 1e-12);
  EXPECT_EQ(cal.windows.size(), cal.window_fidelity.size());
}

TEST(CalibrateThreshold, MatchesBruteForceOnNoisyData) {
  auto ts = labelled_set(psb(0.003), 400, 120, 3);
  auto search = threshold_search_for(psb(0.003));
  auto cal = calibrate_threshold(ThresholdMode::IntegratedSignal, ts, 0, 1, search);
  double best = -1;
  std::size_t best_w = 0;
  double best_th = 0;
  for (std::size_t w : cal.windows)
    for (double th : cal.thresholds) {
      ThresholdConfig c{ThresholdMode::IntegratedSignal, th, w, 0, 1};
      std::size_t ok = 0;
      for (const auto& tr : ts) ok += threshold_assign(c, tr) == tr.true_states[0];
      const double f = static_cast<double>(ok) / ts.size();
      if (f > best) {
        best = f;
        best_w = w;
        best_th = th;
      }
    }
  EXPECT_EQ(cal.training_fidelity, best);
  EXPECT_EQ(cal.config.window, best_w);
  EXPECT_EQ(cal.config.threshold, best_th);
}

TEST(CalibrateThreshold, WindowShrinksAsRelaxationGrows) {
  std::vector<std::size_t> windows;
  for (double a : {1e-4, 1e-3, 1e-2}) {
    auto p = psb(a);
    auto cal = calibrate_threshold(ThresholdMode::IntegratedSignal,
                                   labelled_set(p, 4000, 300, 17), 0, 1, threshold_search_for(p));
    windows.push_back(cal.config.window);
  }
  EXPECT_GT(windows[0], windows[1]);
  EXPECT_GT(windows[1], windows[2]);
}

TEST(CalibrateThreshold, NeedsLabels) {
  TraceSet ts(1);
  ts[0].samples = {1.0, 2.0};
  EXPECT_THROW(calibrate_threshold(ThresholdMode::PeakSignal, ts), InvalidArgument);
}

TEST(ThresholdWindows, DenseThenGeometric) {
  auto w = threshold_windows(300, {});
  for (std::size_t k = 0; k < 64; ++k) EXPECT_EQ(w[k], k + 1);
  EXPECT_EQ(w.back(), 300u);
  for (std::size_t k = 1; k < w.size(); ++k) EXPECT_GT(w[k], w[k - 1]);
  EXPECT_EQ(threshold_windows(30, {}).size(), 30u);
}

TEST(AveragingFilter, IdentityAndConstant) {
  SignalTrace tr;
  tr.samples = {1, 2, 3, 4, 5};
  tr.true_states = {0, 0, 1, 1, 1};
  auto same = averaging_filter(FilterConfig{1}, tr);
  EXPECT_EQ(same.samples, tr.samples);
  EXPECT_EQ(same.true_states, tr.true_states);

  SignalTrace c;
  c.samples.assign(47, 2.5);
  auto f = averaging_filter(FilterConfig{5}, c);
  EXPECT_EQ(f.samples, std::vector<double>(9, 2.5));
  EXPECT_THROW(averaging_filter(FilterConfig{48}, c), InvalidArgument);
  EXPECT_THROW(averaging_filter(FilterConfig{0}, c), InvalidArgument);
}

TEST(AveragingFilter, BlockMeansAndMajority) {
  SignalTrace tr;
  tr.samples = {1, 2, 3, 4, 5, 6, 7};
  tr.true_states = {0, 1, 1, 1, 0, 2, 9};
  auto f = averaging_filter(FilterConfig{2}, tr);
  EXPECT_EQ(f.samples, (std::vector<double>{1.5, 3.5, 5.5}));
  // Ties go to the state seen first in the block.
  EXPECT_EQ(f.true_states, (std::vector<StateIndex>{0, 1, 0}));
  auto g = averaging_filter(FilterConfig{3}, tr);
  EXPECT_EQ(g.true_states, (std::vector<StateIndex>{1, 1}));
}

TEST(AveragingFilter, WhiteNoiseVarianceShrinks) {
  const double var = 2.0;
  double s1 = 0.0, s2 = 0.0, k = 0.0;
  for (std::size_t n = 0; n < 10000; ++n) {
    Rng rng = make_rng(1, {n});
    SignalTrace tr;
    tr.samples = sample_noise(NoiseSpec::white(var), 300, rng);
    for (double v : averaging_filter(FilterConfig{20}, tr).samples) {
      s1 += v;
      s2 += v * v;
      k += 1;
    }
  }
  const double m = s1 / k;
  const double v = (s2 - k * m * m) / (k - 1);
  EXPECT_NEAR(v, var / 20.0, 5 * (var / 20.0) * std::sqrt(2.0 / k));
}

TEST(AveragingFilter, Linearity) {
  SignalTrace tr;
  Rng rng(2);
  tr.samples = sample_noise(NoiseSpec::white(1.0), 64, rng);
  SignalTrace scaled = tr;
  for (double& v : scaled.samples) v *= 3.0;
  auto a = averaging_filter(FilterConfig{4}, tr);
  auto b = averaging_filter(FilterConfig{4}, scaled);
  for (std::size_t j = 0; j < a.samples.size(); ++j) EXPECT_NEAR(b.samples[j], 3.0 * a.samples[j], 1e-12);
}

TEST(AveragingFilter, BlockTransitionFrequency) {
  const double a12 = 5e-4;
  const std::size_t ts = 20;
  HmmParams p({1.0, 0.0}, {1.0, 0.0}, {1.0, 1.0}, {1.0 - a12, a12, 0.0, 1.0});
  std::size_t trials = 0, jumps = 0;
  for (std::size_t n = 0; n < 3000; ++n) {
    SignalTrace tr;
    tr.true_states = sample_state_sequence(p, 0, ts * 100, derive_seed(3, {n})).states;
    tr.samples.assign(tr.true_states.size(), 0.0);
    auto f = averaging_filter(FilterConfig{ts}, tr);
    for (std::size_t j = 0; j + 1 < f.true_states.size(); ++j) {
      if (f.true_states[j] != 0) continue;
      ++trials;
      jumps += f.true_states[j + 1] == 1;
    }
  }
  const double want = ts * a12;
  const double got = static_cast<double>(jumps) / trials;
  EXPECT_NEAR(got, want, 5 * std::sqrt(want * (1 - want) / trials));
}

TEST(ModelMatched, UnfilteredCopiesAndSetsVariance) {
  auto p = psb(0.0022);
  auto mm = model_matched_params(p, NoiseSpec::white(0.7));
  EXPECT_EQ(mm, HmmParams({0.5, 0.5}, {1.0, 0.0}, {0.7, 0.7}, {1.0 - 0.0022, 0.0022, 0.0, 1.0}));
  auto same = model_matched_params(psb(0.0022), NoiseSpec::white(1.0), FilterConfig{1});
  EXPECT_EQ(same, p);
  auto corr = model_matched_params(p, NoiseSpec::gaussian(1.3, 3.0));
  EXPECT_EQ(corr.variance(0), 1.3);
}

TEST(ModelMatched, FilteredScalesTransitions) {
  auto mm = model_matched_params(psb(0.002), NoiseSpec::white(1.0), FilterConfig{20}, 1,
                                 {300, 500, false});
  EXPECT_NEAR(mm.transition(0, 1), 0.04, 1e-15);
  EXPECT_NEAR(mm.transition(0, 0), 0.96, 1e-15);
  EXPECT_EQ(mm.transition(1, 0), 0.0);
  EXPECT_NEAR(mm.variance(0), 1.0 / 20.0, 5e-3);
  EXPECT_THROW(model_matched_params(psb(0.06), NoiseSpec::white(1.0), FilterConfig{20}),
               ScaledProbabilityInvalid);
}

TEST(ModelMatched, CorrelatedFilteredEffectiveSnr) {
  auto p = psb(0.001);
  auto noise = NoiseSpec::gaussian(1.0, 3.0);
  auto exact = model_matched_params(p, noise, FilterConfig{20}, 0, {300, 0, true});
  auto numeric = model_matched_params(p, noise, FilterConfig{20}, 99, {300, 2000, false});
  const double snr_exact = 1.0 / std::sqrt(exact.variance(0));
  const double snr_numeric = 1.0 / std::sqrt(numeric.variance(0));
  EXPECT_NEAR(snr_exact, 2.02, 0.05 * 2.02);
  EXPECT_NEAR(snr_numeric, 2.02, 0.05 * 2.02);
  EXPECT_NEAR(snr_numeric, snr_exact, 0.02 * snr_exact);
}

TEST(BlockMeanVariance, WhiteAndDirectSum) {
  EXPECT_NEAR(block_mean_variance(NoiseSpec::white(2.0), 8, 64), 0.25, 1e-12);
  auto noise = NoiseSpec::gaussian(1.0, 2.0);
  auto sigma = autocorrelation_from_spectrum(noise.spectrum(100));
  double v = 0.0;
  for (int a = 0; a < 5; ++a)
    for (int b = 0; b < 5; ++b) v += sigma[std::abs(a - b)];
  EXPECT_NEAR(block_mean_variance(noise, 5, 100), v / 25.0, 1e-12);
}

TEST(LogRatio, SymmetryAndWorkedExample) {
  TwoStateGaussians g{0.5, 0.5, 0.0, 1.0, 1.0, 1.0};
  std::vector<double> mid(10, 0.5);
  EXPECT_NEAR(log_posterior_ratio_two_state(g, mid), 0.0, 1e-12);

  TwoStateGaussians h{0.5, 0.5, 0.0, 1.2 * 1.2, 1.0, 1.0};
  std::vector<double> spike(10, 0.0);
  spike[0] = 10.0;
  std::vector<double> flat(10, 1.0);
  EXPECT_GT(log_posterior_ratio_two_state(h, spike), 0.0);
  EXPECT_LT(log_posterior_ratio_two_state(h, flat), 0.0);
}

TEST(LogRatio, MatchesDirectLikelihoodSum) {
  TwoStateGaussians g{0.3, 0.7, -0.2, 0.8, 0.9, 1.5};
  Rng rng(4);
  auto y = sample_noise(NoiseSpec::white(1.0, 0.3), 25, rng);
  double direct = std::log(0.3 / 0.7);
  for (double v : y) {
    direct += -0.5 * std::log(2 * std::numbers::pi * 0.8) - (v + 0.2) * (v + 0.2) / 1.6;
    direct -= -0.5 * std::log(2 * std::numbers::pi * 1.5) - (v - 0.9) * (v - 0.9) / 3.0;
  }
  EXPECT_NEAR(log_posterior_ratio_two_state(g, y), direct, 1e-10);
}

TEST(LogRatio, SignFollowsAnalyticThreshold) {
  TwoStateGaussians g{0.4, 0.6, 0.0, 1.0, 1.0, 1.0};
  const std::size_t len = 12;
  const double y0 = optimal_integrated_threshold(g, len);
  Rng rng(6);
  for (int k = 0; k < 1000; ++k) {
    auto y = sample_noise(NoiseSpec::white(1.0, 0.5), len, rng);
    double mean = 0.0;
    for (double v : y) mean += v / len;
    const double lr = log_posterior_ratio_two_state(g, y);
    EXPECT_EQ(lr > 0, mean < y0);
  }
  EXPECT_THROW(optimal_integrated_threshold({0.5, 0.5, 0.0, 1.0, 1.0, 2.0}, 5), InvalidArgument);
}

TEST(ThresholdOptimality, AgreesWithHmmWithoutTransitions) {
  // State 1 has the larger mean, so "high" is state index 0 = B.
  const std::size_t len = 50;
  HmmParams p({0.5, 0.5}, {1.0, 0.0}, {1.0, 1.0}, {1.0, 0.0, 0.0, 1.0});
  TwoStateGaussians g{0.5, 0.5, 0.0, 1.0, 1.0, 1.0};
  ThresholdConfig c{ThresholdMode::IntegratedSignal, optimal_integrated_threshold(g, len), len, 0, 1};
  std::size_t mismatches = 0;
  for (std::size_t n = 0; n < 10000; ++n) {
    auto tr = sample_hmm_trace(p, StateIndex(n % 2), len, derive_seed(8, {n}));
    mismatches += threshold_assign(c, tr) != decide_initial_state(posteriors(p, tr)).state;
  }
  EXPECT_EQ(mismatches, 0u);
}

TEST(ThresholdDecision, ShiftInvariance) {
  auto ts = labelled_set(psb(0.002), 200, 100, 4);
  ThresholdConfig c{ThresholdMode::IntegratedSignal, 0.45, 40, 0, 1};
  ThresholdConfig cs = c;
  cs.threshold += 3.0;
  for (auto tr : ts) {
    const auto before = threshold_assign(c, tr);
    for (double& v : tr.samples) v += 3.0;
    EXPECT_EQ(threshold_assign(cs, tr), before);
  }
}

}  // namespace
}  // namespace qreadout
