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

#include "qreadout/confidence.hpp"

#include <cmath>
#include <vector>

#include "gtest/gtest.h"
#include "qreadout/noise.hpp"

namespace qreadout {
namespace {

TraceSet simulate(const HmmParams& p, std::size_t n, std::size_t len, std::uint64_t seed) {
  TraceSet ts;
  for (std::size_t k = 0; k < n; ++k) {
    const StateIndex s0 = k % 2 == 0 ? 0 : p.num_states() - 1;
    ts.push_back(sample_hmm_trace(p, s0, len, derive_seed(seed, {k})));
  }
  return ts;
}

struct Moments {
  double mean = 0.0, var = 0.0, n = 0.0;
};

Moments moments(const TraceSet& ts) {
  Moments m;
  for (const auto& tr : ts)
    for (double y : tr.samples) {
      m.mean += y;
      m.n += 1.0;
    }
  m.mean /= m.n;
  for (const auto& tr : ts)
    for (double y : tr.samples) m.var += (y - m.mean) * (y - m.mean);
  m.var /= m.n;
  return m;
}

HmmParams one_state(double mu, double var) { return HmmParams({1.0}, {mu}, {var}, {1.0}); }

HmmParams fit(const HmmParams& init, const TraceSet& ts, StepOptions step = {}) {
  TrainingConfig cfg{init};
  cfg.ll_tolerance = 1e-6;
  cfg.step = step;
  return train(cfg, ts).params;
}

TEST(LikelihoodRatio, GaussianMeanMatchesClosedForm) {
  const auto ts = simulate(one_state(0.3, 2.0), 40, 50, 11);
  const auto mo = moments(ts);
  const auto star = fit(one_state(0.0, 1.0), ts);
  const auto ci = likelihood_ratio_interval(star, ts, ParamId::mean(0));
  // Profiling the variance out gives drop (n/2) log(1 + d^2 / s^2).
  const double d = std::sqrt(mo.var * (std::exp(1.0 / mo.n) - 1.0));
  EXPECT_NEAR(ci.estimate, mo.mean, 1e-9);
  EXPECT_NEAR(ci.minus() / d, 1.0, 3e-3);
  EXPECT_NEAR(ci.plus() / d, 1.0, 3e-3);
  EXPECT_NEAR(d, std::sqrt(mo.var / mo.n), 1e-3 * d);
  EXPECT_NEAR(ci.level, 0.6827, 1e-4);
  EXPECT_FALSE(ci.lower_clamped);
  EXPECT_FALSE(ci.upper_clamped);
  EXPECT_EQ(ci.parameter, "mu1");
}

TEST(LikelihoodRatio, GaussianVarianceMatchesClosedForm) {
  const auto ts = simulate(one_state(-1.0, 0.5), 20, 40, 12);
  const auto mo = moments(ts);
  const auto star = fit(one_state(0.0, 1.0), ts);
  const auto ci = likelihood_ratio_interval(star, ts, ParamId::variance(0));
  auto drop = [&](double v) { return 0.5 * mo.n * (std::log(v / mo.var) + mo.var / v - 1.0); };
  auto root = [&](double a, double b) {
    for (int k = 0; k < 200; ++k) {
      const double c = 0.5 * (a + b);
      ((drop(a) - 0.5) * (drop(c) - 0.5) <= 0 ? b : a) = c;
    }
    return 0.5 * (a + b);
  };
  const double lo = root(mo.var * 0.5, mo.var);
  const double hi = root(mo.var, mo.var * 2.0);
  EXPECT_NEAR(ci.estimate, mo.var, 1e-9);
  EXPECT_NEAR(ci.lower, lo, 3e-3 * (mo.var - lo));
  EXPECT_NEAR(ci.upper, hi, 3e-3 * (hi - mo.var));
  // The profile is skewed: the upper side is wider.
  EXPECT_GT(ci.plus(), ci.minus());
}

TEST(LikelihoodRatio, FrozenTargetIsRejected) {
  const auto ts = simulate(one_state(0.0, 1.0), 4, 20, 13);
  ProfileOptions opt;
  opt.step.frozen.insert(ParamId::mean(0));
  EXPECT_THROW(likelihood_ratio_interval(one_state(0.0, 1.0), ts, ParamId::mean(0), opt),
               InvalidArgument);
  EXPECT_THROW(likelihood_ratio_interval(one_state(0.0, 1.0), {}, ParamId::mean(0)),
               InvalidArgument);
}

HmmParams psb_truth() {
  return HmmParams({0.5, 0.5}, {1.0, 0.0}, {1.0, 1.0}, {1 - 0.0022, 0.0022, 0.0, 1.0});
}

TEST(LikelihoodRatio, ZeroRateClampsAtBoundary) {
  const auto ts = simulate(psb_truth(), 400, 300, 14);
  const auto star = fit(psb_truth(), ts);
  const auto ci = likelihood_ratio_interval(star, ts, ParamId::transition(1, 0));
  EXPECT_EQ(ci.lower, 0.0);
  EXPECT_TRUE(ci.lower_clamped);
  EXPECT_FALSE(ci.upper_clamped);
  EXPECT_GT(ci.upper, ci.estimate + kMinHalfWidth * 0.99);
  EXPECT_LT(ci.upper, 1e-3);
  EXPECT_TRUE(ci.covers(0.0));
}

TEST(LikelihoodRatio, PsbIntervalsAreDeterministicAndReasonable) {
  const auto ts = simulate(psb_truth(), 400, 300, 15);
  const auto star = fit(psb_truth(), ts);
  const auto a = likelihood_ratio_interval(star, ts, ParamId::transition(0, 1));
  const auto b = likelihood_ratio_interval(star, ts, ParamId::transition(0, 1));
  EXPECT_EQ(a.lower, b.lower);
  EXPECT_EQ(a.upper, b.upper);
  // Roughly Poisson: about 130 decays observed.
  const double rel = (a.upper - a.lower) / (2.0 * a.estimate);
  EXPECT_GT(rel, 0.05);
  EXPECT_LT(rel, 0.2);
  EXPECT_TRUE(a.covers(0.0022, 3.0));
}

TEST(EstimableParameters, CountsMatchModels) {
  const auto psb = estimable_parameters(psb_truth());
  std::vector<std::string> names;
  for (const auto& id : psb) names.push_back(id.name());
  EXPECT_EQ(names, (std::vector<std::string>{"pi1", "mu1", "mu2", "var1", "var2", "A12", "A21"}));

  HmmParams elz({0.5, 0.0, 0.5}, {0, 1, 0}, {1, 1, 1},
                {0.99, 0.005, 0.005, 0.005, 0.99, 0.005, 0.005, 0.005, 0.99});
  StepOptions step;
  step.frozen = expand_fields({"pi"}, 3);
  EXPECT_EQ(estimable_parameters(elz, step).size(), 12u);
  step.tied_means = {{0, 2}};
  EXPECT_EQ(estimable_parameters(elz, step).size(), 11u);
}

TEST(MonteCarlo, IdenticalEstimatesGiveFloor) {
  const auto ci = monte_carlo_interval("A12", {0.002, 0.002, 0.002});
  EXPECT_NEAR(ci.minus(), kMinHalfWidth, 1e-15);
  EXPECT_NEAR(ci.plus(), kMinHalfWidth, 1e-15);
  EXPECT_EQ(ci.method, IntervalMethod::MonteCarlo);
  EXPECT_THROW(monte_carlo_interval("A12", {0.1}), InvalidArgument);
}

TEST(MonteCarlo, UnbiasedSpread) {
  const auto ci = monte_carlo_interval("mu1", {1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(ci.estimate, 2.5);
  EXPECT_NEAR(ci.plus(), std::sqrt(5.0 / 3.0), 1e-12);
}

TEST(MonteCarlo, SpreadTracksAnalyticError) {
  const auto truth = one_state(0.0, 1.0);
  std::vector<TraceSet> sets;
  for (std::uint64_t d = 0; d < 5; ++d) sets.push_back(simulate(truth, 20, 50, 100 + d));
  TrainingConfig cfg{one_state(0.5, 2.0)};
  cfg.ll_tolerance = 1e-6;
  const auto ci = monte_carlo_interval(cfg, sets, ParamId::mean(0));
  const double se = 1.0 / std::sqrt(1000.0);
  EXPECT_GT(ci.plus(), se / 3.0);
  EXPECT_LT(ci.plus(), se * 3.0);
  EXPECT_THROW(monte_carlo_interval(cfg, sets, ParamId::initial(0)), InvalidArgument);
}

TEST(Residuals, RelativeToTruth) {
  ConfidenceInterval ci{"mu1", 1.1, 1.0, 1.3};
  const auto rows = residual_table({ci}, one_state(1.05, 1.0));
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_NEAR(rows[0].residual, 0.05, 1e-12);
  EXPECT_NEAR(rows[0].lower, -0.05, 1e-12);
  EXPECT_NEAR(rows[0].upper, 0.25, 1e-12);
}

}  // namespace
}  // namespace qreadout
