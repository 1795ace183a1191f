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

#include "qreadout/hmm.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "gtest/gtest.h"
#include "oracles.hpp"

namespace qreadout {
namespace {

HmmParams two_state(double pi1, double mu1, double mu2, double var, double a12, double a21) {
  return HmmParams({pi1, 1.0 - pi1}, {mu1, mu2}, {var, var}, {1.0 - a12, a12, a21, 1.0 - a21});
}

TEST(EmissionDensity, StandardNormalPeak) {
  HmmParams p({1.0}, {0.0}, {1.0}, {1.0});
  EXPECT_NEAR(emission_density(p, 0, 0.0), 0.3989422804, 1e-10);
  HmmParams q({1.0}, {1.0}, {1.0}, {1.0});
  EXPECT_NEAR(emission_density(q, 0, 1.0), 0.3989422804, 1e-10);
}

TEST(EmissionDensity, NarrowGaussianIsTwiceStandardAtOneSigma) {
  HmmParams p({1.0}, {0.0}, {0.25}, {1.0});
  const double phi1 = std::exp(-0.5) / std::sqrt(2.0 * std::numbers::pi);
  EXPECT_NEAR(emission_density(p, 0, 0.5), 2.0 * phi1, 1e-15);
  EXPECT_NEAR(std::log(emission_density(p, 0, 0.5)), log_emission_density(p, 0, 0.5), 1e-14);
}

TEST(Forward, SingleStateIsSumOfLogDensities) {
  HmmParams p({1.0}, {0.3}, {0.7}, {1.0});
  std::vector<double> y{0.1, -2.0, 1.5, 0.3, 4.0};
  double want = 0.0;
  for (double v : y) want += std::log(oracle::gauss_pdf(v, 0.3, 0.7));
  EXPECT_NEAR(forward(p, y).log_likelihood, want, 1e-12);
}

TEST(Forward, SymmetricSingleSample) {
  auto p = two_state(0.5, 1.0, -1.0, 1.0, 0.1, 0.2);
  auto f = forward(p, std::vector<double>{0.0});
  EXPECT_DOUBLE_EQ(f.alpha[0], 0.5);
  EXPECT_DOUBLE_EQ(f.alpha[1], 0.5);
}

TEST(Forward, MatchesPathEnumerationOnThreeSamples) {
  auto p = two_state(0.3, 0.8, -0.4, 0.6, 0.15, 0.35);
  std::vector<double> y{0.2, -0.9, 1.4};
  auto brute = oracle::enumerate_paths(p, y);
  auto f = forward(p, y);
  EXPECT_NEAR(f.log_likelihood, std::log(brute.likelihood), 1e-10);
  double sum_scales = 0.0;
  for (double s : f.log_scaling) sum_scales += s;
  EXPECT_NEAR(sum_scales, f.log_likelihood, 1e-12);
}

TEST(Backward, TerminalConditionIsOne) {
  auto p = two_state(0.4, 1.0, 0.0, 1.0, 0.01, 0.02);
  std::vector<double> y{0.7};
  auto f = forward(p, y);
  auto b = backward(p, y, f.log_scaling);
  EXPECT_DOUBLE_EQ(b[0], 1.0);
  EXPECT_DOUBLE_EQ(b[1], 1.0);
}

TEST(Backward, SingleStatePosteriorsAreOne) {
  HmmParams p({1.0}, {0.0}, {2.0}, {1.0});
  std::vector<double> y{0.3, 1.0, -3.0, 2.0};
  auto f = forward(p, y);
  auto b = backward(p, y, f.log_scaling);
  for (std::size_t t = 0; t < y.size(); ++t) EXPECT_NEAR(f.alpha[t] * b[t], 1.0, 1e-14);
}

TEST(Backward, ProductMatchesEnumeratedPosteriors) {
  auto p = two_state(0.6, 0.5, -0.5, 0.8, 0.25, 0.1);
  std::vector<double> y{1.1, -0.3, 0.4};
  auto brute = oracle::enumerate_paths(p, y);
  auto f = forward(p, y);
  auto b = backward(p, y, f.log_scaling);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t i = 0; i < 2; ++i)
      EXPECT_NEAR(f.alpha[t * 2 + i] * b[t * 2 + i], brute.posteriors[t * 2 + i], 1e-10);
}

TEST(Posteriors, AbsorbingCertainty) {
  HmmParams p({1.0, 0.0}, {0.0, 1.0}, {1.0, 1.0}, {1.0, 0.0, 0.0, 1.0});
  std::vector<double> y{5.0, 1.0, 1.0, -2.0, 0.9};
  auto table = posteriors(p, y);
  for (std::size_t t = 0; t < y.size(); ++t) EXPECT_EQ(table.at(t, 0), 1.0);
}

TEST(Posteriors, FullSymmetryGivesUniform) {
  const double third = 1.0 / 3.0;
  HmmParams p({third, third, third}, {0.2, 0.2, 0.2}, {1.5, 1.5, 1.5},
              {third, third, third, third, third, third, third, third, third});
  std::vector<double> y{0.1, 2.0, -1.0, 0.4};
  auto table = posteriors(p, y);
  for (double x : table.posteriors) EXPECT_NEAR(x, third, 1e-14);
}

TEST(Posteriors, RelaxationModelMatchesEnumeration) {
  // Triplet (mu=1) relaxing to singlet (mu=0), SNR 1, no re-excitation.
  auto p = two_state(0.5, 1.0, 0.0, 1.0, 0.0022, 0.0);
  std::vector<double> y{1.3, 0.2, 1.9, -0.4, 0.1};
  auto brute = oracle::enumerate_paths(p, y);
  auto table = posteriors(p, y);
  EXPECT_NEAR(table.log_likelihood, std::log(brute.likelihood), 1e-10);
  for (std::size_t k = 0; k < table.posteriors.size(); ++k)
    EXPECT_NEAR(table.posteriors[k], brute.posteriors[k], 1e-10);
}

TEST(Posteriors, OutlierSampleStaysFinite) {
  auto p = two_state(0.5, 1.0, 0.0, 1.0, 0.01, 0.01);
  std::vector<double> y{0.5, 60.0, 0.2};  // b_i(60) underflows in linear space
  auto table = posteriors(p, y);
  EXPECT_TRUE(std::isfinite(table.log_likelihood));
  EXPECT_GT(table.at(1, 0), 0.999);
}

TEST(Posteriors, UnreachableExplanationThrows) {
  // Only state 1 is reachable, but its emission underflows relative to state 2.
  HmmParams p({1.0, 0.0}, {0.0, 1000.0}, {1e-4, 1.0}, {1.0, 0.0, 0.0, 1.0});
  std::vector<double> y{0.0, 1000.0};
  EXPECT_THROW(posteriors(p, y), AllStatesImpossible);
  try {
    posteriors(p, y);
  } catch (const AllStatesImpossible& e) {
    EXPECT_EQ(e.time_step(), 1u);
  }
}

TEST(Decision, ArgmaxAndTieRule) {
  PosteriorTable t;
  t.num_states = 2;
  t.posteriors = {0.9, 0.1};
  t.log_scaling = {0.0};
  auto d = decide_initial_state(t);
  EXPECT_EQ(d.state, 0u);
  EXPECT_DOUBLE_EQ(d.probability, 0.9);
  t.posteriors = {0.5, 0.5};
  EXPECT_EQ(decide_initial_state(t).state, 0u);
  t.posteriors = {0.2, 0.8};
  EXPECT_EQ(decide_initial_state(t).state, 1u);
}

TEST(Decision, SubsetRenormalises) {
  PosteriorTable t;
  t.num_states = 3;
  t.posteriors = {0.3, 0.4, 0.3};
  t.log_scaling = {0.0};
  std::vector<StateIndex> occupied{0, 2};
  auto d = decide_initial_state(t, occupied);
  EXPECT_EQ(d.state, 0u);
  EXPECT_DOUBLE_EQ(d.probability, 0.5);
}

TEST(Decision, EarlyRelaxationReadAsTriplet) {
  // Noise-free version of a triplet decaying between t=13 and t=14. The
  // 100-sample mean (0.14) is below the 0.5 threshold, the posterior is not.
  auto p = two_state(0.5, 1.0, 0.0, 1.0, 0.0022, 0.0);
  std::vector<double> y(300, 0.0);
  for (int t = 0; t <= 13; ++t) y[t] = 1.0;
  double mean100 = 0.0;
  for (int t = 0; t < 100; ++t) mean100 += y[t] / 100.0;
  EXPECT_LT(mean100, 0.5);
  auto d = decide_initial_state(posteriors(p, y));
  EXPECT_EQ(d.state, 0u);
  EXPECT_GT(d.probability, 0.5);
}

// ---- properties -----------------------------------------------------------

TEST(Properties, OracleEquivalenceOnRandomModels) {
  std::mt19937_64 gen(20260101);
  std::normal_distribution<double> noise(0.0, 1.2);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t m = 1 + rep % 3;
    const std::size_t len = 1 + (rep * 7) % 8;
    auto p = oracle::random_params(m, gen);
    std::vector<double> y(len);
    for (auto& v : y) v = noise(gen);
    auto brute = oracle::enumerate_paths(p, y);
    auto table = posteriors(p, y);
    ASSERT_LT(oracle::relative_error(table.log_likelihood, std::log(brute.likelihood)), 1e-9);
    for (std::size_t k = 0; k < table.posteriors.size(); ++k)
      ASSERT_LT(oracle::relative_error(table.posteriors[k], brute.posteriors[k]), 1e-9)
          << "rep " << rep << " entry " << k;
  }
}

TEST(Properties, RowsSumToOneAndProductIsTimeInvariant) {
  std::mt19937_64 gen(7);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int rep = 0; rep < 20; ++rep) {
    auto p = oracle::random_params(3, gen);
    std::vector<double> y(400);
    for (auto& v : y) v = noise(gen);
    auto f = forward(p, y);
    auto b = backward(p, y, f.log_scaling);
    auto table = posteriors(p, y);
    for (std::size_t t = 0; t < y.size(); ++t) {
      double row = 0.0, prod = 0.0;
      for (std::size_t i = 0; i < 3; ++i) {
        row += table.at(t, i);
        prod += f.alpha[t * 3 + i] * b[t * 3 + i];
      }
      ASSERT_NEAR(row, 1.0, 1e-9);
      // sum_i alpha_t(i) beta_t(i) = L for every t, i.e. 1 after unscaling.
      ASSERT_NEAR(prod, 1.0, 1e-9);
    }
  }
}

TEST(Properties, AffineRescalingLeavesPosteriorsUnchanged) {
  std::mt19937_64 gen(11);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (double c : {0.01, 3.0, 250.0}) {
    auto p = oracle::random_params(2, gen);
    std::vector<double> mu{p.mean(0) * c, p.mean(1) * c};
    std::vector<double> var{p.variance(0) * c * c, p.variance(1) * c * c};
    HmmParams q(std::vector<double>(p.initial().begin(), p.initial().end()), mu, var,
                std::vector<double>(p.transitions().begin(), p.transitions().end()));
    std::vector<double> y(200), yc(200);
    for (std::size_t t = 0; t < y.size(); ++t) {
      y[t] = noise(gen);
      yc[t] = y[t] * c;
    }
    auto a = posteriors(p, y);
    auto b = posteriors(q, yc);
    for (std::size_t k = 0; k < a.posteriors.size(); ++k)
      ASSERT_NEAR(a.posteriors[k], b.posteriors[k], 1e-9);
  }
}

TEST(Properties, RuntimeIsLinearInLength) {
  auto p = two_state(0.5, 1.0, 0.0, 1.0, 0.0022, 0.0);
  std::mt19937_64 gen(3);
  std::normal_distribution<double> noise(0.5, 1.0);
  double sink = 0.0;
  auto time_for = [&](std::size_t len) {
    std::vector<double> y(len);
    for (auto& v : y) v = noise(gen);
    double best = 1e30;
    for (int rep = 0; rep < 5; ++rep) {
      auto start = std::chrono::steady_clock::now();
      auto table = posteriors(p, y);
      auto stop = std::chrono::steady_clock::now();
      sink += table.log_likelihood;
      best = std::min(best, std::chrono::duration<double>(stop - start).count());
    }
    return best;
  };
  const double t1 = time_for(200000);
  const double t2 = time_for(400000);
  EXPECT_LT(t2 / t1, 2.5);
  EXPECT_TRUE(std::isfinite(sink));
}

}  // namespace
}  // namespace qreadout
