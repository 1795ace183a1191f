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

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "gtest/gtest.h"
#include "qreadout/experiments.hpp"
#include "qreadout/parallel.hpp"
#include "qreadout/scenario.hpp"

namespace qreadout {
namespace {

TEST(Catalog, PresetShapes) {
  const auto tc1 = find_scenario("psb-corr-Tc1");
  EXPECT_EQ(tc1.base.n_traces, 100000u);
  EXPECT_EQ(tc1.base.length, 30u);
  EXPECT_DOUBLE_EQ(tc1.base.correlation_time, 1.0);

  const auto thermal = find_scenario("elzerman-thermal").expand();
  std::vector<std::size_t> lengths;
  for (const auto& p : thermal)
    if (lengths.empty() || lengths.back() != p.length) lengths.push_back(p.length);
  EXPECT_EQ(lengths, (std::vector<std::size_t>{800, 400, 250, 150}));

  const auto bw = find_scenario("baumwelch-corrfail");
  EXPECT_EQ(bw.kind, ScenarioKind::Calibration);
  EXPECT_EQ(bw.base.length, 1000u);
  EXPECT_EQ(bw.base.n_traces, 2000u);
  EXPECT_DOUBLE_EQ(bw.base.rate, 1e-4);
  EXPECT_DOUBLE_EQ(bw.base.noise().variance(), 1.0);

  EXPECT_EQ(find_scenario("psb-white-sweep-A").expand().size(), 7u);
  const auto filt = find_scenario("psb-corr-Tc3-filter");
  EXPECT_EQ(filt.base.filter_block, 20u);
  EXPECT_EQ(filt.base.length, 300u);
  EXPECT_EQ(find_scenario("elzerman-snr").base.length, 400u);
  for (const auto& s : scenario_catalog()) EXPECT_NO_THROW(s.validate()) << s.name;
  EXPECT_THROW(find_scenario("nope"), ConfigError);
}

TEST(Catalog, OverridesAndValidation) {
  Scenario s;
  s.base.rate = 0.001;
  s.points = {{"a", 1.0, {{"rate", 0.01}, {"length", 50}}}};
  const auto pts = s.expand();
  ASSERT_EQ(pts.size(), 1u);
  EXPECT_DOUBLE_EQ(pts[0].rate, 0.01);
  EXPECT_EQ(pts[0].length, 50u);

  s.points = {{"bad", 1.0, {{"colour", 1.0}}}};
  EXPECT_THROW(s.expand(), ConfigError);
  s.points = {{"bad", 1.0, {{"length", 2.5}}}};
  EXPECT_THROW(s.expand(), ConfigError);

  ScenarioPoint p;
  p.methods = {{Method::Hmm, true}};
  EXPECT_THROW(p.validate(), ConfigError);
  p.filter_block = 400;
  EXPECT_THROW(p.validate(), ConfigError);
  p = ScenarioPoint{};
  p.zeeman_ratio = 1.0;
  EXPECT_THROW(p.validate(), ConfigError);
}

TEST(Methods, NamesRoundTrip) {
  for (const char* n : {"threshold", "hmm", "hmm-star", "hmm-filtered", "hmm-star-filtered"})
    EXPECT_EQ(MethodSpec::parse(n).name(), n);
  EXPECT_THROW(MethodSpec::parse("threshold-filtered"), ConfigError);
  EXPECT_THROW(MethodSpec::parse("viterbi"), ConfigError);
}

TEST(Fidelity, NearNoiselessPsbWithoutRelaxationIsPerfect) {
  ScenarioPoint p;
  p.snr = 1e3;
  p.rate = 0.0;
  p.n_traces = 200;
  p.length = 20;
  p.hmm_training = 100;
  p.methods = {{Method::Threshold}, {Method::Hmm}, {Method::HmmStar}};
  const auto r = run_fidelity_point(p, 5, 0);
  for (const auto& rep : r.reports) {
    EXPECT_EQ(rep.n_errors, 0u) << rep.method.name();
    EXPECT_EQ(rep.ci_lower, 0.0);
    EXPECT_GT(rep.ci_upper, 0.0);
  }
}

TEST(Fidelity, DisjointIdRanges) {
  ScenarioPoint p;
  p.n_traces = 100;
  p.threshold_training = 70;
  p.hmm_training = 30;
  p.methods = {{Method::Threshold}, {Method::HmmStar}};
  const FidelityIdLayout ids(p);
  EXPECT_EQ(ids.test.end, 100u);
  EXPECT_EQ(ids.threshold_training.begin, 100u);
  EXPECT_EQ(ids.threshold_training.end, 170u);
  EXPECT_EQ(ids.hmm_training.begin, 170u);
  EXPECT_EQ(ids.hmm_training.end, 200u);
  EXPECT_FALSE(ids.test.overlaps(ids.threshold_training));
  EXPECT_TRUE((IdRange{0, 10}).overlaps(IdRange{9, 12}));
  EXPECT_FALSE((IdRange{0, 10}).overlaps(IdRange{5, 5}));
}

TEST(Fidelity, InitialStatesAlternate) {
  ScenarioPoint p;
  p.model = StateModel::Elzerman;
  p.rate = 0.02;
  const TraceFactory f(p, 3, 0);
  EXPECT_EQ(f.make(stream::kTest, 0).true_states[0], 0u);
  EXPECT_EQ(f.make(stream::kTest, 1).true_states[0], 2u);
  EXPECT_EQ(f.make(stream::kTest, 7).id, 7u);
}

TEST(Fidelity, DeterministicAcrossThreadCounts) {
  ScenarioPoint p;
  p.n_traces = 300;
  p.length = 60;
  p.rate = 0.01;
  p.correlation_time = 1.0;
  p.filter_block = 5;
  p.methods = {{Method::Threshold}, {Method::Hmm}, {Method::Hmm, true}};
  set_thread_count(1);
  const auto a = run_fidelity_point(p, 11, 2);
  set_thread_count(4);
  const auto b = run_fidelity_point(p, 11, 2);
  set_thread_count(0);
  ASSERT_EQ(a.reports.size(), b.reports.size());
  for (std::size_t k = 0; k < a.reports.size(); ++k) {
    EXPECT_EQ(a.reports[k].n_errors, b.reports[k].n_errors);
    EXPECT_EQ(a.reports[k].config_digest, b.reports[k].config_digest);
  }
  ASSERT_TRUE(a.effective_snr && b.effective_snr);
  EXPECT_EQ(*a.effective_snr, *b.effective_snr);
  EXPECT_NE(run_fidelity_point(p, 12, 2).reports[0].config_digest, a.reports[0].config_digest);
}

TEST(Fidelity, ElzermanHmmBeatsPeakThreshold) {
  ScenarioPoint p;
  p.model = StateModel::Elzerman;
  p.rate = 0.02;
  p.snr = 2.0;
  p.length = 200;
  p.n_traces = 2000;
  p.methods = {{Method::Threshold}, {Method::Hmm}};
  const auto r = run_fidelity_point(p, 1, 0);
  EXPECT_EQ(r.report({Method::Threshold}).threshold->mode, ThresholdMode::PeakSignal);
  EXPECT_LT(r.report({Method::Hmm}).infidelity, r.report({Method::Threshold}).infidelity);
}

// The 68% interval of a small run covers the infidelity of a run 100 times
// larger in 55-80% of seeded repetitions.
TEST(Fidelity, IntervalCoverage) {
  ScenarioPoint p;
  p.n_traces = 400;
  p.length = 50;
  p.rate = 0.01;
  p.methods = {{Method::Hmm}};
  ScenarioPoint big = p;
  big.n_traces = 40000;
  const double truth = run_fidelity_point(big, 1000, 0).reports[0].infidelity;
  int covered = 0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    const auto& r = run_fidelity_point(p, seed, 0).reports[0];
    if (r.ci_lower <= truth && truth <= r.ci_upper) ++covered;
  }
  EXPECT_GE(covered, 28);
  EXPECT_LE(covered, 40);
}

TEST(Calibration, WhiteNoisePointRecoversModel) {
  ScenarioPoint p;
  p.n_traces = 300;
  p.length = 300;
  p.rate = 0.01;
  p.methods = {};
  const auto r = run_calibration_point(p, 4, 0);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.intervals.size(), 7u);
  EXPECT_EQ(r.residuals.size(), 7u);
  EXPECT_LT(r.max_normalized_residual(), 4.0);
  EXPECT_LT(r.variance_deviation, 0.05);
  for (std::size_t k = 1; k < r.ll_history.size(); ++k) EXPECT_GE(r.ll_history[k], r.ll_history[k - 1] - 1e-8);
}

TEST(Calibration, MonteCarloOption) {
  ScenarioPoint p;
  p.n_traces = 100;
  p.length = 200;
  p.rate = 0.01;
  p.methods = {};
  RunOptions opt;
  opt.interval_method = IntervalMethod::MonteCarlo;
  opt.sets = 3;
  const auto r = run_calibration_point(p, 4, 0, opt);
  ASSERT_EQ(r.intervals.size(), 7u);
  for (const auto& ci : r.intervals) EXPECT_EQ(ci.method, IntervalMethod::MonteCarlo);
}

TEST(Scenario, RunsSweepAndLabels) {
  Scenario s;
  s.name = "tiny";
  s.base.n_traces = 100;
  s.base.length = 40;
  s.sweep_axis = "A12";
  s.points = detail::sweep_over("rate", {0.001, 0.01});
  const auto r = run_scenario(s);
  ASSERT_EQ(r.fidelity.size(), 2u);
  EXPECT_EQ(r.fidelity[1].label, "rate=0.01");
  EXPECT_DOUBLE_EQ(r.fidelity[1].x, 0.01);
  EXPECT_EQ(r.fidelity[0].reports.size(), 2u);
}

}  // namespace
}  // namespace qreadout
