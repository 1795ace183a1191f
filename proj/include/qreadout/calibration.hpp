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
#include <exception>
#include <functional>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "qreadout/errors.hpp"
#include "qreadout/hmm.hpp"
#include "qreadout/model.hpp"
#include "qreadout/parallel.hpp"

namespace qreadout {

/// Time range of the transition numerator in the reestimation formula.
/// Standard sums xi_t over t = 0..T-2 (the EM update, monotone in the
/// likelihood). FromSecondStep starts the numerator at t = 1 while the
/// denominator keeps t = 0..T-2; rows are then renormalised.
enum class TransitionWindow { Standard, FromSecondStep };

/// Which parameters a reestimation step may change, and which are tied.
struct StepOptions {
  std::set<ParamId> frozen;
  /// Groups of states sharing one mean (resp. one variance).
  std::vector<std::vector<StateIndex>> tied_means;
  std::vector<std::vector<StateIndex>> tied_variances;
  TransitionWindow window = TransitionWindow::Standard;

  bool is_frozen(const ParamId& id) const { return frozen.contains(id); }
};

inline constexpr double kVarianceFloor = 1e-12;

/// Expands a comma separated field list ("pi", "mu", "var", "A", or single
/// names such as "A13") to parameter ids for an M-state model.
inline std::set<ParamId> expand_fields(const std::vector<std::string>& names, std::size_t m) {
  std::set<ParamId> out;
  for (const auto& raw : names) {
    std::string name = raw;
    if (name.empty()) continue;
    if (name == "pi") {
      for (StateIndex i = 0; i < m; ++i) out.insert(ParamId::initial(i));
    } else if (name == "mu") {
      for (StateIndex i = 0; i < m; ++i) out.insert(ParamId::mean(i));
    } else if (name == "var") {
      for (StateIndex i = 0; i < m; ++i) out.insert(ParamId::variance(i));
    } else if (name == "A") {
      for (StateIndex i = 0; i < m; ++i)
        for (StateIndex j = 0; j < m; ++j) out.insert(ParamId::transition(i, j));
    } else {
      auto id = ParamId::parse(name);
      if (id.row >= m || id.col >= m) throw InvalidArgument("field " + name + " out of range");
      out.insert(id);
    }
  }
  return out;
}

/// Expected sufficient statistics of one E-step, summed over traces.
struct SufficientStats {
  std::size_t num_states = 0;
  std::size_t num_traces = 0;
  double log_likelihood = 0.0;
  std::vector<double> initial;         // sum_n P_n0(i)
  std::vector<double> occupancy;       // sum_nt P_nt(i)
  std::vector<double> weighted_sum;    // sum_nt P_nt(i) y_nt
  std::vector<double> weighted_sq;     // sum_nt P_nt(i) y_nt^2
  std::vector<double> transition_num;  // M x M, sum of xi_t(i,j)
  std::vector<double> transition_den;  // sum_n sum_{t<=T-2} P_nt(i)

  explicit SufficientStats(std::size_t m = 0)
      : num_states(m),
        initial(m),
        occupancy(m),
        weighted_sum(m),
        weighted_sq(m),
        transition_num(m * m),
        transition_den(m) {}

  void add(const SufficientStats& o) {
    num_traces += o.num_traces;
    log_likelihood += o.log_likelihood;
    auto acc = [](std::vector<double>& a, const std::vector<double>& b) {
      for (std::size_t k = 0; k < a.size(); ++k) a[k] += b[k];
    };
    acc(initial, o.initial);
    acc(occupancy, o.occupancy);
    acc(weighted_sum, o.weighted_sum);
    acc(weighted_sq, o.weighted_sq);
    acc(transition_num, o.transition_num);
    acc(transition_den, o.transition_den);
  }
};

namespace detail {

inline constexpr std::size_t kTraceChunk = 16;

struct EStepWorkspace {
  std::vector<double> emis, shift, alpha, norm, beta, beta_next, w, gamma;

  void reserve(std::size_t len, std::size_t m) {
    if (emis.size() < len * m) {
      emis.resize(len * m);
      alpha.resize(len * m);
    }
    if (shift.size() < len) {
      shift.resize(len);
      norm.resize(len);
    }
    beta.resize(m);
    beta_next.resize(m);
    w.resize(m);
    gamma.resize(m);
  }
};

/// Forward pass then a backward sweep that accumulates posteriors and
/// transition expectations on the fly.
template <std::size_t kM = 0>
void accumulate_trace(const HmmParams& p, const EmissionTerms& terms, std::span<const double> y,
                      TransitionWindow window, EStepWorkspace& ws, SufficientStats& st) {
  const std::size_t m = kM ? kM : p.num_states();
  const std::size_t len = y.size();
  ws.reserve(len, m);
  detail::shifted_emissions<kM>(terms, y, ws.emis.data(), ws.shift.data());
  st.log_likelihood += detail::forward_pass<kM>(p, len, ws.emis.data(), ws.shift.data(),
                                                ws.alpha.data(), ws.norm.data(), 8);
  st.num_traces += 1;
  const double* a = p.transitions().data();
  const std::size_t first_xi = window == TransitionWindow::Standard ? 0 : 1;

  auto add_gamma = [&](std::size_t t, const double* beta) {
    const double* al = ws.alpha.data() + t * m;
    double sum = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      ws.gamma[i] = al[i] * beta[i];
      sum += ws.gamma[i];
    }
    const double inv = 1.0 / sum;
    const double yt = y[t];
    for (std::size_t i = 0; i < m; ++i) {
      const double g = ws.gamma[i] * inv;
      ws.gamma[i] = g;
      st.occupancy[i] += g;
      st.weighted_sum[i] += g * yt;
      st.weighted_sq[i] += g * yt * yt;
    }
  };

  std::fill(ws.beta_next.begin(), ws.beta_next.end(), 1.0);
  add_gamma(len - 1, ws.beta_next.data());
  if (len == 1)
    for (std::size_t i = 0; i < m; ++i) st.initial[i] += ws.gamma[i];

  for (std::size_t t = len - 1; t-- > 0;) {
    const double* b = ws.emis.data() + t + 1;
    const double inv = 1.0 / ws.norm[t + 1];
    for (std::size_t j = 0; j < m; ++j) ws.w[j] = b[j * len] * ws.beta_next[j] * inv;
    const double* al = ws.alpha.data() + t * m;
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      const double* arow = a + i * m;
      double* xrow = st.transition_num.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) {
        const double term = arow[j] * ws.w[j];
        s += term;
        if (t >= first_xi) xrow[j] += al[i] * term;
      }
      ws.beta[i] = s;
    }
    add_gamma(t, ws.beta.data());
    for (std::size_t i = 0; i < m; ++i) st.transition_den[i] += ws.gamma[i];
    if (t == 0)
      for (std::size_t i = 0; i < m; ++i) st.initial[i] += ws.gamma[i];
    std::swap(ws.beta, ws.beta_next);
  }
}

}  // namespace detail

/// E-step over a trace set. Errors carry the offending trace index.
inline SufficientStats expected_statistics(const HmmParams& params, const TraceSet& traces,
                                           TransitionWindow window = TransitionWindow::Standard) {
  const std::size_t m = params.num_states();
  const std::size_t chunks = (traces.size() + detail::kTraceChunk - 1) / detail::kTraceChunk;
  std::vector<SufficientStats> partial(chunks, SufficientStats(m));
  const detail::EmissionTerms terms(params);
  parallel_chunks(traces.size(), detail::kTraceChunk, [&](std::size_t b, std::size_t e, std::size_t c) {
    detail::EStepWorkspace ws;
    for (std::size_t n = b; n < e; ++n) {
      if (traces[n].samples.empty()) throw InvalidArgument("trace " + std::to_string(n) + " is empty");
      try {
        detail::dispatch_states(m, [&](auto k) {
          detail::accumulate_trace<k()>(params, terms, traces[n].samples, window, ws, partial[c]);
        });
      } catch (const AllStatesImpossible& err) {
        throw err.with_trace(n);
      }
    }
  });
  SufficientStats total(m);
  for (const auto& p : partial) total.add(p);
  return total;
}

/// Sum of per-trace log-likelihoods, log L = sum_n log L_n.
inline double total_log_likelihood(const HmmParams& params, const TraceSet& traces) {
  const std::size_t m = params.num_states();
  const std::size_t chunks = (traces.size() + detail::kTraceChunk - 1) / detail::kTraceChunk;
  std::vector<double> partial(chunks, 0.0);
  const detail::EmissionTerms terms(params);
  parallel_chunks(traces.size(), detail::kTraceChunk, [&](std::size_t b, std::size_t e, std::size_t c) {
    std::vector<double> emis, shift, norm, alpha;
    for (std::size_t n = b; n < e; ++n) {
      const auto& y = traces[n].samples;
      if (y.empty()) throw InvalidArgument("trace " + std::to_string(n) + " is empty");
      const std::size_t len = y.size();
      emis.resize(len * m);
      alpha.resize(len * m);
      shift.resize(len);
      norm.resize(len);
      try {
        partial[c] += detail::dispatch_states(m, [&](auto k) {
          detail::shifted_emissions<k()>(terms, y, emis.data(), shift.data());
          return detail::forward_pass<k()>(params, len, emis.data(), shift.data(), alpha.data(),
                                           norm.data(), 8);
        });
      } catch (const AllStatesImpossible& err) {
        throw err.with_trace(n);
      }
    }
  });
  double ll = 0.0;
  for (double x : partial) ll += x;
  return ll;
}

namespace detail {

/// Distributes the probability mass not held by frozen entries over the free
/// entries in proportion to their expected counts.
inline void reestimate_simplex(std::span<double> out, std::span<const double> old,
                               std::span<const double> counts,
                               const std::function<bool(std::size_t)>& frozen) {
  double frozen_mass = 0.0, free_counts = 0.0, free_old = 0.0;
  std::size_t free_entries = 0;
  for (std::size_t k = 0; k < out.size(); ++k) {
    if (frozen(k)) {
      frozen_mass += old[k];
    } else {
      free_counts += counts[k];
      free_old += old[k];
      ++free_entries;
    }
  }
  if (free_entries == 0) {
    std::copy(old.begin(), old.end(), out.begin());
    return;
  }
  const double remaining = std::max(0.0, 1.0 - frozen_mass);
  for (std::size_t k = 0; k < out.size(); ++k) {
    if (frozen(k)) {
      out[k] = old[k];
    } else if (free_counts > 0.0) {
      out[k] = remaining * counts[k] / free_counts;
    } else if (free_old > 0.0) {
      out[k] = remaining * old[k] / free_old;
    } else {
      out[k] = remaining / static_cast<double>(free_entries);
    }
  }
  // Round-off: put the residual on the largest free entry so the row sums
  // to one while frozen entries stay bit-identical.
  double sum = 0.0;
  std::size_t largest = out.size();
  for (std::size_t k = 0; k < out.size(); ++k) {
    sum += out[k];
    if (!frozen(k) && (largest == out.size() || out[k] > out[largest])) largest = k;
  }
  out[largest] = std::max(0.0, out[largest] + (1.0 - sum));
}

}  // namespace detail

/// M-step: new parameters from expected statistics. Frozen entries are
/// copied unchanged; tied groups share pooled estimates.
inline HmmParams maximize(const HmmParams& params, const SufficientStats& st,
                          const StepOptions& options = {}) {
  const std::size_t m = params.num_states();
  for (StateIndex i = 0; i < m; ++i)
    if (!(st.occupancy[i] > 0.0)) throw EmptyStateOccupancy(i);

  std::vector<double> pi(m), mu(m), var(m), a(m * m);
  const auto old_pi = params.initial();
  const auto old_a = params.transitions();

  std::vector<double> pi_counts(st.initial);
  detail::reestimate_simplex(pi, old_pi, pi_counts,
                             [&](std::size_t i) { return options.is_frozen(ParamId::initial(i)); });

  // Means: singleton groups for untied states.
  auto groups_for = [&](const std::vector<std::vector<StateIndex>>& ties) {
    std::vector<std::vector<StateIndex>> groups;
    std::vector<bool> seen(m, false);
    for (const auto& g : ties) {
      for (auto i : g) {
        if (i >= m) throw InvalidArgument("tie group references state out of range");
        seen[i] = true;
      }
      if (!g.empty()) groups.push_back(g);
    }
    for (StateIndex i = 0; i < m; ++i)
      if (!seen[i]) groups.push_back({i});
    return groups;
  };

  for (const auto& g : groups_for(options.tied_means)) {
    if (options.is_frozen(ParamId::mean(g[0]))) {
      for (auto i : g) mu[i] = params.mean(i);
      continue;
    }
    double s0 = 0.0, s1 = 0.0;
    for (auto i : g) {
      s0 += st.occupancy[i];
      s1 += st.weighted_sum[i];
    }
    for (auto i : g) mu[i] = s1 / s0;
  }

  for (const auto& g : groups_for(options.tied_variances)) {
    if (options.is_frozen(ParamId::variance(g[0]))) {
      for (auto i : g) var[i] = params.variance(i);
      continue;
    }
    double s0 = 0.0, ss = 0.0;
    for (auto i : g) {
      s0 += st.occupancy[i];
      // sum_t P (y - mu)^2 with the new (possibly frozen) mean.
      ss += st.weighted_sq[i] - 2.0 * mu[i] * st.weighted_sum[i] + mu[i] * mu[i] * st.occupancy[i];
    }
    const double v = std::max(ss / s0, kVarianceFloor);
    for (auto i : g) var[i] = v;
  }

  for (StateIndex i = 0; i < m; ++i) {
    std::span<double> row(a.data() + i * m, m);
    std::span<const double> counts(st.transition_num.data() + i * m, m);
    detail::reestimate_simplex(row, old_a.subspan(i * m, m), counts, [&](std::size_t j) {
      return options.is_frozen(ParamId::transition(i, j));
    });
  }

  return HmmParams(std::move(pi), std::move(mu), std::move(var), std::move(a), params.labels());
}

/// One Baum-Welch iteration: E-step under `params`, then M-step.
inline HmmParams baum_welch_step(const HmmParams& params, const TraceSet& traces,
                                 const StepOptions& options = {}) {
  if (traces.empty()) throw InvalidArgument("baum_welch_step: empty training set");
  return maximize(params, expected_statistics(params, traces, options.window), options);
}

struct IterationRecord {
  std::size_t iteration = 0;
  double log_likelihood = 0.0;
  double gain = 0.0;
};

struct TrainingConfig {
  HmmParams init_params;
  /// Stop once the total log-likelihood grows by less than this.
  double ll_tolerance = 1e-3;
  std::size_t max_iterations = 1000;
  StepOptions step;
  std::function<void(const IterationRecord&)> on_iteration;

  void validate() const {
    if (!(ll_tolerance > 0.0)) throw InvalidArgument("ll_tolerance must be > 0");
    if (max_iterations < 1) throw InvalidArgument("max_iterations must be >= 1");
    const std::size_t m = init_params.num_states();
    for (const auto& id : step.frozen)
      if (id.row >= m || id.col >= m) throw InvalidArgument("frozen field out of range");
    auto check_groups = [&](const std::vector<std::vector<StateIndex>>& groups, ParamId (*make)(StateIndex)) {
      std::vector<int> seen(m, 0);
      for (const auto& g : groups) {
        for (auto i : g) {
          if (i >= m) throw InvalidArgument("tie group out of range");
          if (seen[i]++) throw InvalidArgument("state appears in two tie groups");
        }
        if (g.empty()) continue;
        const bool f = step.is_frozen(make(g[0]));
        for (auto i : g)
          if (step.is_frozen(make(i)) != f)
            throw InvalidArgument("tie group mixes frozen and free parameters");
      }
    };
    check_groups(step.tied_means, &ParamId::mean);
    check_groups(step.tied_variances, &ParamId::variance);
  }
};

struct TrainingResult {
  HmmParams params;
  /// Total log-likelihood of every visited parameter set; the last entry
  /// belongs to `params`.
  std::vector<double> ll_history;
  std::size_t iterations = 0;
  bool converged = false;

  double log_likelihood() const { return ll_history.back(); }

  /// True when no iteration lowered the likelihood by more than `slack`.
  bool monotone(double slack = 1e-8) const {
    for (std::size_t k = 1; k < ll_history.size(); ++k)
      if (ll_history[k] < ll_history[k - 1] - slack) return false;
    return true;
  }
};

/// Baum-Welch until the per-iteration gain drops below the tolerance.
inline TrainingResult train(const TrainingConfig& config, const TraceSet& traces) {
  config.validate();
  if (traces.empty()) throw InvalidArgument("train: empty training set");
  HmmParams params = config.init_params;
  TrainingResult result{params, {}, 0, false};
  for (std::size_t iter = 0;; ++iter) {
    SufficientStats st;
    try {
      st = expected_statistics(params, traces, config.step.window);
    } catch (const NumericalError& err) {
      std::throw_with_nested(TrainingFailed(iter, err.what()));
    }
    const double ll = st.log_likelihood;
    const double gain = result.ll_history.empty() ? 0.0 : ll - result.ll_history.back();
    result.ll_history.push_back(ll);
    result.params = params;
    result.iterations = iter;
    if (config.on_iteration) config.on_iteration({iter, ll, gain});
    if (iter > 0 && gain < config.ll_tolerance) {
      result.converged = true;
      break;
    }
    if (iter == config.max_iterations) break;
    try {
      params = maximize(params, st, config.step);
    } catch (const NumericalError& err) {
      std::throw_with_nested(TrainingFailed(iter, err.what()));
    }
  }
  return result;
}

namespace detail {

// Coordinates for extrapolation, scaled so that a unit step is roughly one
// standard error for any parameter: 2 sqrt(p) for probabilities, mu / sigma
// for means (sigma fixed by `scale`), log(var) / sqrt(2) for variances.
inline std::vector<double> to_coordinates(const HmmParams& p, std::span<const double> scale) {
  std::vector<double> x;
  for (double v : p.initial()) x.push_back(2.0 * std::sqrt(v));
  for (std::size_t i = 0; i < p.num_states(); ++i) x.push_back(p.mean(i) / scale[i]);
  for (double v : p.variances()) x.push_back(std::log(v) / std::numbers::sqrt2);
  for (double v : p.transitions()) x.push_back(2.0 * std::sqrt(v));
  return x;
}

// Rebuilds parameters from extrapolated coordinates. Entries marked fixed
// keep the value of `anchor` exactly; the remaining entries of each simplex
// row are rescaled to fill what is left. Returns nullopt outside the domain.
inline std::optional<HmmParams> from_coordinates(const std::vector<double>& x,
                                                 const std::vector<bool>& fixed,
                                                 std::span<const double> scale,
                                                 const HmmParams& anchor) {
  const std::size_t m = anchor.num_states();
  std::vector<double> pi(m), mu(m), var(m), a(m * m);
  auto simplex = [&](std::size_t off, std::span<const double> base, std::span<double> out) {
    double fixed_mass = 0.0, free_mass = 0.0;
    for (std::size_t k = 0; k < out.size(); ++k) {
      if (fixed[off + k]) {
        out[k] = base[k];
        fixed_mass += out[k];
      } else {
        if (!(x[off + k] >= 0.0)) return false;
        out[k] = 0.25 * x[off + k] * x[off + k];
        free_mass += out[k];
      }
    }
    if (free_mass == 0.0) return true;
    if (!std::isfinite(free_mass)) return false;
    const double scale_row = std::max(0.0, 1.0 - fixed_mass) / free_mass;
    for (std::size_t k = 0; k < out.size(); ++k)
      if (!fixed[off + k]) out[k] *= scale_row;
    return true;
  };
  if (!simplex(0, anchor.initial(), pi)) return std::nullopt;
  for (std::size_t i = 0; i < m; ++i) {
    mu[i] = fixed[m + i] ? anchor.mean(i) : x[m + i] * scale[i];
    var[i] = fixed[2 * m + i] ? anchor.variance(i) : std::exp(x[2 * m + i] * std::numbers::sqrt2);
    if (!std::isfinite(mu[i]) || !(var[i] >= kVarianceFloor) || !std::isfinite(var[i]))
      return std::nullopt;
  }
  for (std::size_t i = 0; i < m; ++i)
    if (!simplex(3 * m + i * m, anchor.transition_row(i), std::span<double>(a).subspan(i * m, m)))
      return std::nullopt;
  try {
    return HmmParams(std::move(pi), std::move(mu), std::move(var), std::move(a), anchor.labels());
  } catch (const InvalidArgument&) {
    return std::nullopt;
  }
}

}  // namespace detail

/// Baum-Welch with Anderson acceleration of the EM map. Each iteration costs
/// one E-step. An accelerated point whose likelihood falls below the best so
/// far is discarded in favour of a plain EM step from the best point, so the
/// recorded likelihood never decreases. Reaches the same fixed points as
/// `train` in far fewer E-steps when EM converges slowly. `iterations`
/// counts E-steps.
inline TrainingResult train_accelerated(const TrainingConfig& config, const TraceSet& traces,
                                        std::size_t memory = 5) {
  config.validate();
  if (traces.empty()) throw InvalidArgument("train_accelerated: empty training set");
  std::size_t evals = 0;
  auto estep = [&](const HmmParams& p) {
    try {
      ++evals;
      return expected_statistics(p, traces, config.step.window);
    } catch (const NumericalError& err) {
      std::throw_with_nested(TrainingFailed(evals, err.what()));
    }
  };
  auto mstep = [&](const HmmParams& p, const SufficientStats& st) {
    try {
      return maximize(p, st, config.step);
    } catch (const NumericalError& err) {
      std::throw_with_nested(TrainingFailed(evals, err.what()));
    }
  };

  const HmmParams& init = config.init_params;
  const std::size_t m = init.num_states();
  std::vector<double> scale(m);
  for (std::size_t i = 0; i < m; ++i) scale[i] = std::sqrt(init.variance(i));
  // Frozen entries and zero probabilities never change under EM.
  std::vector<bool> fixed;
  {
    auto x = detail::to_coordinates(init, scale);
    fixed.assign(x.size(), false);
    for (std::size_t i = 0; i < m; ++i) {
      fixed[i] = config.step.is_frozen(ParamId::initial(i)) || init.initial(i) == 0.0;
      fixed[m + i] = config.step.is_frozen(ParamId::mean(i));
      fixed[2 * m + i] = config.step.is_frozen(ParamId::variance(i));
      for (std::size_t j = 0; j < m; ++j)
        fixed[3 * m + i * m + j] =
            config.step.is_frozen(ParamId::transition(i, j)) || init.transition(i, j) == 0.0;
    }
  }

  HmmParams p = init;
  SufficientStats st = estep(p);
  TrainingResult result{p, {st.log_likelihood}, 0, false};
  if (config.on_iteration) config.on_iteration({0, st.log_likelihood, 0.0});

  HmmParams best = p;
  SufficientStats best_st = st;
  std::vector<std::vector<double>> d_f, d_g;  // differences of residuals and of EM images
  std::vector<double> prev_f, prev_g;
  int small_gains = 0;

  while (evals <= config.max_iterations) {
    const HmmParams g_params = mstep(p, st);
    const auto x = detail::to_coordinates(p, scale);
    const auto g = detail::to_coordinates(g_params, scale);
    std::vector<double> f(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) f[k] = fixed[k] ? 0.0 : g[k] - x[k];
    if (!prev_f.empty()) {
      std::vector<double> df(x.size()), dg(x.size());
      for (std::size_t k = 0; k < x.size(); ++k) {
        df[k] = f[k] - prev_f[k];
        dg[k] = g[k] - prev_g[k];
      }
      d_f.push_back(std::move(df));
      d_g.push_back(std::move(dg));
      if (d_f.size() > memory) {
        d_f.erase(d_f.begin());
        d_g.erase(d_g.begin());
      }
    }
    prev_f = f;
    prev_g = g;

    // Mixing coefficients from the regularised normal equations of
    // min |f - dF gamma|.
    std::optional<HmmParams> next;
    const std::size_t h = d_f.size();
    if (h > 0) {
      std::vector<double> a(h * h), rhs(h), gamma(h);
      double trace = 0.0;
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < h; ++j) {
          double sum = 0.0;
          for (std::size_t k = 0; k < x.size(); ++k) sum += d_f[i][k] * d_f[j][k];
          a[i * h + j] = sum;
        }
        double sum = 0.0;
        for (std::size_t k = 0; k < x.size(); ++k) sum += d_f[i][k] * f[k];
        rhs[i] = sum;
        trace += a[i * h + i];
      }
      for (std::size_t i = 0; i < h; ++i) a[i * h + i] += 1e-10 * trace + 1e-300;
      // Gaussian elimination with partial pivoting.
      bool ok = true;
      for (std::size_t c = 0; c < h && ok; ++c) {
        std::size_t piv = c;
        for (std::size_t r = c + 1; r < h; ++r)
          if (std::abs(a[r * h + c]) > std::abs(a[piv * h + c])) piv = r;
        if (!(std::abs(a[piv * h + c]) > 0.0)) {
          ok = false;
          break;
        }
        if (piv != c) {
          for (std::size_t j = 0; j < h; ++j) std::swap(a[c * h + j], a[piv * h + j]);
          std::swap(rhs[c], rhs[piv]);
        }
        for (std::size_t r = c + 1; r < h; ++r) {
          const double fct = a[r * h + c] / a[c * h + c];
          for (std::size_t j = c; j < h; ++j) a[r * h + j] -= fct * a[c * h + j];
          rhs[r] -= fct * rhs[c];
        }
      }
      if (ok) {
        for (std::size_t c = h; c-- > 0;) {
          double sum = rhs[c];
          for (std::size_t j = c + 1; j < h; ++j) sum -= a[c * h + j] * gamma[j];
          gamma[c] = sum / a[c * h + c];
        }
        std::vector<double> xn(g);
        for (std::size_t k = 0; k < xn.size(); ++k) {
          if (fixed[k]) continue;
          for (std::size_t i = 0; i < h; ++i) xn[k] -= gamma[i] * d_g[i][k];
          // Probabilities that would cross zero go to a tenth of their EM
          // coordinate, which EM can still move away from.
          if (k < m || k >= 3 * m) xn[k] = std::max(xn[k], 0.1 * g[k]);
        }
        next = detail::from_coordinates(xn, fixed, scale, g_params);
      }
    }
    if (!next || evals >= config.max_iterations) next = g_params;

    std::optional<SufficientStats> sn;
    const bool plain = *next == g_params;
    try {
      sn = estep(*next);
    } catch (const TrainingFailed&) {
      if (plain) throw;
    }
    if (!plain && (!sn || sn->log_likelihood < best_st.log_likelihood)) {
      // Restart from a plain EM step out of the best point.
      d_f.clear();
      d_g.clear();
      prev_f.clear();
      prev_g.clear();
      next = mstep(best, best_st);
      sn = estep(*next);
    }
    const double gain = sn->log_likelihood - best_st.log_likelihood;
    p = std::move(*next);
    st = std::move(*sn);
    if (st.log_likelihood >= best_st.log_likelihood) {
      best = p;
      best_st = st;
    }
    result.ll_history.push_back(best_st.log_likelihood);
    result.params = best;
    result.iterations = evals - 1;
    if (config.on_iteration)
      config.on_iteration({result.iterations, best_st.log_likelihood, std::max(gain, 0.0)});
    // Accelerated steps can stall for one iteration before a large gain, so
    // convergence needs two small gains in a row.
    small_gains = gain < config.ll_tolerance ? small_gains + 1 : 0;
    if (small_gains == 2) {
      result.converged = true;
      break;
    }
  }
  return result;
}

/// Runs `train` from every start point and keeps the highest likelihood.
inline TrainingResult train_best_of(const std::vector<HmmParams>& starts, TrainingConfig config,
                                    const TraceSet& traces) {
  if (starts.empty()) throw InvalidArgument("train_best_of: no start points");
  std::optional<TrainingResult> best;
  for (const auto& start : starts) {
    config.init_params = start;
    auto r = train(config, traces);
    if (!best || r.log_likelihood() > best->log_likelihood()) best = std::move(r);
  }
  return std::move(*best);
}

}  // namespace qreadout
