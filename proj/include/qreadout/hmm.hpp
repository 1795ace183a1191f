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
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <type_traits>
#include <vector>

#include "qreadout/errors.hpp"
#include "qreadout/model.hpp"

namespace qreadout {

/// Gaussian emission density b_i(y).
inline double emission_density(const HmmParams& params, StateIndex state, double y) {
  const double var = params.variance(state);
  const double d = y - params.mean(state);
  return std::exp(-d * d / (2.0 * var)) / std::sqrt(2.0 * std::numbers::pi * var);
}

inline double log_emission_density(const HmmParams& params, StateIndex state, double y) {
  const double var = params.variance(state);
  const double d = y - params.mean(state);
  return -0.5 * std::log(2.0 * std::numbers::pi * var) - d * d / (2.0 * var);
}

namespace detail {

/// Precomputed per-state terms of log b_i(y).
struct EmissionTerms {
  std::vector<double> mean;
  std::vector<double> log_norm;
  std::vector<double> inv_two_var;

  explicit EmissionTerms(const HmmParams& p) {
    const std::size_t m = p.num_states();
    mean.resize(m);
    log_norm.resize(m);
    inv_two_var.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
      mean[i] = p.mean(i);
      log_norm[i] = -0.5 * std::log(2.0 * std::numbers::pi * p.variance(i));
      inv_two_var[i] = 0.5 / p.variance(i);
    }
  }
};

/// Calls f with std::integral_constant<std::size_t, M> for small state
/// counts and with 0 (meaning "runtime M") otherwise.
template <class F>
decltype(auto) dispatch_states(std::size_t m, F&& f) {
  switch (m) {
    case 1:
      return f(std::integral_constant<std::size_t, 1>{});
    case 2:
      return f(std::integral_constant<std::size_t, 2>{});
    case 3:
      return f(std::integral_constant<std::size_t, 3>{});
    default:
      return f(std::integral_constant<std::size_t, 0>{});
  }
}

/// exp(x) for -708 <= x <= 0, within about one ulp of std::exp. Written
/// without branches so emission loops vectorise.
inline double exp_nonpos(double x) {
  constexpr double kLog2e = 1.4426950408889634;
  constexpr double kLn2Hi = 6.93147180369123816490e-01;
  constexpr double kLn2Lo = 1.90821492927058770002e-10;
  constexpr double kRound = 0x1.8p52;
  const double kd = x * kLog2e + kRound;
  const std::uint64_t bits = std::bit_cast<std::uint64_t>(kd);
  const double k = kd - kRound;
  const double r = (x - k * kLn2Hi) - k * kLn2Lo;
  double p = 1.0 / 6227020800.0;
  p = p * r + 1.0 / 479001600.0;
  p = p * r + 1.0 / 39916800.0;
  p = p * r + 1.0 / 3628800.0;
  p = p * r + 1.0 / 362880.0;
  p = p * r + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;
  return p * std::bit_cast<double>((bits + 1023) << 52);
}

/// Emissions are stored state-major and shifted by their per-step maximum,
/// emis[i*T+t] = b_i(y_t) / exp(shift[t]), so outliers far in the tails never
/// underflow all states at once.
template <std::size_t kM = 0>
void shifted_emissions(const EmissionTerms& e, std::span<const double> y, double* emis,
                       double* shift) {
  const std::size_t m = kM ? kM : e.mean.size();
  const std::size_t len = y.size();
  const double* __restrict yt = y.data();
  double* __restrict top = shift;
  std::fill(top, top + len, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict col = emis + i * len;
    const double mu = e.mean[i], ln = e.log_norm[i], k2 = e.inv_two_var[i];
    for (std::size_t t = 0; t < len; ++t) {
      const double d = yt[t] - mu;
      const double v = ln - d * d * k2;
      col[t] = v;
      top[t] = v > top[t] ? v : top[t];
    }
  }
  // Relative weights below 1e-307 are flushed to zero.
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict col = emis + i * len;
    for (std::size_t t = 0; t < len; ++t) {
      const double d = col[t] - top[t];
      col[t] = d > -708.0 ? d : -708.0;
    }
    for (std::size_t t = 0; t < len; ++t) col[t] = exp_nonpos(col[t]);
    for (std::size_t t = 0; t < len; ++t) col[t] = col[t] > 1e-307 ? col[t] : 0.0;
  }
}

/// Forward recursion on shifted emissions. The running vector is rescaled
/// every `interval` steps, at the last step and whenever its mass gets small;
/// norm[t] holds the divisor applied at step t (1 when none). With
/// interval == 1 every alpha row is normalised and norm[t] is the per-step
/// normaliser. Returns log P(y) = sum_t log(norm_t) + shift_t.
template <std::size_t kM = 0>
double forward_pass(const HmmParams& p, std::size_t len, const double* emis, const double* shift,
                    double* alpha, double* norm, std::size_t interval = 1) {
  const std::size_t m = kM ? kM : p.num_states();
  const double* a = p.transitions().data();
  const double* pi = p.initial().data();
  constexpr double kLow = 0x1p-300;
  // The product of norms is kept as mantissa and binary exponent so a single
  // log is taken per trace.
  double mantissa = 1.0;
  long exponent = 0;
  double shift_sum = 0.0;
  for (std::size_t t = 0; t < len; ++t) {
    double* cur = alpha + t * m;
    if (t == 0) {
      for (std::size_t i = 0; i < m; ++i) cur[i] = pi[i] * emis[i * len + t];
    } else {
      const double* prev = alpha + (t - 1) * m;
      for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += prev[j] * a[j * m + i];
        cur[i] = s * emis[i * len + t];
      }
    }
    double c = 0.0;
    for (std::size_t i = 0; i < m; ++i) c += cur[i];
    shift_sum += shift[t];
    if (interval <= 1 || c < kLow || (t + 1) % interval == 0 || t + 1 == len) {
      if (!(c > 0.0) || !std::isfinite(c)) throw AllStatesImpossible(t);
      const double inv = 1.0 / c;
      for (std::size_t i = 0; i < m; ++i) cur[i] *= inv;
      norm[t] = c;
      mantissa *= c;
      if (mantissa < 0x1p-500) {
        int e = 0;
        mantissa = std::frexp(mantissa, &e);
        exponent += e;
      }
    } else {
      norm[t] = 1.0;
    }
  }
  return std::log(mantissa) + static_cast<double>(exponent) * std::numbers::ln2 + shift_sum;
}

/// Backward recursion sharing the forward normalisers, so that
/// alpha_t(i) * beta_t(i) sums to one over i at every t.
template <std::size_t kM = 0>
void backward_pass(const HmmParams& p, std::size_t len, const double* emis, const double* norm,
                   double* beta) {
  const std::size_t m = kM ? kM : p.num_states();
  const double* a = p.transitions().data();
  std::fill(beta + (len - 1) * m, beta + len * m, 1.0);
  std::vector<double> w(m);
  for (std::size_t t = len - 1; t > 0; --t) {
    const double* next = beta + t * m;
    const double inv = 1.0 / norm[t];
    for (std::size_t j = 0; j < m; ++j) w[j] = emis[j * len + t] * next[j] * inv;
    double* cur = beta + (t - 1) * m;
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += a[i * m + j] * w[j];
      cur[i] = s;
    }
  }
}

}  // namespace detail

/// Output of the scaled forward recursion.
struct ForwardResult {
  std::size_t num_states = 0;
  /// T x M, each row normalised: alpha_t(i) / P(y_0..y_t).
  std::vector<double> alpha;
  /// log of the per-step normaliser; their sum is the log-likelihood.
  std::vector<double> log_scaling;
  double log_likelihood = 0.0;

  std::size_t length() const noexcept { return log_scaling.size(); }
};

inline ForwardResult forward(const HmmParams& params, std::span<const double> samples) {
  if (samples.empty()) throw InvalidArgument("forward: empty trace");
  const std::size_t m = params.num_states();
  const std::size_t len = samples.size();
  detail::EmissionTerms terms(params);
  std::vector<double> emis(len * m), shift(len), norm(len);
  ForwardResult out;
  out.num_states = m;
  out.alpha.resize(len * m);
  out.log_likelihood = detail::dispatch_states(m, [&](auto k) {
    detail::shifted_emissions<k()>(terms, samples, emis.data(), shift.data());
    return detail::forward_pass<k()>(params, len, emis.data(), shift.data(), out.alpha.data(),
                                     norm.data());
  });
  out.log_scaling.resize(len);
  for (std::size_t t = 0; t < len; ++t) out.log_scaling[t] = std::log(norm[t]) + shift[t];
  return out;
}

/// Scaled backward variables (T x M) consistent with the given forward
/// normalisers: beta_hat_t(i) = beta_t(i) / P(y_{t+1}..y_{T-1} | y_0..y_t).
inline std::vector<double> backward(const HmmParams& params, std::span<const double> samples,
                                    std::span<const double> log_scaling) {
  if (samples.empty()) throw InvalidArgument("backward: empty trace");
  if (log_scaling.size() != samples.size())
    throw InvalidArgument("backward: scaling length differs from trace length");
  const std::size_t m = params.num_states();
  const std::size_t len = samples.size();
  detail::EmissionTerms terms(params);
  std::vector<double> emis(len * m), shift(len), norm(len);
  detail::dispatch_states(m, [&](auto k) {
    detail::shifted_emissions<k()>(terms, samples, emis.data(), shift.data());
  });
  for (std::size_t t = 0; t < len; ++t) norm[t] = std::exp(log_scaling[t] - shift[t]);
  std::vector<double> beta(len * m);
  detail::backward_pass(params, len, emis.data(), norm.data(), beta.data());
  return beta;
}

/// Per-time state posteriors P_t(i) of one trace plus its log-likelihood.
struct PosteriorTable {
  std::size_t num_states = 0;
  /// T x M row-major.
  std::vector<double> posteriors;
  double log_likelihood = 0.0;
  std::vector<double> log_scaling;

  std::size_t length() const noexcept { return log_scaling.size(); }
  double at(std::size_t t, StateIndex i) const { return posteriors[t * num_states + i]; }
  std::span<const double> row(std::size_t t) const {
    return std::span<const double>(posteriors).subspan(t * num_states, num_states);
  }
};

inline PosteriorTable posteriors(const HmmParams& params, std::span<const double> samples) {
  if (samples.empty()) throw InvalidArgument("posteriors: empty trace");
  const std::size_t m = params.num_states();
  const std::size_t len = samples.size();
  detail::EmissionTerms terms(params);
  std::vector<double> emis(len * m), shift(len), norm(len), alpha(len * m), beta(len * m);
  PosteriorTable table;
  table.num_states = m;
  table.log_likelihood = detail::dispatch_states(m, [&](auto k) {
    detail::shifted_emissions<k()>(terms, samples, emis.data(), shift.data());
    const double ll = detail::forward_pass<k()>(params, len, emis.data(), shift.data(),
                                                alpha.data(), norm.data());
    detail::backward_pass<k()>(params, len, emis.data(), norm.data(), beta.data());
    return ll;
  });
  table.log_scaling.resize(len);
  table.posteriors.resize(len * m);
  for (std::size_t t = 0; t < len; ++t) {
    table.log_scaling[t] = std::log(norm[t]) + shift[t];
    double sum = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double g = alpha[t * m + i] * beta[t * m + i];
      table.posteriors[t * m + i] = g;
      sum += g;
    }
    for (std::size_t i = 0; i < m; ++i)
      table.posteriors[t * m + i] = std::clamp(table.posteriors[t * m + i] / sum, 0.0, 1.0);
  }
  return table;
}

inline PosteriorTable posteriors(const HmmParams& params, const SignalTrace& trace) {
  return posteriors(params, std::span<const double>(trace.samples));
}

/// log P(y | lambda) via the forward pass only.
inline double log_likelihood(const HmmParams& params, std::span<const double> samples) {
  if (samples.empty()) throw InvalidArgument("log_likelihood: empty trace");
  const std::size_t m = params.num_states();
  const std::size_t len = samples.size();
  detail::EmissionTerms terms(params);
  std::vector<double> emis(len * m), shift(len), norm(len), alpha(len * m);
  return detail::dispatch_states(m, [&](auto k) {
    detail::shifted_emissions<k()>(terms, samples, emis.data(), shift.data());
    return detail::forward_pass<k()>(params, len, emis.data(), shift.data(), alpha.data(),
                                     norm.data(), 8);
  });
}

struct StateDecision {
  StateIndex state = 0;
  double probability = 0.0;
};

/// argmax_i P_0(i); exact ties go to the lowest index.
inline StateDecision decide_initial_state(const PosteriorTable& table) {
  auto p0 = table.row(0);
  StateDecision d{0, p0[0]};
  for (StateIndex i = 1; i < p0.size(); ++i)
    if (p0[i] > d.probability) d = {i, p0[i]};
  return d;
}

/// Decision restricted to a subset of states, with P_0 renormalised over
/// that subset. Used when some states cannot be initial (Elzerman empty dot).
inline StateDecision decide_initial_state(const PosteriorTable& table,
                                          std::span<const StateIndex> candidates) {
  if (candidates.empty()) throw InvalidArgument("decide_initial_state: no candidate states");
  auto p0 = table.row(0);
  double total = 0.0;
  for (auto i : candidates) total += p0[i];
  StateDecision d{candidates[0], p0[candidates[0]]};
  for (auto i : candidates)
    if (p0[i] > d.probability || (p0[i] == d.probability && i < d.state)) d = {i, p0[i]};
  d.probability = total > 0.0 ? d.probability / total : 1.0 / static_cast<double>(candidates.size());
  return d;
}

}  // namespace qreadout
