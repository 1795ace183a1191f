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

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "qreadout/errors.hpp"
#include "qreadout/model.hpp"
#include "qreadout/rng.hpp"

namespace qreadout {

/// Uncorrelated noise with the given variance.
struct WhiteNoise {
  double variance = 1.0;
};

/// Gaussian-shaped spectrum with total variance `variance` (Sigma_0) and
/// correlation time `correlation_time` (T_c, in time steps).
struct GaussianSpectrumNoise {
  double variance = 1.0;
  double correlation_time = 0.0;
};

/// Spectrum given sample by sample; its length fixes the trace length.
struct ExplicitSpectrumNoise {
  std::vector<double> spectrum;
};

/// Stationary noise around a mean.
struct NoiseSpec {
  std::variant<WhiteNoise, GaussianSpectrumNoise, ExplicitSpectrumNoise> shape = WhiteNoise{};
  double mean = 0.0;

  static NoiseSpec white(double variance, double mean = 0.0) {
    return {WhiteNoise{variance}, mean};
  }
  static NoiseSpec gaussian(double variance, double correlation_time, double mean = 0.0) {
    return {GaussianSpectrumNoise{variance, correlation_time}, mean};
  }
  static NoiseSpec explicit_spectrum(std::vector<double> spectrum, double mean = 0.0) {
    return {ExplicitSpectrumNoise{std::move(spectrum)}, mean};
  }

  bool is_white() const {
    if (std::holds_alternative<WhiteNoise>(shape)) return true;
    if (auto* g = std::get_if<GaussianSpectrumNoise>(&shape)) return g->correlation_time == 0.0;
    return false;
  }

  /// Sigma_0, the variance of a single sample.
  double variance() const;

  /// Lambda_k for a trace of length T.
  std::vector<double> spectrum(std::size_t length) const;

  NoiseSpec with_mean(double m) const {
    NoiseSpec out = *this;
    out.mean = m;
    return out;
  }

  void validate() const;
};

/// Lambda_k = Sigma_0 T_c sqrt(pi) exp[-(k pi T_c / T)^2] for k <= T/2,
/// mirrored above, then scaled so that (1/T) sum_k Lambda_k = Sigma_0.
/// T_c = 0 gives the flat spectrum.
inline std::vector<double> gaussian_spectrum(double variance, double correlation_time,
                                             std::size_t length) {
  if (length == 0) throw InvalidArgument("spectrum length must be positive");
  if (!(variance > 0.0) || !std::isfinite(variance))
    throw InvalidArgument("noise variance must be positive");
  if (!(correlation_time >= 0.0) || !std::isfinite(correlation_time))
    throw InvalidArgument("correlation time must be >= 0");
  std::vector<double> lam(length, variance);
  if (correlation_time == 0.0) return lam;
  const double t = static_cast<double>(length);
  double sum = 0.0;
  for (std::size_t k = 0; k <= length / 2; ++k) {
    const double u = static_cast<double>(k) * std::numbers::pi * correlation_time / t;
    lam[k] = variance * correlation_time * std::sqrt(std::numbers::pi) * std::exp(-u * u);
    if (k > 0) lam[length - k] = lam[k];
  }
  for (double v : lam) sum += v;
  const double scale = variance * t / sum;
  for (double& v : lam) v *= scale;
  return lam;
}

inline double NoiseSpec::variance() const {
  if (auto* w = std::get_if<WhiteNoise>(&shape)) return w->variance;
  if (auto* g = std::get_if<GaussianSpectrumNoise>(&shape)) return g->variance;
  const auto& s = std::get<ExplicitSpectrumNoise>(shape).spectrum;
  double sum = 0.0;
  for (double v : s) sum += v;
  return s.empty() ? 0.0 : sum / static_cast<double>(s.size());
}

inline std::vector<double> NoiseSpec::spectrum(std::size_t length) const {
  if (auto* w = std::get_if<WhiteNoise>(&shape)) return std::vector<double>(length, w->variance);
  if (auto* g = std::get_if<GaussianSpectrumNoise>(&shape))
    return gaussian_spectrum(g->variance, g->correlation_time, length);
  const auto& s = std::get<ExplicitSpectrumNoise>(shape).spectrum;
  if (s.size() != length)
    throw InvalidArgument("explicit spectrum has length " + std::to_string(s.size()) +
                          ", trace length is " + std::to_string(length));
  return s;
}

inline void NoiseSpec::validate() const {
  if (!std::isfinite(mean)) throw InvalidArgument("noise mean must be finite");
  if (auto* w = std::get_if<WhiteNoise>(&shape)) {
    if (!(w->variance > 0.0) || !std::isfinite(w->variance))
      throw InvalidArgument("noise variance must be positive");
  } else if (auto* g = std::get_if<GaussianSpectrumNoise>(&shape)) {
    if (!(g->variance > 0.0) || !std::isfinite(g->variance))
      throw InvalidArgument("noise variance must be positive");
    if (!(g->correlation_time >= 0.0) || !std::isfinite(g->correlation_time))
      throw InvalidArgument("correlation time must be >= 0");
  } else {
    const auto& s = std::get<ExplicitSpectrumNoise>(shape).spectrum;
    if (s.empty()) throw InvalidArgument("explicit spectrum is empty");
    const std::size_t n = s.size();
    for (std::size_t k = 0; k < n; ++k) {
      if (!(s[k] >= 0.0) || !std::isfinite(s[k]))
        throw InvalidArgument("spectrum entries must be finite and >= 0");
      if (k > 0 && s[k] != s[n - k]) throw InvalidArgument("spectrum must satisfy L_k = L_{T-k}");
    }
    if (!(variance() > 0.0)) throw InvalidArgument("spectrum has zero total variance");
  }
}

namespace detail {

/// Half-complex to real transform y_t = sum_k Y_k exp(+i 2 pi t k / T) over
/// the Hermitian extension of Y_0..Y_{T/2}. Plans are created once per length
/// and executed on thread-local buffers.
class HalfComplexTransform {
 public:
  static void run(std::span<const std::complex<double>> half, std::span<double> out) {
    const std::size_t n = out.size();
    if (half.size() != n / 2 + 1) throw InvalidArgument("half spectrum has the wrong length");
    thread_local Buffers buf;
    buf.resize(n);
    for (std::size_t k = 0; k < half.size(); ++k) {
      buf.in[k][0] = half[k].real();
      buf.in[k][1] = half[k].imag();
    }
    fftw_execute_dft_c2r(plan(n), buf.in, buf.out);
    for (std::size_t t = 0; t < n; ++t) out[t] = buf.out[t];
  }

 private:
  struct Buffers {
    fftw_complex* in = nullptr;
    double* out = nullptr;
    std::size_t size = 0;
    void resize(std::size_t n) {
      if (n == size) return;
      release();
      in = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (n / 2 + 1)));
      out = static_cast<double*>(fftw_malloc(sizeof(double) * n));
      size = n;
    }
    void release() {
      if (in) fftw_free(in);
      if (out) fftw_free(out);
      in = nullptr;
      out = nullptr;
    }
    ~Buffers() { release(); }
  };

  struct PlanCache {
    std::mutex mutex;
    std::map<std::size_t, fftw_plan> plans;
    ~PlanCache() {
      for (auto& [n, p] : plans) fftw_destroy_plan(p);
    }
  };

  static fftw_plan plan(std::size_t n) {
    static PlanCache cache;
    std::lock_guard lock(cache.mutex);
    auto it = cache.plans.find(n);
    if (it != cache.plans.end()) return it->second;
    auto* in = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (n / 2 + 1)));
    auto* out = static_cast<double*>(fftw_malloc(sizeof(double) * n));
    fftw_plan p = fftw_plan_dft_c2r_1d(static_cast<int>(n), in, out, FFTW_ESTIMATE);
    fftw_free(in);
    fftw_free(out);
    if (!p) throw NumericalError("FFTW could not plan a transform of length " + std::to_string(n));
    cache.plans.emplace(n, p);
    return p;
  }
};

}  // namespace detail

/// Sigma_j = (1/T) sum_k Lambda_k exp(i 2 pi j k / T) for j = 0..T-1.
inline std::vector<double> autocorrelation_from_spectrum(std::span<const double> spectrum) {
  const std::size_t n = spectrum.size();
  if (n == 0) return {};
  std::vector<std::complex<double>> half(n / 2 + 1);
  for (std::size_t k = 0; k < half.size(); ++k) half[k] = spectrum[k];
  std::vector<double> out(n);
  detail::HalfComplexTransform::run(half, out);
  for (double& v : out) v /= static_cast<double>(n);
  return out;
}

/// Draws the Fourier amplitudes y_0..y_{T/2}: Re and Im parts are normal with
/// variance Lambda_k / (2 d_k), d_k = 1/2 at the self-conjugate frequencies
/// (k = 0 and k = T/2 for even T, where Im y_k = 0), and d_k = 1 otherwise.
/// The mean enters as sqrt(T) mu on Re y_0.
inline std::vector<std::complex<double>> sample_fourier_amplitudes(
    std::span<const double> spectrum, double mean, Rng& rng) {
  const std::size_t n = spectrum.size();
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::complex<double>> half(n / 2 + 1);
  for (std::size_t k = 0; k < half.size(); ++k) {
    const bool self_conjugate = k == 0 || 2 * k == n;
    const double d = self_conjugate ? 0.5 : 1.0;
    const double sd = std::sqrt(spectrum[k] / (2.0 * d));
    double re = sd * normal(rng);
    double im = self_conjugate ? 0.0 : sd * normal(rng);
    if (k == 0) re += std::sqrt(static_cast<double>(n)) * mean;
    half[k] = {re, im};
  }
  return half;
}

/// y_t = T^{-1/2} sum_k y_k exp(i 2 pi t k / T) with y_{T-k} = conj(y_k).
inline std::vector<double> synthesize_from_amplitudes(
    std::span<const std::complex<double>> half, std::size_t length) {
  std::vector<double> y(length);
  detail::HalfComplexTransform::run(half, y);
  const double scale = 1.0 / std::sqrt(static_cast<double>(length));
  for (double& v : y) v *= scale;
  return y;
}

/// One stationary noise trace of length T. White noise is drawn sample by
/// sample; coloured noise goes through the Fourier construction.
inline std::vector<double> sample_noise(const NoiseSpec& spec, std::size_t length, Rng& rng) {
  if (length == 0) throw InvalidArgument("trace length must be positive");
  if (auto* w = std::get_if<WhiteNoise>(&spec.shape)) {
    std::normal_distribution<double> normal(spec.mean, std::sqrt(w->variance));
    std::vector<double> y(length);
    for (double& v : y) v = normal(rng);
    return y;
  }
  const auto lam = spec.spectrum(length);
  return synthesize_from_amplitudes(sample_fourier_amplitudes(lam, spec.mean, rng), length);
}

/// Noise trace generated through the Fourier construction for every
/// spectrum, white included.
inline std::vector<double> sample_correlated_trace(const NoiseSpec& spec, std::size_t length,
                                                   std::uint64_t seed) {
  spec.validate();
  if (length == 0) throw InvalidArgument("trace length must be positive");
  Rng rng(seed);
  const auto lam = spec.spectrum(length);
  return synthesize_from_amplitudes(sample_fourier_amplitudes(lam, spec.mean, rng), length);
}

struct StateSequence {
  std::vector<StateIndex> states;

  StateIndex initial_state() const { return states.at(0); }
  std::size_t length() const noexcept { return states.size(); }
};

namespace detail {

/// Index drawn from a probability row by inverse CDF; zero entries are never
/// returned.
inline StateIndex draw_from_row(std::span<const double> row, double u) {
  double cum = 0.0;
  std::size_t last = 0;
  for (std::size_t j = 0; j < row.size(); ++j) {
    if (row[j] <= 0.0) continue;
    cum += row[j];
    last = j;
    if (u < cum) return j;
  }
  return last;
}

}  // namespace detail

inline StateIndex sample_initial_state(const HmmParams& params, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  return detail::draw_from_row(params.initial(), unif(rng));
}

/// s_0 = initial_state, s_{t+1} drawn from row A_{s_t, .}.
inline StateSequence sample_state_sequence(const HmmParams& params, StateIndex initial_state,
                                           std::size_t length, Rng& rng) {
  if (initial_state >= params.num_states()) throw InvalidArgument("initial state out of range");
  if (length == 0) throw InvalidArgument("trace length must be positive");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  StateSequence seq;
  seq.states.resize(length);
  seq.states[0] = initial_state;
  for (std::size_t t = 1; t < length; ++t) {
    const auto row = params.transition_row(seq.states[t - 1]);
    seq.states[t] = detail::draw_from_row(row, unif(rng));
  }
  return seq;
}

inline StateSequence sample_state_sequence(const HmmParams& params, StateIndex initial_state,
                                           std::size_t length, std::uint64_t seed) {
  Rng rng(seed);
  return sample_state_sequence(params, initial_state, length, rng);
}

/// y_t = means[s_t] + noise[s_t][t]. The noise vectors are zero-mean.
inline SignalTrace compose_trace(const StateSequence& seq,
                                 const std::vector<std::vector<double>>& noise,
                                 std::span<const double> means) {
  const std::size_t len = seq.length();
  if (noise.size() != means.size())
    throw InvalidArgument("need one noise vector per state mean");
  for (const auto& v : noise)
    if (v.size() != len) throw InvalidArgument("noise vector length differs from state sequence");
  SignalTrace tr;
  tr.samples.resize(len);
  tr.true_states = seq.states;
  for (std::size_t t = 0; t < len; ++t) {
    const StateIndex s = seq.states[t];
    if (s >= means.size()) throw InvalidArgument("state index out of range");
    tr.samples[t] = means[s] + noise[s][t];
  }
  return tr;
}

/// White-noise HMM trace: states from pi (or the pinned initial state) and A,
/// samples y_t ~ N(mu_{s_t}, sigma_{s_t}^2).
inline SignalTrace sample_hmm_trace(const HmmParams& params, std::optional<StateIndex> initial,
                                    std::size_t length, Rng& rng) {
  const StateIndex s0 = initial ? *initial : sample_initial_state(params, rng);
  auto seq = sample_state_sequence(params, s0, length, rng);
  std::normal_distribution<double> normal(0.0, 1.0);
  SignalTrace tr;
  tr.samples.resize(length);
  for (std::size_t t = 0; t < length; ++t) {
    const StateIndex s = seq.states[t];
    tr.samples[t] = params.mean(s) + std::sqrt(params.variance(s)) * normal(rng);
  }
  tr.true_states = std::move(seq.states);
  return tr;
}

inline SignalTrace sample_hmm_trace(const HmmParams& params, std::optional<StateIndex> initial,
                                    std::size_t length, std::uint64_t seed) {
  Rng rng(seed);
  return sample_hmm_trace(params, initial, length, rng);
}

/// HMM trace with one independent stationary noise trace per state, composed
/// along the sampled state sequence. The spec means are ignored; state means
/// come from params.
inline SignalTrace sample_trace(const HmmParams& params, const std::vector<NoiseSpec>& noise,
                                std::optional<StateIndex> initial, std::size_t length,
                                Rng& rng) {
  const std::size_t m = params.num_states();
  if (noise.size() != m) throw InvalidArgument("need one noise spec per state");
  const StateIndex s0 = initial ? *initial : sample_initial_state(params, rng);
  auto seq = sample_state_sequence(params, s0, length, rng);
  std::vector<std::vector<double>> parts(m);
  for (std::size_t i = 0; i < m; ++i) parts[i] = sample_noise(noise[i].with_mean(0.0), length, rng);
  return compose_trace(seq, parts, params.means());
}

}  // namespace qreadout
