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
#include <vector>

#include "qreadout/errors.hpp"
#include "qreadout/model.hpp"

namespace qreadout {

/// Temperature dependence of the three-state (spin up, empty, spin down)
/// tunnelling model.
struct ThermalConfig {
  /// Tunnelling probability per time step at zero temperature.
  double base_rate = 0.01;
  /// Zeeman energy over thermal energy, E_Z / (k_B T).
  double zeeman_ratio = 1.0;

  void validate() const {
    if (!(base_rate > 0.0 && base_rate < 1.0)) throw InvalidArgument("base_rate must lie in (0, 1)");
    if (!(zeeman_ratio >= 0.0)) throw InvalidArgument("zeeman_ratio must be >= 0");
  }
};

/// 1 / (1 + e^x), evaluated without overflow for large |x|.
inline double fermi(double x) {
  return x >= 0.0 ? std::exp(-x) / (1.0 + std::exp(-x)) : 1.0 / (1.0 + std::exp(x));
}

/// Row-major 3x3 transitions: spin up tunnels out and spin down tunnels in
/// with probability (1 - f) A0, the reverse processes with f A0, and no
/// direct spin flips.
inline std::vector<double> thermal_transition_matrix(const ThermalConfig& config) {
  config.validate();
  const double f = fermi(config.zeeman_ratio);
  const double fwd = (1.0 - f) * config.base_rate;
  const double back = f * config.base_rate;
  return {1.0 - fwd, fwd,              0.0,
          back,      1.0 - fwd - back, fwd,
          0.0,       back,             1.0 - back};
}

/// Ratio of the spin-up and spin-down tunnel-out probabilities, (1 - f) / f.
inline double thermal_rate_ratio(double zeeman_ratio) { return std::exp(zeeman_ratio); }

/// Infidelity floor of noise-free three-state readout when spin up and spin
/// down leave the dot with probabilities in ratio r per step. Symmetric under
/// r -> 1/r, which only swaps the roles of the two spin states.
inline double fidelity_bound_zero_noise(double r) {
  if (!(r > 0.0) || !std::isfinite(r)) throw InvalidArgument("rate ratio must be positive and finite");
  if (r < 1.0) r = 1.0 / r;
  if (r == 1.0) return 0.5;
  // r^{1/(1-r)} (1 - 1/r), written to stay accurate near r = 1.
  const double lr = std::log(r);
  const double power = std::exp(lr / (1.0 - r));
  return 0.5 * (1.0 + power * std::expm1(-lr));
}

/// Elzerman model at temperature: means (0, 1, 0), equal variances from the
/// SNR, spin up or down with equal probability.
inline HmmParams elzerman_thermal_params(const ThermalConfig& config, double snr) {
  if (!(snr > 0.0)) throw InvalidArgument("snr must be > 0");
  const double var = 1.0 / (snr * snr);
  return HmmParams({0.5, 0.0, 0.5}, {0.0, 1.0, 0.0}, {var, var, var},
                   thermal_transition_matrix(config), {"up", "empty", "down"});
}

}  // namespace qreadout
