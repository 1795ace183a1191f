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
#include <cstddef>
#include <string>

#include <boost/math/distributions/beta.hpp>

#include "qreadout/errors.hpp"

namespace qreadout {

/// Error count and credible interval for an infidelity estimate.
struct BinomialInterval {
  double estimate = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

/// Posterior interval for a binomial error probability under a flat prior,
/// i.e. quantiles of Beta(n + 1, N - n + 1). Equal tails of (1 - level) / 2
/// on either side; with n = 0 (n = N) the density is monotone and the
/// interval starts (ends) at the boundary, holding mass `level`.
inline BinomialInterval binomial_infidelity_interval(std::size_t errors, std::size_t trials,
                                                     double level = 0.68) {
  if (trials == 0) throw InvalidArgument("binomial interval needs at least one trial");
  if (errors > trials) throw InvalidArgument("more errors than trials");
  if (!(level > 0.0 && level < 1.0)) throw InvalidArgument("level must lie in (0, 1)");
  const double n = static_cast<double>(errors);
  const double total = static_cast<double>(trials);
  const boost::math::beta_distribution<double> post(n + 1.0, total - n + 1.0);
  BinomialInterval out;
  out.estimate = n / total;
  if (errors == 0) {
    out.lower = 0.0;
    out.upper = boost::math::quantile(post, level);
  } else if (errors == trials) {
    out.lower = boost::math::quantile(post, 1.0 - level);
    out.upper = 1.0;
  } else {
    const double tail = 0.5 * (1.0 - level);
    out.lower = boost::math::quantile(post, tail);
    out.upper = boost::math::quantile(boost::math::complement(post, tail));
  }
  out.lower = std::min(out.lower, out.estimate);
  out.upper = std::max(out.upper, out.estimate);
  return out;
}

/// True when two intervals share no point; touching intervals overlap.
inline bool disjoint(const BinomialInterval& a, const BinomialInterval& b) {
  return a.upper < b.lower || b.upper < a.lower;
}

}  // namespace qreadout
