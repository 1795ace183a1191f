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
#include <exception>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "qreadout/calibration.hpp"
#include "qreadout/errors.hpp"
#include "qreadout/model.hpp"

namespace qreadout {

enum class IntervalMethod { LikelihoodRatio, MonteCarlo };

inline std::string to_string(IntervalMethod m) {
  return m == IntervalMethod::LikelihoodRatio ? "likelihood-ratio" : "monte-carlo";
}

/// Smallest half-width reported on either side of an estimate.
inline constexpr double kMinHalfWidth = 3.4e-7;

struct ConfidenceInterval {
  std::string parameter;
  double estimate = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  IntervalMethod method = IntervalMethod::LikelihoodRatio;
  double level = 0.0;
  /// True when a side stopped at the edge of the parameter's domain.
  bool lower_clamped = false;
  bool upper_clamped = false;

  double minus() const { return estimate - lower; }
  double plus() const { return upper - estimate; }

  /// Whether `value` lies in [estimate - k minus, estimate + k plus].
  bool covers(double value, double k = 1.0) const {
    return value >= estimate - k * minus() && value <= estimate + k * plus();
  }
};

/// Confidence level of a likelihood-ratio interval with LL drop delta for one
/// parameter, P(|Z| < sqrt(2 delta)).
inline double likelihood_ratio_level(double delta_ll) { return std::erf(std::sqrt(delta_ll)); }

/// Parameters that training actually estimates: everything except frozen
/// entries, the last initial probability (implied by the others) and all but
/// the first state of each tie group.
inline std::vector<ParamId> estimable_parameters(const HmmParams& params,
                                                 const StepOptions& step = {}) {
  const std::size_t m = params.num_states();
  auto follower = [&](const ParamId& id) {
    const auto& groups = id.kind == ParamId::Kind::Mean       ? step.tied_means
                         : id.kind == ParamId::Kind::Variance ? step.tied_variances
                                                              : std::vector<std::vector<StateIndex>>{};
    for (const auto& g : groups)
      for (std::size_t k = 1; k < g.size(); ++k)
        if (g[k] == id.row) return true;
    return false;
  };
  std::vector<ParamId> out;
  for (const auto& id : params.parameter_ids()) {
    if (step.is_frozen(id) || follower(id)) continue;
    if (id.kind == ParamId::Kind::Initial && id.row == m - 1) continue;
    out.push_back(id);
  }
  return out;
}

struct ProfileOptions {
  /// Log-likelihood drop defining the interval edge; 1/2 gives 68%.
  double delta_ll = 0.5;
  /// Accepted |drop - delta_ll| at an interval edge.
  double drop_tolerance = 1e-3;
  /// Convergence threshold of the inner re-maximisation.
  double inner_tolerance = 1e-4;
  std::size_t inner_max_iterations = 2000;
  /// Probes allowed per side before giving up.
  std::size_t max_probes = 40;
  /// Frozen and tied fields used for training; the target is added to them.
  StepOptions step;
};

namespace detail {

struct ProfileTarget {
  ParamId id;
  std::vector<ParamId> members;  // the tie group, or just id
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
};

inline ProfileTarget profile_target(const HmmParams& p, const ParamId& id, const StepOptions& step) {
  ProfileTarget t{id, {id}};
  auto group = [&](const std::vector<std::vector<StateIndex>>& groups, ParamId (*make)(StateIndex)) {
    for (const auto& g : groups)
      for (auto i : g)
        if (i == id.row) {
          t.members.clear();
          for (auto k : g) t.members.push_back(make(k));
          return;
        }
  };
  switch (id.kind) {
    case ParamId::Kind::Initial:
    case ParamId::Kind::Transition: {
      // The entry can grow until every other free entry of its row is zero.
      double frozen_mass = 0.0;
      const std::size_t m = p.num_states();
      for (std::size_t k = 0; k < m; ++k) {
        ParamId other = id.kind == ParamId::Kind::Initial ? ParamId::initial(k)
                                                          : ParamId::transition(id.row, k);
        if (other != id && step.is_frozen(other)) frozen_mass += p.get(other);
      }
      t.lo = 0.0;
      t.hi = std::max(0.0, 1.0 - frozen_mass);
      break;
    }
    case ParamId::Kind::Mean:
      group(step.tied_means, &ParamId::mean);
      break;
    case ParamId::Kind::Variance:
      group(step.tied_variances, &ParamId::variance);
      t.lo = kVarianceFloor;
      break;
  }
  return t;
}

inline HmmParams pin(const HmmParams& p, const ProfileTarget& t, double value) {
  HmmParams q = p;
  for (const auto& id : t.members) q = q.with(id, value);
  return q;
}

/// LL maximised over every free parameter except the target group.
class Profile {
 public:
  Profile(const HmmParams& star, const HmmParams& base, const TraceSet& traces, const ParamId& id,
          const ProfileOptions& opt)
      : base_(base), traces_(traces), opt_(opt), target_(profile_target(star, id, opt.step)),
        center_(star.get(id)) {
    config_.ll_tolerance = opt.inner_tolerance;
    config_.max_iterations = opt.inner_max_iterations;
    config_.step = opt.step;
    // A pinned tie group is frozen as a whole, which validate() accepts.
    for (const auto& m : target_.members) config_.step.frozen.insert(m);
  }

  const ProfileTarget& target() const { return target_; }
  double center() const { return center_; }

  /// Re-maximised log-likelihood with the target at `value`.
  double at(double value) {
    TrainingConfig cfg = config_;
    cfg.init_params = pin(predict(value), target_, value);
    auto run = [&] {
      try {
        return train_accelerated(cfg, traces_);
      } catch (const NumericalError& err) {
        std::throw_with_nested(ProfileDidNotConverge("profile of " + target_.id.name() + " at " +
                                                     std::to_string(value) + ": " + err.what()));
      }
    };
    const TrainingResult r = run();
    if (!r.converged)
      throw ProfileDidNotConverge("profile of " + target_.id.name() + " at " +
                                  std::to_string(value) + " did not converge in " +
                                  std::to_string(opt_.inner_max_iterations) + " iterations");
    optima_.push_back({value, r.params});
    return r.log_likelihood();
  }

  /// LL with only the target moved, the rest held at the base point.
  double conditional(double value) const {
    return total_log_likelihood(pin(base_, target_, value), traces_);
  }

 private:
  // Start point for a probe: the optima of the two nearest earlier probes on
  // the same side (the base point counts as one) extrapolated linearly to
  // `value`, or the nearest optimum when that is not usable.
  HmmParams predict(double value) const {
    std::vector<std::pair<double, const HmmParams*>> pts{{center_, &base_}};
    for (const auto& [v, p] : optima_)
      if ((v - center_) * (value - center_) > 0.0) pts.push_back({v, &p});
    std::sort(pts.begin(), pts.end(), [&](const auto& a, const auto& b) {
      return std::abs(a.first - value) < std::abs(b.first - value);
    });
    if (pts.size() < 2 || pts[0].first == pts[1].first) return *pts[0].second;
    const HmmParams& p1 = *pts[1].second;
    const HmmParams& p2 = *pts[0].second;
    const double s = (value - pts[0].first) / (pts[0].first - pts[1].first);
    auto extend = [&](std::span<const double> a, std::span<const double> b) {
      std::vector<double> out(b.size());
      for (std::size_t k = 0; k < out.size(); ++k) out[k] = b[k] + s * (b[k] - a[k]);
      return out;
    };
    auto pi = extend(p1.initial(), p2.initial());
    auto mu = extend(p1.means(), p2.means());
    auto var = extend(p1.variances(), p2.variances());
    auto a = extend(p1.transitions(), p2.transitions());
    auto valid = [](const std::vector<double>& v, double lo, double hi) {
      return std::all_of(v.begin(), v.end(), [&](double x) { return x >= lo && x <= hi; });
    };
    if (valid(pi, 0.0, 1.0) && valid(a, 0.0, 1.0) && valid(var, kVarianceFloor, 1e300)) {
      try {
        return HmmParams(std::move(pi), std::move(mu), std::move(var), std::move(a), p2.labels());
      } catch (const InvalidArgument&) {
      }
    }
    return *pts[0].second;
  }

  const HmmParams& base_;
  const TraceSet& traces_;
  ProfileOptions opt_;
  ProfileTarget target_;
  double center_;
  TrainingConfig config_{base_};
  std::vector<std::pair<double, HmmParams>> optima_;
};

struct SideResult {
  double delta = 0.0;
  bool clamped = false;
};

}  // namespace detail

/// The unconstrained maximum the profile drops are measured from, refined
/// from the estimate to the inner tolerance. Probes start from its
/// parameters.
struct ProfileReference {
  HmmParams params;
  double log_likelihood = 0.0;
};

inline ProfileReference profile_reference(const HmmParams& star, const TraceSet& traces,
                                          const ProfileOptions& opt = {}) {
  if (traces.empty()) throw InvalidArgument("profile_reference: empty training set");
  TrainingConfig cfg{star};
  cfg.ll_tolerance = opt.inner_tolerance;
  cfg.max_iterations = opt.inner_max_iterations;
  cfg.step = opt.step;
  auto run = [&] {
    try {
      return train_accelerated(cfg, traces);
    } catch (const NumericalError& err) {
      std::throw_with_nested(ProfileDidNotConverge(std::string("refining the maximum: ") + err.what()));
    }
  };
  const TrainingResult r = run();
  if (!r.converged)
    throw ProfileDidNotConverge("refining the maximum did not converge in " +
                                std::to_string(opt.inner_max_iterations) + " iterations");
  return {r.params, r.log_likelihood()};
}

/// Profile-likelihood interval: on each side, the distance delta at which
/// the LL re-maximised over all other free parameters falls by delta_ll below
/// its maximum. A side whose root lies past the parameter's domain stops at
/// the boundary; half-widths are at least kMinHalfWidth unless the domain
/// boundary is closer.
inline ConfidenceInterval likelihood_ratio_interval(const HmmParams& star, const TraceSet& traces,
                                                    const ParamId& target,
                                                    const ProfileReference& reference,
                                                    const ProfileOptions& opt = {}) {
  if (!(opt.delta_ll > 0.0)) throw InvalidArgument("delta_ll must be > 0");
  if (traces.empty()) throw InvalidArgument("likelihood_ratio_interval: empty training set");
  if (opt.step.is_frozen(target))
    throw InvalidArgument(target.name() + " is frozen and has no likelihood-ratio interval");
  detail::Profile profile(star, reference.params, traces, target, opt);
  const auto& tgt = profile.target();
  const double c = profile.center();
  double best = reference.log_likelihood;

  auto side = [&](double sign) -> detail::SideResult {
    const double room = sign > 0 ? tgt.hi - c : c - tgt.lo;
    if (!(room > 0.0)) return {0.0, true};
    auto value_at = [&](double d) { return c + sign * d; };

    // Step size from the conditional curvature, adjusted until the
    // conditional drop is of order delta_ll.
    double h = std::max(std::abs(c) * 1e-2, 1e-4);
    h = std::min(h, 0.5 * room);
    double cond_drop = 0.0;
    for (int k = 0; k < 40; ++k) {
      cond_drop = best - profile.conditional(value_at(h));
      if (cond_drop > 0.05 * opt.delta_ll && cond_drop < 20.0 * opt.delta_ll) break;
      if (cond_drop >= 20.0 * opt.delta_ll)
        h *= std::max(0.1, std::sqrt(opt.delta_ll / cond_drop));
      else if (h >= 0.5 * room)
        break;
      else
        h = std::min(h * (cond_drop > 0 ? std::min(10.0, std::sqrt(opt.delta_ll / cond_drop)) : 10.0),
                     0.5 * room);
    }
    double d = cond_drop > 0 ? h * std::sqrt(opt.delta_ll / cond_drop) : h;
    d = std::min(d, room);

    // Illinois false position on u = delta^2, where the drop is close to
    // linear. Each end carries a weight that halves when the other end
    // moves twice in a row.
    struct End {
      double u, ll, weight;
    };
    End below{0.0, best, 1.0};
    std::optional<End> above, prev_below;
    int last = 0;  // -1 below moved, +1 above moved
    for (std::size_t it = 0; it < opt.max_probes; ++it) {
      const double ll = profile.at(value_at(d));
      if (ll > best) {
        best = ll;
        if (below.u == 0.0) below.ll = ll;
      }
      const double drop = best - ll;
      if (std::abs(drop - opt.delta_ll) < opt.drop_tolerance) return {d, false};
      const double u = d * d;
      if (drop < opt.delta_ll) {
        if (d >= room) return {room, true};
        if (u > below.u) {
          prev_below = below;
          below = {u, ll, 1.0};
          if (last == -1 && above) above->weight *= 0.5;
          last = -1;
        }
      } else if (!above || u < above->u) {
        above = End{u, ll, 1.0};
        if (last == 1) below.weight *= 0.5;
        last = 1;
      }
      const double f_lo = (best - below.ll - opt.delta_ll) * below.weight;
      if (above) {
        const double f_hi = (best - above->ll - opt.delta_ll) * above->weight;
        double next = below.u - f_lo * (above->u - below.u) / (f_hi - f_lo);
        if (!(next > below.u && next < above->u)) next = 0.5 * (below.u + above->u);
        d = std::sqrt(next);
      } else {
        // Secant through the two furthest points below the target, aimed a
        // little past it so the next probe is likely to bracket the root.
        const double aim = 1.2 * opt.delta_ll;
        const double d_lo = best - below.ll;
        const double uu = below.u;
        double next = d_lo > 1e-6 && uu > 0 ? uu * aim / d_lo : 4.0 * std::max(uu, u);
        if (prev_below && uu > prev_below->u) {
          const double slope = (prev_below->ll - below.ll) / (uu - prev_below->u);
          if (slope > 0.0) next = uu + (aim - d_lo) / slope;
        }
        next = std::min(next, 16.0 * std::max(uu, u));
        d = std::min(std::sqrt(next), room);
        if (d <= std::sqrt(uu)) d = std::min(room, 2.0 * std::sqrt(uu));
      }
    }
    if (!above)
      throw NonMonotoneProfile("log-likelihood of " + target.name() +
                               " does not fall by " + std::to_string(opt.delta_ll) +
                               " within the search range");
    // Out of probes with a bracket: report the bracket midpoint in u.
    return {std::sqrt(0.5 * (below.u + above->u)), false};
  };

  const auto minus = side(-1.0);
  const auto plus = side(+1.0);
  ConfidenceInterval ci;
  ci.parameter = target.name();
  ci.estimate = c;
  ci.method = IntervalMethod::LikelihoodRatio;
  ci.level = likelihood_ratio_level(opt.delta_ll);
  ci.lower = std::max(tgt.lo, c - std::max(minus.delta, kMinHalfWidth));
  ci.upper = std::min(tgt.hi, c + std::max(plus.delta, kMinHalfWidth));
  ci.lower_clamped = minus.clamped || ci.lower == tgt.lo;
  ci.upper_clamped = plus.clamped || ci.upper == tgt.hi;
  return ci;
}

inline ConfidenceInterval likelihood_ratio_interval(const HmmParams& star, const TraceSet& traces,
                                                    const ParamId& target,
                                                    const ProfileOptions& opt = {}) {
  if (opt.step.is_frozen(target))
    throw InvalidArgument(target.name() + " is frozen and has no likelihood-ratio interval");
  return likelihood_ratio_interval(star, traces, target, profile_reference(star, traces, opt), opt);
}

/// Intervals for every estimable parameter, sharing one reference maximum.
inline std::vector<ConfidenceInterval> likelihood_ratio_intervals(const HmmParams& star,
                                                                  const TraceSet& traces,
                                                                  const ProfileOptions& opt = {}) {
  const auto reference = profile_reference(star, traces, opt);
  std::vector<ConfidenceInterval> out;
  for (const auto& id : estimable_parameters(star, opt.step))
    out.push_back(likelihood_ratio_interval(star, traces, id, reference, opt));
  return out;
}

/// Mean and unbiased standard deviation of independent estimates.
inline ConfidenceInterval monte_carlo_interval(const std::string& name,
                                               const std::vector<double>& estimates) {
  if (estimates.size() < 2) throw InvalidArgument("Monte Carlo interval needs at least two sets");
  const double n = static_cast<double>(estimates.size());
  double mean = 0.0;
  for (double v : estimates) mean += v;
  mean /= n;
  double ss = 0.0;
  for (double v : estimates) ss += (v - mean) * (v - mean);
  const double sd = std::max(std::sqrt(ss / (n - 1.0)), kMinHalfWidth);
  ConfidenceInterval ci;
  ci.parameter = name;
  ci.estimate = mean;
  ci.lower = mean - sd;
  ci.upper = mean + sd;
  ci.method = IntervalMethod::MonteCarlo;
  ci.level = likelihood_ratio_level(0.5);
  return ci;
}

/// Trains on every set and returns one interval per estimable parameter.
inline std::vector<ConfidenceInterval> monte_carlo_intervals(const TrainingConfig& config,
                                                             const std::vector<TraceSet>& sets) {
  if (sets.size() < 2) throw InvalidArgument("Monte Carlo interval needs at least two sets");
  std::vector<HmmParams> fits;
  for (std::size_t d = 0; d < sets.size(); ++d) {
    try {
      fits.push_back(train(config, sets[d]).params);
    } catch (const Error& err) {
      std::throw_with_nested(
          NumericalError("training on Monte Carlo set " + std::to_string(d) + ": " + err.what()));
    }
  }
  std::vector<ConfidenceInterval> out;
  for (const auto& id : estimable_parameters(config.init_params, config.step)) {
    std::vector<double> v;
    for (const auto& f : fits) v.push_back(f.get(id));
    out.push_back(monte_carlo_interval(id.name(), v));
  }
  return out;
}

inline ConfidenceInterval monte_carlo_interval(const TrainingConfig& config,
                                               const std::vector<TraceSet>& sets,
                                               const ParamId& target) {
  for (auto& ci : monte_carlo_intervals(config, sets))
    if (ci.parameter == target.name()) return ci;
  throw InvalidArgument(target.name() + " is not estimated by this configuration");
}

/// One line of a residual table: estimate minus truth and the interval
/// edges relative to the truth.
struct Residual {
  std::string parameter;
  double truth = 0.0;
  double residual = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  /// |estimate - truth| in units of the interval half-width on the side
  /// facing the truth.
  double normalized = 0.0;
};

inline std::vector<Residual> residual_table(const std::vector<ConfidenceInterval>& intervals,
                                            const HmmParams& truth) {
  std::vector<Residual> out;
  for (const auto& ci : intervals) {
    const double t = truth.get(ParamId::parse(ci.parameter));
    const double half = t > ci.estimate ? ci.plus() : ci.minus();
    const double gap = std::abs(ci.estimate - t);
    const double norm = half > 0.0 ? gap / half : (gap > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
    out.push_back({ci.parameter, t, ci.estimate - t, ci.lower - t, ci.upper - t, norm});
  }
  return out;
}

}  // namespace qreadout
