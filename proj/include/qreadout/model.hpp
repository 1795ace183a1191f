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
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qreadout/errors.hpp"

namespace qreadout {

/// State indices are zero-based in the C++ API. Parameter names, files and
/// reports use one-based labels ("A12" is the 1 -> 2 transition).
using StateIndex = std::size_t;

/// Identifies one scalar entry of an HMM parameter set.
struct ParamId {
  enum class Kind { Initial, Mean, Variance, Transition };

  Kind kind = Kind::Mean;
  StateIndex row = 0;
  StateIndex col = 0;  // transitions only

  static ParamId initial(StateIndex i) { return {Kind::Initial, i, 0}; }
  static ParamId mean(StateIndex i) { return {Kind::Mean, i, 0}; }
  static ParamId variance(StateIndex i) { return {Kind::Variance, i, 0}; }
  static ParamId transition(StateIndex i, StateIndex j) {
    return {Kind::Transition, i, j};
  }

  bool is_probability() const {
    return kind == Kind::Initial || kind == Kind::Transition;
  }

  friend bool operator==(const ParamId&, const ParamId&) = default;
  friend auto operator<=>(const ParamId&, const ParamId&) = default;

  /// "pi1", "mu2", "var1", "A12"; indices above 9 are separated by '_'
  /// ("A3_11").
  std::string name() const {
    auto idx = [](StateIndex i) { return std::to_string(i + 1); };
    switch (kind) {
      case Kind::Initial:
        return "pi" + idx(row);
      case Kind::Mean:
        return "mu" + idx(row);
      case Kind::Variance:
        return "var" + idx(row);
      case Kind::Transition:
        if (row < 9 && col < 9) return "A" + idx(row) + idx(col);
        return "A" + idx(row) + "_" + idx(col);
    }
    return {};
  }

  static ParamId parse(std::string_view text) {
    auto number = [&](std::string_view digits) -> StateIndex {
      if (digits.empty()) throw InvalidArgument("bad parameter name '" + std::string(text) + "'");
      StateIndex v = 0;
      for (char c : digits) {
        if (c < '0' || c > '9') throw InvalidArgument("bad parameter name '" + std::string(text) + "'");
        v = v * 10 + static_cast<StateIndex>(c - '0');
      }
      if (v == 0) throw InvalidArgument("state labels start at 1 in '" + std::string(text) + "'");
      return v - 1;
    };
    if (text.starts_with("pi")) return initial(number(text.substr(2)));
    if (text.starts_with("mu")) return mean(number(text.substr(2)));
    if (text.starts_with("var")) return variance(number(text.substr(3)));
    if (text.starts_with("A")) {
      auto body = text.substr(1);
      auto sep = body.find('_');
      if (sep != std::string_view::npos)
        return transition(number(body.substr(0, sep)), number(body.substr(sep + 1)));
      if (body.size() != 2) throw InvalidArgument("bad parameter name '" + std::string(text) + "'");
      return transition(number(body.substr(0, 1)), number(body.substr(1, 1)));
    }
    throw InvalidArgument("bad parameter name '" + std::string(text) + "'");
  }
};

/// Gaussian-emission HMM parameters (pi, mu, sigma^2, A) for M states.
/// Immutable once constructed; the constructor enforces the invariants.
class HmmParams {
 public:
  static constexpr double kSumTolerance = 1e-12;

  HmmParams(std::vector<double> initial, std::vector<double> means,
            std::vector<double> variances, std::vector<double> transitions,
            std::vector<std::string> labels = {})
      : initial_(std::move(initial)),
        means_(std::move(means)),
        variances_(std::move(variances)),
        transitions_(std::move(transitions)),
        labels_(std::move(labels)) {
    validate();
  }

  std::size_t num_states() const noexcept { return means_.size(); }

  double initial(StateIndex i) const { return initial_[i]; }
  double mean(StateIndex i) const { return means_[i]; }
  double variance(StateIndex i) const { return variances_[i]; }
  double transition(StateIndex i, StateIndex j) const {
    return transitions_[i * num_states() + j];
  }

  std::span<const double> initial() const noexcept { return initial_; }
  std::span<const double> means() const noexcept { return means_; }
  std::span<const double> variances() const noexcept { return variances_; }
  /// Row-major M x M.
  std::span<const double> transitions() const noexcept { return transitions_; }
  std::span<const double> transition_row(StateIndex i) const {
    return std::span<const double>(transitions_).subspan(i * num_states(), num_states());
  }
  const std::vector<std::string>& labels() const noexcept { return labels_; }

  double get(const ParamId& id) const {
    check_id(id);
    switch (id.kind) {
      case ParamId::Kind::Initial:
        return initial_[id.row];
      case ParamId::Kind::Mean:
        return means_[id.row];
      case ParamId::Kind::Variance:
        return variances_[id.row];
      case ParamId::Kind::Transition:
        return transition(id.row, id.col);
    }
    return 0.0;
  }

  /// Copy with one entry replaced. Probability entries keep their row on the
  /// simplex by rescaling the remaining entries of the row.
  HmmParams with(const ParamId& id, double value) const {
    check_id(id);
    auto pi = initial_;
    auto mu = means_;
    auto var = variances_;
    auto a = transitions_;
    const std::size_t m = num_states();
    switch (id.kind) {
      case ParamId::Kind::Initial:
        set_on_simplex(std::span<double>(pi), id.row, value);
        break;
      case ParamId::Kind::Mean:
        mu[id.row] = value;
        break;
      case ParamId::Kind::Variance:
        var[id.row] = value;
        break;
      case ParamId::Kind::Transition:
        set_on_simplex(std::span<double>(a).subspan(id.row * m, m), id.col, value);
        break;
    }
    return HmmParams(std::move(pi), std::move(mu), std::move(var), std::move(a), labels_);
  }

  /// Every free scalar: all pi, mu, var and off-diagonal A entries. Diagonal
  /// transitions are implied by their row.
  std::vector<ParamId> parameter_ids() const {
    std::vector<ParamId> ids;
    const std::size_t m = num_states();
    for (StateIndex i = 0; i < m; ++i) ids.push_back(ParamId::initial(i));
    for (StateIndex i = 0; i < m; ++i) ids.push_back(ParamId::mean(i));
    for (StateIndex i = 0; i < m; ++i) ids.push_back(ParamId::variance(i));
    for (StateIndex i = 0; i < m; ++i)
      for (StateIndex j = 0; j < m; ++j)
        if (i != j) ids.push_back(ParamId::transition(i, j));
    return ids;
  }

  friend bool operator==(const HmmParams&, const HmmParams&) = default;

 private:
  static void set_on_simplex(std::span<double> row, std::size_t k, double value) {
    if (!(value >= 0.0 && value <= 1.0))
      throw InvalidArgument("probability out of [0,1]: " + std::to_string(value));
    double rest = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j)
      if (j != k) rest += row[j];
    const double target = 1.0 - value;
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j == k) continue;
      if (rest > 0.0) {
        row[j] *= target / rest;
      } else {
        row[j] = row.size() > 1 ? target / static_cast<double>(row.size() - 1) : 0.0;
      }
    }
    row[k] = value;
    // Absorb round-off so the row sums to 1 to the last bit we can manage.
    double sum = 0.0;
    for (double x : row) sum += x;
    for (double& x : row) x /= sum;
  }

  void check_id(const ParamId& id) const {
    const std::size_t m = num_states();
    if (id.row >= m || (id.kind == ParamId::Kind::Transition && id.col >= m))
      throw InvalidArgument("parameter " + id.name() + " out of range for M=" + std::to_string(m));
  }

  void validate() const {
    const std::size_t m = means_.size();
    if (m == 0) throw InvalidArgument("HmmParams: need at least one state");
    if (initial_.size() != m || variances_.size() != m || transitions_.size() != m * m)
      throw InvalidArgument("HmmParams: inconsistent dimensions");
    if (!labels_.empty() && labels_.size() != m)
      throw InvalidArgument("HmmParams: label count does not match state count");
    check_simplex(initial_, "initial probabilities");
    for (std::size_t i = 0; i < m; ++i) {
      check_simplex(std::span<const double>(transitions_).subspan(i * m, m),
                    "transition row " + std::to_string(i + 1));
      if (!std::isfinite(means_[i])) throw InvalidArgument("HmmParams: non-finite mean");
      if (!(variances_[i] > 0.0) || !std::isfinite(variances_[i]))
        throw InvalidArgument("HmmParams: variances must be positive and finite");
    }
  }

  static void check_simplex(std::span<const double> p, const std::string& what) {
    double sum = 0.0;
    for (double x : p) {
      if (!(x >= 0.0 && x <= 1.0))
        throw InvalidArgument("HmmParams: " + what + " has an entry outside [0,1]");
      sum += x;
    }
    if (std::abs(sum - 1.0) > kSumTolerance)
      throw InvalidArgument("HmmParams: " + what + " does not sum to 1");
  }

  std::vector<double> initial_;
  std::vector<double> means_;
  std::vector<double> variances_;
  std::vector<double> transitions_;
  std::vector<std::string> labels_;
};

/// One readout shot: signal samples y_0..y_{T-1} and optional ground truth.
struct SignalTrace {
  std::vector<double> samples;
  /// Zero-based state per sample; empty when unknown.
  std::vector<StateIndex> true_states;
  /// Time step in seconds. Metadata only; algorithms count in steps.
  std::optional<double> sample_interval;
  /// Identifier unique within an experiment; used to audit train/test splits.
  std::uint64_t id = 0;

  std::size_t length() const noexcept { return samples.size(); }
  bool labeled() const noexcept { return !true_states.empty(); }

  void validate(std::size_t num_states = 0) const {
    if (samples.empty()) throw InvalidArgument("signal trace must have T >= 1");
    if (labeled()) {
      if (true_states.size() != samples.size())
        throw InvalidArgument("true_states length differs from samples length");
      if (num_states > 0)
        for (auto s : true_states)
          if (s >= num_states) throw InvalidArgument("true state out of range");
    }
  }
};

using TraceSet = std::vector<SignalTrace>;

}  // namespace qreadout
