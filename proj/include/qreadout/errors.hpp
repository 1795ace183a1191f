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

#include <cstddef>
#include <stdexcept>
#include <string>

namespace qreadout {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid model parameters, configuration values or arguments.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A numerical procedure could not produce a result.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Every state has zero probability mass at some time step; the model cannot
/// explain the observed sample.
class AllStatesImpossible : public NumericalError {
 public:
  AllStatesImpossible(std::size_t time_step, std::size_t trace_index = npos)
      : NumericalError(describe(time_step, trace_index)),
        time_step_(time_step),
        trace_index_(trace_index) {}

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  std::size_t time_step() const noexcept { return time_step_; }
  std::size_t trace_index() const noexcept { return trace_index_; }

  AllStatesImpossible with_trace(std::size_t trace_index) const {
    return AllStatesImpossible(time_step_, trace_index);
  }

 private:
  static std::string describe(std::size_t t, std::size_t n) {
    std::string msg = "all states impossible at t=" + std::to_string(t);
    if (n != npos) msg += " in trace " + std::to_string(n);
    return msg;
  }

  std::size_t time_step_;
  std::size_t trace_index_;
};

/// A state received zero posterior occupancy over the whole training set.
class EmptyStateOccupancy : public NumericalError {
 public:
  explicit EmptyStateOccupancy(std::size_t state)
      : NumericalError("state " + std::to_string(state + 1) +
                       " has zero posterior occupancy"),
        state_(state) {}
  std::size_t state() const noexcept { return state_; }

 private:
  std::size_t state_;
};

/// Training failed at a given iteration; wraps the underlying message.
class TrainingFailed : public NumericalError {
 public:
  TrainingFailed(std::size_t iteration, const std::string& what)
      : NumericalError("training failed at iteration " +
                       std::to_string(iteration) + ": " + what),
        iteration_(iteration) {}
  std::size_t iteration() const noexcept { return iteration_; }

 private:
  std::size_t iteration_;
};

class ProfileDidNotConverge : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class NonMonotoneProfile : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

/// A transition probability scaled by the filter block size reached 1.
class ScaledProbabilityInvalid : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

/// Configuration file or flag errors.
class ConfigError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

/// File system or format errors.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace qreadout
