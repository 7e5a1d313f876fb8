#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hardproj {

// Vector or matrix sizes that do not agree with what an operation expects.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A violated precondition on a configuration or parameter value.
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A constraint map produced a non-finite value.
class EvaluationError : public std::runtime_error {
 public:
  EvaluationError(const std::string& what, std::size_t constraint_index)
      : std::runtime_error(what), constraint_index_(constraint_index) {}

  std::size_t constraint_index() const { return constraint_index_; }

 private:
  std::size_t constraint_index_;
};

// The undamped step needs J J^T to be invertible.
class RankDeficiencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An iterative procedure produced a non-finite iterate or loss.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, long iteration)
      : std::runtime_error(what), iteration_(iteration) {}

  long iteration() const { return iteration_; }

 private:
  long iteration_;
};

// The oracle solver failed to converge within its budget.
class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace hardproj
