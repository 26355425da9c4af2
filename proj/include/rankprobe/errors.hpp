#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace rankprobe {

// Bad input: inconsistent shapes, invalid configuration, unknown names.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Raised when a quantity is undefined for the given input (e.g. the relative
// residual of the zero matrix).
class DegenerateInputError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// A non-finite value appeared in a forward pass, a loss curve or a rollout.
// `where` carries the layer, step or parameter index when one is known.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what,
                          std::optional<std::size_t> where = std::nullopt)
      : std::runtime_error(what), where_(where) {}

  std::optional<std::size_t> where() const { return where_; }

 private:
  std::optional<std::size_t> where_;
};

// Combinatorial explosion guard for path enumeration.
class GuardError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace rankprobe
