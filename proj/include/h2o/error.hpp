#pragma once

#include <stdexcept>
#include <string>

namespace h2o {

/// Raised when a caller passes arguments that violate an operation's
/// preconditions (shape mismatch, empty batch, out-of-range index, ...).
class InvalidInput : public std::invalid_argument {
 public:
  explicit InvalidInput(const std::string& what) : std::invalid_argument(what) {}
};

/// A gradient entry was NaN or Inf. `layer()` names the offending layer.
class PoisonedGradient : public std::runtime_error {
 public:
  PoisonedGradient(const std::string& what, int layer)
      : std::runtime_error(what), layer_(layer) {}
  int layer() const noexcept { return layer_; }

 private:
  int layer_;
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// A numerical procedure failed to converge or produced non-finite values.
class NumericalFailure : public std::runtime_error {
 public:
  explicit NumericalFailure(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidInput(what);
}

}  // namespace h2o
