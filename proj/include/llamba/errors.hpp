#pragma once

#include <stdexcept>
#include <string>

namespace llamba {

// Shape / dimension mismatches (matmul, elementwise, projections).
struct DimensionError : std::invalid_argument {
  explicit DimensionError(const std::string& msg) : std::invalid_argument(msg) {}
};

// NaN/Inf encountered where finite values are required.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad configuration values (fractions > 1, Q < 1, ...).
struct ConfigError : std::invalid_argument {
  explicit ConfigError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Malformed model/checkpoint files.
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training aborted on a non-finite loss; carries the offending step.
struct NanLossError : std::runtime_error {
  int step;
  explicit NanLossError(int step_)
      : std::runtime_error("non-finite loss at step " + std::to_string(step_)),
        step(step_) {}
};

}  // namespace llamba
