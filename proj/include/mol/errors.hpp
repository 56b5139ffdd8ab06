#pragma once

#include <stdexcept>
#include <string>

namespace mol {

// Shape or dimensionality disagreement between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Invalid configuration value; the CLI maps this to exit code 2.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Bad user-supplied data (ids out of range, empty corpus, ...).
struct InputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// API misuse, e.g. backward on a non-scalar.
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

// NaN / Inf encountered where finite values are required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mol
