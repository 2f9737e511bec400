#pragma once

#include <stdexcept>

namespace mambatrack {

/// File/stream failures; the CLI maps these to exit code 3.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Non-finite values or failed numerical gates; CLI exit code 2.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mambatrack
