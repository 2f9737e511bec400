#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mambatrack/tensor.hpp"

namespace mambatrack {

struct GradCheckOptions {
  double step = 1e-5;
  /// Entries sampled per parameter tensor; 0 checks every entry.
  int entries_per_tensor = 0;
  uint64_t seed = 0x5eed;
  /// Self-test hook: nonzero perturbs one analytic gradient entry so the
  /// check must fail; verifies the checker can actually detect a bad adjoint.
  double inject_error = 0.0;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  int64_t entries_checked = 0;
  bool passed(double threshold) const { return max_rel_err < threshold; }
};

/// Compares reverse-mode gradients of a scalar-valued forward against central
/// finite differences. `forward` must be deterministic and re-runnable; it is
/// recorded once for the analytic pass and re-evaluated unrecorded for each
/// perturbation. Relative error uses denominator max(|a|,|n|,1e-2).
GradCheckResult grad_check(const std::function<Tensor()>& forward,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           const GradCheckOptions& opts = {});

}  // namespace mambatrack
