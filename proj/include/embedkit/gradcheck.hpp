#pragma once

#include <functional>
#include <string>
#include <vector>

#include "embedkit/tensor.hpp"

namespace embedkit {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  Index worst_coordinate = -1;
  Index coordinates_checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;

  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

struct GradCheckOptions {
  double step = 1e-5;
  // Caps the coordinates probed per parameter; <= 0 probes all of them.
  // Capped probes are spread evenly across the parameter.
  Index max_coordinates = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences (f(x+h) - f(x-h)) / 2h, coordinate by coordinate. Relative
/// error is |a - n| / max(|a|, |n|, 1e-8).
///
/// `f` must rebuild its output from the current parameter values on every
/// call and must be deterministic (dropout off); a function returning
/// different values for identical inputs raises NonDeterministicFunction.
GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<Parameter>& params,
                           const GradCheckOptions& options = {});

}  // namespace embedkit
