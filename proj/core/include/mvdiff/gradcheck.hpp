#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "mvdiff/autodiff.hpp"

namespace mvdiff::numerics {

struct GradCheckOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  /// Fraction of each parameter's coordinates to probe, at least `min_coords`
  /// (or all of them when the parameter is smaller).
  double fraction = 0.01;
  std::size_t min_coords = 16;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
  bool passed = true;
};

/// Builds a scalar loss on a fresh graph from parameters bound through the binder.
using LossBuilder = std::function<Var(ParamBinder&)>;

/// |a-b| / max(|a|, |b|, 1e-8).
double relative_error(double a, double b) noexcept;

/// Compares reverse-mode gradients of every trainable parameter against
/// central differences.
GradCheckReport grad_check(ParameterStore& store, const LossBuilder& build, const GradCheckOptions& options = {});

}  // namespace mvdiff::numerics
