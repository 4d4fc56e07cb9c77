#pragma once

#include <string>
#include <vector>

#include "mvdiff/gradcheck.hpp"

namespace mvdiff::verify {

struct SuiteEntry {
  std::string name;
  numerics::GradCheckReport report;
};

struct SuiteResult {
  std::vector<SuiteEntry> entries;
  double max_rel_err = 0.0;
  std::string worst;
  bool passed = true;
  double seconds = 0.0;
};

/// Gradient checks of every graph op, the full diffusion loss at width 4 and
/// the predictor stack for both tasks, in 64-bit.
SuiteResult run_gradcheck_suite(double tolerance = 1e-4);

}  // namespace mvdiff::verify
