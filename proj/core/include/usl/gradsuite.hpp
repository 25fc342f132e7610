#pragma once

// Named finite-difference audits of every differentiable building block, the
// backing for `uslfit gradcheck`.  Each check builds a seeded random state,
// runs the analytic backward pass, and compares against central differences;
// states that land on a non-smooth locus (gate flips, ReLU kinks, nearest-
// neighbour ties) are resampled a bounded number of times.

#include "usl/diff.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace usl::gradsuite {

struct Check {
  std::string suite;  // render | loss | net
  std::string name;
  diff::GradCheckReport report;
  int attempts = 1;
  double seconds = 0.0;
};

struct SuiteReport {
  std::vector<Check> checks;
  bool passed = true;
  double seconds = 0.0;
};

// Suites: "render", "loss", "net", or "all" for their union.
// Unknown names throw std::invalid_argument.
SuiteReport run(const std::string& suite, double tol = 1e-3, std::uint64_t seed = 0);

std::vector<std::string> suite_names();

}  // namespace usl::gradsuite
