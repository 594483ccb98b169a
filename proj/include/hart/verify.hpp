#pragma once

// Numerical checks of the attention kernel shared by the CLI and the test suites.

#include <cstdint>

namespace hart::verify {

constexpr double kEquivTolerance = 1e-12;

struct EquivReport {
  std::size_t trials = 0;
  double max_elementwise_dev = 0.0;  // |dak(A) * V - (V + elu(A) * V)|
  double max_mkoi_dev = 0.0;         // mkoi vs mkoi_decoupled on the same weights
  bool passed = false;
};

/// Random (A, V) pairs with A ~ N(0, 3^2); each trial also runs a freshly
/// initialized MKOI module both ways.
EquivReport equivalence_suite(std::size_t trials, std::uint64_t seed, double tolerance = kEquivTolerance);

struct DakReport {
  std::size_t samples = 0;
  std::size_t positivity_violations = 0;
  double value_at_zero = 0.0;
  double right_derivative = 0.0;  // forward difference at 0
  double left_derivative = 0.0;   // backward difference at 0
  bool passed = false;
};

/// Positivity on samples values from N(0, 20^2), dak(0), and one-sided finite
/// differences at 0 (tolerance 1e-8 on each derivative).
DakReport dak_properties(std::size_t samples, std::uint64_t seed);

}  // namespace hart::verify
