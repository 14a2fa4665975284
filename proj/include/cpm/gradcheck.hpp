// Finite-difference audit of the autodiff surface: every primitive plus the
// distribution-matching losses (plain and positive-enhanced targets), each
// checked at random points against central differences in 64-bit.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cpm {

struct GradCheckCase {
  std::string name;
  std::size_t points = 0;      // random points evaluated
  double max_rel_err = 0.0;    // worst |analytic - numeric| / max(1, |analytic|)
};

struct GradCheckReport {
  std::vector<GradCheckCase> cases;
  double tolerance = 1e-4;
  double worst() const;
  bool passed() const;         // every case under tolerance
  std::string to_text() const; // aligned table plus one verdict line
  std::string to_json() const;
};

// Runs the whole suite; deterministic for a fixed seed. Points are drawn away
// from non-differentiable sets (relu kinks, log/divide near zero) so central
// differences are valid.
GradCheckReport run_gradient_checks(std::uint64_t seed = 7, std::size_t points_per_case = 100,
                                    double tolerance = 1e-4);

}  // namespace cpm
