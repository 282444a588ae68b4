#pragma once

// Seeded central-difference checks over every layer, every loss and the
// encode -> decode -> loss composite.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mrt/autodiff.hpp"

namespace mrt {

inline constexpr double kGradcheckTolerance = 1e-5;

// sum((y - y0) * R) with a fixed pseudo-random R and y0 the output of the
// first call. The gradient is that of sum(y * R), but the value stays near
// zero, so central differences are not swamped by rounding of a large total.
class CenteredProbe {
 public:
  Var operator()(Var y);

 private:
  std::optional<Tensor> baseline_;
};

struct GradcheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  bool passed() const { return max_rel_error <= kGradcheckTolerance; }
};

// Worst relative error per checked function over `trials` random instances.
// The composite runs at T=8, N=5, channels [4,4,4], d_z=4, calibrated so no
// sigmoid is saturated, and differentiates with respect to the motion and
// the bone lengths.
std::vector<GradcheckEntry> gradcheck_suite(std::uint64_t seed, int trials = 3);

}  // namespace mrt
