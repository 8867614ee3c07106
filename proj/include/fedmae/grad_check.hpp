#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fedmae/layers.hpp"

namespace fedmae {

// A scalar-valued differentiable computation. It must zero the store's
// gradients, write d(loss)/d(param) into them, and return the loss.
using DifferentiableFn = std::function<double(ParamStore&)>;

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  double max_rel_error = 0.0;
  bool passed = false;
  std::string diagnostic;  // set when the function went non-finite
};

// Compares analytic gradients with central differences, step
// h = 1e-5 * (1 + |value|). The relative error of one entry is
// |a - n| / max(|a|, |n|, magnitude_floor); the floor keeps entries whose
// true gradient is ~0 from dividing roundoff by roundoff.
GradCheckReport grad_check(const DifferentiableFn& fn, ParamStore& params, double tol,
                           double magnitude_floor = 1e-6);

}  // namespace fedmae
