#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace rangevit {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  int64_t coords_checked = 0;
};

// Central finite differences (step 1e-5, 64-bit) against the recorded
// adjoints; relative error |a - n| / max(|a|, |n|, 1e-3). Each check samples
// a handful of coordinates per input tensor.
std::vector<GradCheckResult> op_gradient_checks(uint64_t seed = 12345);

// Same check through the whole network (L=2, D=64, D_h=32 on an 8 x 32 crop
// with 20 points) at the looser composite tolerance of 1e-3.
GradCheckResult end_to_end_gradient_check(uint64_t seed = 12345);

std::vector<GradCheckResult> run_gradient_suite(uint64_t seed = 12345);

bool all_passed(const std::vector<GradCheckResult>& results);

}  // namespace rangevit
