#pragma once

#include <functional>
#include <vector>

#include "numcore/tape.hpp"

namespace dast::nc {

struct GradCheckOptions {
  double eps = 1e-5;
  // Check every `stride`-th coordinate of each parameter (1 = all).
  std::size_t stride = 1;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
};

// Builds the scalar loss on the given tape from the parameters.
using LossBuilder = std::function<Var(Tape&)>;

// Central-difference check of reverse-mode gradients. Relative error per
// coordinate is |g_ad − g_fd| / max(1, |g_ad|, |g_fd|).
GradCheckReport grad_check(const LossBuilder& f, const std::vector<Tensor*>& params, const GradCheckOptions& opts = {});

}  // namespace dast::nc
