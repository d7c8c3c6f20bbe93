#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "t3/tensor.hpp"

namespace t3 {

struct GradCheckOptions {
  double eps = 1e-6;
  /// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1e-6;
  /// 0 checks every coordinate; otherwise at most this many random
  /// coordinates per tensor.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
};

/// Central-difference check of d f(x) / dx for scalar-valued f.
double finite_diff_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, Tensor<double> x,
                         double eps = 1e-6);

/// Checks the gradient of a scalar closure w.r.t. each tensor in `params`,
/// perturbing their values in place.
GradCheckResult finite_diff_check_params(const std::function<Tensor<double>()>& f,
                                         std::vector<Tensor<double>> params, const GradCheckOptions& opts = {});

}  // namespace t3
