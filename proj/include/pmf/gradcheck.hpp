#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pmf/tensor.hpp"

namespace pmf {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // "name[index]" of the worst coordinate
};

/// Compares backprop gradients against central differences
/// (f(p+eps) - f(p-eps)) / (2 eps) for each sampled scalar coordinate.
///
/// loss_fn must rebuild the loss from the (shared) parameter tensors on every
/// call. All parameters must be float64. Relative error per coordinate is
/// |analytic - numeric| / max(|numeric|, 1e-8). max_coords_per_param = 0
/// checks every coordinate; otherwise an evenly spaced subset is used.
GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn,
                                  const std::vector<NamedTensor>& params, double eps,
                                  std::size_t max_coords_per_param = 0);

}  // namespace pmf
