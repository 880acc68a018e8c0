#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "fsl/tensor.hpp"

namespace fsl {

// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor);
// the floor keeps vanishing gradients from amplifying round-off.
inline constexpr double kGradcheckFloor = 1e-3;

struct GradcheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Compares reverse-mode gradients of `loss` with respect to every entry of
// `wrt` against central differences with step h. `loss` must rebuild its
// graph from the current values of `wrt` on each call; the entries of `wrt`
// must require gradients. Values are restored before returning.
GradcheckResult check_gradients(std::string name, const std::function<Tensor()>& loss, std::vector<Tensor> wrt,
                                double h = 1e-5);

}  // namespace fsl
