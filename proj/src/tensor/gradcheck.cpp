#include "fsl/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "fsl/errors.hpp"

namespace fsl {

GradcheckResult check_gradients(std::string name, const std::function<Tensor()>& loss, std::vector<Tensor> wrt,
                                double h) {
  for (auto& t : wrt) {
    if (!t.requires_grad()) throw UsageError("gradcheck: '" + name + "' input does not require a gradient");
    t.zero_grad();
  }
  backward(loss());
  std::vector<std::vector<double>> analytic;
  for (auto& t : wrt) analytic.emplace_back(t.grad().begin(), t.grad().end());

  GradcheckResult result{std::move(name), 0.0, 0};
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    auto values = wrt[i].mutable_data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double saved = values[j];
      values[j] = saved + h;
      const double up = loss().item();
      values[j] = saved - h;
      const double down = loss().item();
      values[j] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[i][j];
      const double denom = std::max({std::abs(a), std::abs(numeric), kGradcheckFloor});
      const double rel = std::abs(a - numeric) / denom;
      result.max_rel_error = std::max(result.max_rel_error, std::isfinite(rel) ? rel : INFINITY);
      ++result.checked;
    }
  }
  for (auto& t : wrt) t.zero_grad();
  return result;
}

}  // namespace fsl
