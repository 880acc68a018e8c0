#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "fsl/tensor.hpp"

namespace fsl {

enum class OptimizerKind { sgd_momentum, adam };

OptimizerKind parse_optimizer(const std::string& name);
std::string to_string(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double momentum = 0.9;  // sgd only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Moment buffers for one parameter list. The list order must stay fixed
// between steps.
struct OptimizerState {
  std::size_t step = 0;
  std::vector<std::vector<double>> first;
  std::vector<std::vector<double>> second;
};

// Applies one update from the accumulated grads of `params`. A non-finite
// gradient aborts the step before any parameter changes (NumericError).
void optimizer_step(std::vector<Tensor>& params, OptimizerState& state, const OptimizerConfig& config);

void zero_grads(std::vector<Tensor>& params);

}  // namespace fsl
