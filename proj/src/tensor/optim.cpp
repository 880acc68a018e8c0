#include "fsl/optim.hpp"

#include <cmath>

#include "fsl/errors.hpp"

namespace fsl {

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd" || name == "sgd-momentum" || name == "sgd_momentum") return OptimizerKind::sgd_momentum;
  throw ValidationError("unknown optimizer '" + name + "' (expected adam or sgd)");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd"; }

void zero_grads(std::vector<Tensor>& params) {
  for (auto& p : params) p.zero_grad();
}

void optimizer_step(std::vector<Tensor>& params, OptimizerState& state, const OptimizerConfig& config) {
  if (!(config.learning_rate > 0.0)) throw ValidationError("optimizer: learning rate must be positive");
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (double g : params[i].grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("optimizer: non-finite gradient in parameter " + std::to_string(i) + " " +
                           shape_string(params[i].shape()) + " at step " + std::to_string(state.step + 1));
      }
    }
  }
  if (state.first.size() != params.size()) {
    state.first.assign(params.size(), {});
    state.second.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.first[i].assign(params[i].numel(), 0.0);
      if (config.kind == OptimizerKind::adam) state.second[i].assign(params[i].numel(), 0.0);
    }
  }
  ++state.step;
  const double lr = config.learning_rate;
  if (config.kind == OptimizerKind::sgd_momentum) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto w = params[i].mutable_data();
      auto g = params[i].grad();
      auto& v = state.first[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = config.momentum * v[j] + g[j];
        w[j] -= lr * v[j];
      }
    }
    return;
  }
  const auto t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_data();
    auto g = params[i].grad();
    auto& m = state.first[i];
    auto& s = state.second[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
      s[j] = config.beta2 * s[j] + (1.0 - config.beta2) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(s[j] / c2) + config.epsilon);
    }
  }
}

}  // namespace fsl
