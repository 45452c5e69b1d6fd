#include "dynalm/ewc.hpp"

#include <cmath>

#include "dynalm/errors.hpp"

namespace dynalm::ewc {

std::vector<double> estimate_fisher_diag(const lm::Parameters& params,
                                         std::span<const corpus::Batch> batches,
                                         const lm::HiddenState& state_init) {
  if (batches.empty()) throw ConfigError("Fisher estimation needs at least one batch");
  std::vector<double> fisher(params.size(), 0.0);
  lm::HiddenState state = state_init;
  for (const auto& batch : batches) {
    auto [out, grad] = lm::loss_and_grad(params, batch, state);
    for (std::size_t j = 0; j < fisher.size(); ++j) fisher[j] += grad[j] * grad[j];
    state = std::move(out.final_state);
  }
  const double n = static_cast<double>(batches.size());
  for (double& f : fisher) f /= n;
  return fisher;
}

StaticMemory consolidate(const lm::Parameters& params, std::vector<double> fisher) {
  if (fisher.size() != params.size()) {
    throw ConfigError("Fisher length " + std::to_string(fisher.size()) +
                      " does not match parameter count " + std::to_string(params.size()));
  }
  return StaticMemory{params, std::move(fisher)};
}

Penalty ewc_penalty(const lm::Parameters& params, const StaticMemory& memory, double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("EWC lambda must be non-negative");
  if (params.size() != memory.theta0.size() || params.size() != memory.fisher.size()) {
    throw ConfigError("EWC penalty: parameter and memory lengths differ");
  }
  Penalty p{0.0, lm::GradientVector(params.layout_ptr())};
  if (lambda == 0.0) return p;
  double sum = 0.0;
  for (std::size_t j = 0; j < params.size(); ++j) {
    const double d = params[j] - memory.theta0[j];
    sum += memory.fisher[j] * d * d;
    p.grad[j] = lambda * memory.fisher[j] * d;
  }
  p.value = 0.5 * lambda * sum;
  return p;
}

}  // namespace dynalm::ewc
