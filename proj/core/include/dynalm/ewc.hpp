#pragma once

#include <span>
#include <utility>
#include <vector>

#include "dynalm/corpus.hpp"
#include "dynalm/lm.hpp"

namespace dynalm::ewc {

// Laplace approximation around a pre-trained LM: mean theta0 and diagonal
// precision given by the Fisher diagonal. Coordinate-aligned with the LM.
struct StaticMemory {
  lm::Parameters theta0;
  std::vector<double> fisher;
};

// Empirical Fisher diagonal: mean over batches of the squared batch-loss
// gradient. The hidden state is threaded through the batches in the order
// given, so the result depends on batch order.
std::vector<double> estimate_fisher_diag(const lm::Parameters& params,
                                         std::span<const corpus::Batch> batches,
                                         const lm::HiddenState& state_init);

// Snapshots params; later changes to params do not reach the memory.
StaticMemory consolidate(const lm::Parameters& params, std::vector<double> fisher);

struct Penalty {
  double value = 0.0;
  lm::GradientVector grad;
};

// (lambda/2) * sum_j F_j (theta_j - theta0_j)^2 and its gradient.
Penalty ewc_penalty(const lm::Parameters& params, const StaticMemory& memory, double lambda);

}  // namespace dynalm::ewc
