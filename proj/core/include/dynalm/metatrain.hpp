#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "dynalm/corpus.hpp"
#include "dynalm/ewc.hpp"
#include "dynalm/lm.hpp"
#include "dynalm/metalearner.hpp"

namespace dynalm::metatrain {

struct UnrollConfig {
  std::size_t unroll_len = 40;
  // 0 selects round(sqrt(unroll_len)).
  std::size_t checkpoint_interval = 0;
  double meta_lr = 1e-3;
  std::size_t meta_steps = 100;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  // Continue each window from the previous window's weights and state
  // instead of restarting from theta0 with a zero state.
  bool carry_theta = false;
  // Optional EWC term (lambda/2) sum F (theta - theta0)^2 added per step.
  double ewc_lambda = 0.0;
  meta::FeatureOptions features;

  std::size_t interval() const;
  void validate() const;
};

// Result of scoring one batch with theta_prev and applying the gated update.
struct OnlineStep {
  lm::StepOutput output;
  lm::GradientVector grad;
  lm::Parameters next;
};

// The LM loss is taken at theta_prev, before the update.
OnlineStep meta_step(const meta::MetaParams& meta, const lm::Parameters& theta_prev,
                     const corpus::Batch& batch, const lm::HiddenState& hidden,
                     const ewc::StaticMemory* memory, const meta::FeatureOptions& opts);

struct Snapshot {
  std::size_t step = 0;
  lm::Parameters theta;
  lm::HiddenState hidden;
  std::uint64_t hash = 0;
};

struct UnrollState {
  lm::Parameters theta;  // theta after the last update
  lm::HiddenState hidden;
  std::size_t batch_cursor = 0;
  std::vector<Snapshot> checkpoints;  // every K steps, starting at step 0
  std::uint64_t final_hash = 0;
  // Per-step contexts, only kept by the store-everything variant.
  std::vector<meta::StepContext> stored;
};

struct MetaLossReport {
  double meta_loss = 0.0;  // sum of per-step LM losses
  std::vector<double> per_step_losses;
  double penalty = 0.0;  // EWC contribution to the objective, 0 when disabled
  double meta_grad_norm = 0.0;
  double theta_drift = 0.0;  // ||theta_T - theta_start|| / ||theta_start||
};

struct UnrollResult {
  MetaLossReport report;
  UnrollState state;
};

// Live-state counters for the memory contract.
struct Instrumentation {
  std::size_t peak_live_states = 0;
  std::size_t recomputed_steps = 0;
};

std::uint64_t hash_state(const lm::Parameters& theta, const lm::HiddenState& hidden);

UnrollResult unroll_forward(const meta::MetaParams& meta, const lm::Parameters& theta_start,
                            const ewc::StaticMemory& memory, std::span<const corpus::Batch> batches,
                            const lm::HiddenState& hidden_start, const UnrollConfig& cfg,
                            bool store_all = false);

// Reverse sweep over the unroll. Each K-step segment is recomputed from its
// snapshot; with a store-everything forward the saved contexts are used.
std::vector<double> unroll_backward(const meta::MetaParams& meta, const ewc::StaticMemory& memory,
                                    std::span<const corpus::Batch> batches, const UnrollConfig& cfg,
                                    const UnrollState& state, Instrumentation* stats = nullptr);

struct TrainLogRow {
  std::size_t meta_step = 0;
  double meta_loss = 0.0;
  double mean_step_loss = 0.0;
  double meta_grad_norm = 0.0;  // before clipping
  double theta_drift = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  meta::MetaParams meta;
  std::vector<TrainLogRow> log;
};

// Clips v to global L2 norm <= max_norm; returns the norm before clipping.
double clip_global_norm(std::span<double> v, double max_norm);

// Adam(beta1 0.9, beta2 0.999, eps 1e-8) over non-overlapping windows of
// unroll_len batches, window order reshuffled each epoch.
TrainResult train_meta(const meta::MetaParams& meta, const lm::Parameters& theta0_source,
                       const ewc::StaticMemory& memory, std::span<const corpus::Batch> batches,
                       const UnrollConfig& cfg,
                       const std::function<void(const TrainLogRow&)>& on_step = {});

}  // namespace dynalm::metatrain
