#include "dynalm/metatrain.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>

#include "dynalm/errors.hpp"
#include "dynalm/rng.hpp"

namespace dynalm::metatrain {

namespace {

const ewc::StaticMemory* update_memory(const ewc::StaticMemory* memory, const meta::FeatureOptions& opts) {
  return opts.use_memory ? memory : nullptr;
}

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

void fnv_mix(std::uint64_t& h, std::span<const double> values) {
  for (double v : values) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 0x100000001b3ULL;
    }
  }
}

// Adds the optional EWC gradient for theta_prev into adj.
void add_penalty_grad(std::vector<double>& adj, const lm::Parameters& theta,
                      const ewc::StaticMemory& memory, double lambda) {
  if (lambda == 0.0) return;
  const auto p = ewc::ewc_penalty(theta, memory, lambda);
  for (std::size_t j = 0; j < adj.size(); ++j) adj[j] += p.grad[j];
}

// Reverses steps [0, contexts.size()) of a segment; adj enters as the adjoint
// of the segment's final theta and leaves as the adjoint of its first.
void reverse_segment(const meta::MetaParams& meta, const ewc::StaticMemory& memory,
                     const UnrollConfig& cfg, const std::vector<meta::StepContext>& contexts,
                     std::vector<double>& adj, std::vector<double>& meta_grad) {
  for (std::size_t k = contexts.size(); k-- > 0;) {
    const auto& ctx = contexts[k];
    auto mb = meta::meta_backward(meta, ctx, &memory, adj, cfg.features);
    for (std::size_t q = 0; q < meta_grad.size(); ++q) meta_grad[q] += mb.meta[q];
    adj = std::move(mb.theta_prev);
    for (std::size_t j = 0; j < adj.size(); ++j) adj[j] += ctx.grad[j];
    add_penalty_grad(adj, ctx.theta_prev, memory, cfg.ewc_lambda);
  }
}

}  // namespace

std::size_t UnrollConfig::interval() const {
  if (checkpoint_interval > 0) return checkpoint_interval;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(unroll_len)))));
}

void UnrollConfig::validate() const {
  if (unroll_len < 1) throw ConfigError("unroll_len must be at least 1");
  if (interval() > unroll_len) throw ConfigError("checkpoint_interval must not exceed unroll_len");
  if (!(meta_lr > 0.0)) throw ConfigError("meta_lr must be positive");
  if (!(grad_clip > 0.0)) throw ConfigError("meta grad_clip must be positive");
  if (!(ewc_lambda >= 0.0)) throw ConfigError("ewc_lambda must be non-negative");
}

OnlineStep meta_step(const meta::MetaParams& meta, const lm::Parameters& theta_prev,
                     const corpus::Batch& batch, const lm::HiddenState& hidden,
                     const ewc::StaticMemory* memory, const meta::FeatureOptions& opts) {
  auto [out, grad] = lm::loss_and_grad(theta_prev, batch, hidden);
  const meta::StepInputs in{theta_prev, grad, out.mean_loss, memory};
  const auto g = meta::gates(meta, meta::build_features(in, opts));
  auto next = meta::apply_update(theta_prev, grad, update_memory(memory, opts), g);
  return {std::move(out), std::move(grad), std::move(next)};
}

std::uint64_t hash_state(const lm::Parameters& theta, const lm::HiddenState& hidden) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  fnv_mix(h, theta.data());
  fnv_mix(h, hidden.h);
  fnv_mix(h, hidden.c);
  return h;
}

UnrollResult unroll_forward(const meta::MetaParams& meta, const lm::Parameters& theta_start,
                            const ewc::StaticMemory& memory, std::span<const corpus::Batch> batches,
                            const lm::HiddenState& hidden_start, const UnrollConfig& cfg,
                            bool store_all) {
  cfg.validate();
  if (batches.size() != cfg.unroll_len) {
    throw ConfigError("unroll needs exactly " + std::to_string(cfg.unroll_len) + " batches, got " +
                      std::to_string(batches.size()));
  }
  for (std::size_t i = 1; i < batches.size(); ++i) {
    if (batches[i].index != batches[i - 1].index + 1) throw ConfigError("unroll batches are not consecutive");
  }
  const std::size_t K = cfg.interval();

  UnrollResult result;
  auto& report = result.report;
  auto& state = result.state;
  report.per_step_losses.reserve(cfg.unroll_len);

  lm::Parameters theta = theta_start;
  lm::HiddenState hidden = hidden_start;
  for (std::size_t i = 0; i < cfg.unroll_len; ++i) {
    if (i % K == 0) state.checkpoints.push_back({i, theta, hidden, hash_state(theta, hidden)});
    if (cfg.ewc_lambda > 0.0) report.penalty += ewc::ewc_penalty(theta, memory, cfg.ewc_lambda).value;
    auto step = meta_step(meta, theta, batches[i], hidden, &memory, cfg.features);
    if (!std::isfinite(step.output.mean_loss)) {
      throw NumericalError("non-finite loss at unroll step " + std::to_string(i));
    }
    report.per_step_losses.push_back(step.output.mean_loss);
    if (store_all) state.stored.push_back({std::move(theta), std::move(step.grad), step.output.mean_loss});
    theta = std::move(step.next);
    hidden = std::move(step.output.final_state);
  }
  report.meta_loss = std::accumulate(report.per_step_losses.begin(), report.per_step_losses.end(), 0.0);

  double diff = 0.0;
  for (std::size_t j = 0; j < theta.size(); ++j) {
    const double d = theta[j] - theta_start[j];
    diff += d * d;
  }
  const double base = norm(theta_start.data());
  report.theta_drift = base > 0.0 ? std::sqrt(diff) / base : std::sqrt(diff);

  state.final_hash = hash_state(theta, hidden);
  state.theta = std::move(theta);
  state.hidden = std::move(hidden);
  state.batch_cursor = batches.empty() ? 0 : batches.back().index + 1;
  return result;
}

std::vector<double> unroll_backward(const meta::MetaParams& meta, const ewc::StaticMemory& memory,
                                    std::span<const corpus::Batch> batches, const UnrollConfig& cfg,
                                    const UnrollState& state, Instrumentation* stats) {
  cfg.validate();
  if (batches.size() != cfg.unroll_len) throw ConfigError("backward batches do not match the unroll");
  const std::size_t T = cfg.unroll_len;
  std::vector<double> meta_grad(meta.size(), 0.0);
  std::vector<double> adj(state.theta.size(), 0.0);  // theta_T feeds no loss inside the window

  if (!state.stored.empty()) {
    if (state.stored.size() != T) throw ConfigError("stored contexts do not cover the unroll");
    if (stats) stats->peak_live_states = std::max(stats->peak_live_states, T);
    reverse_segment(meta, memory, cfg, state.stored, adj, meta_grad);
    return meta_grad;
  }

  const std::size_t K = cfg.interval();
  const std::size_t n_segments = (T + K - 1) / K;
  if (state.checkpoints.size() != n_segments) throw ConfigError("missing unroll context");

  std::vector<meta::StepContext> contexts;
  for (std::size_t s = n_segments; s-- > 0;) {
    const auto& snap = state.checkpoints[s];
    if (hash_state(snap.theta, snap.hidden) != snap.hash) throw NumericalError("checkpoint corruption");
    const std::size_t begin = snap.step;
    const std::size_t end = std::min(begin + K, T);

    contexts.clear();
    lm::Parameters theta = snap.theta;
    lm::HiddenState hidden = snap.hidden;
    for (std::size_t i = begin; i < end; ++i) {
      auto step = meta_step(meta, theta, batches[i], hidden, &memory, cfg.features);
      contexts.push_back({std::move(theta), std::move(step.grad), step.output.mean_loss});
      theta = std::move(step.next);
      hidden = std::move(step.output.final_state);
      if (stats) {
        ++stats->recomputed_steps;
        stats->peak_live_states = std::max(stats->peak_live_states, state.checkpoints.size() + contexts.size());
      }
    }
    const std::uint64_t expected = s + 1 < n_segments ? state.checkpoints[s + 1].hash : state.final_hash;
    if (hash_state(theta, hidden) != expected) throw NumericalError("checkpoint corruption");

    reverse_segment(meta, memory, cfg, contexts, adj, meta_grad);
  }
  return meta_grad;
}

double clip_global_norm(std::span<double> v, double max_norm) {
  const double n = norm(v);
  if (n > max_norm) {
    const double scale = max_norm / n;
    for (double& x : v) x *= scale;
  }
  return n;
}

TrainResult train_meta(const meta::MetaParams& meta, const lm::Parameters& theta0_source,
                       const ewc::StaticMemory& memory, std::span<const corpus::Batch> batches,
                       const UnrollConfig& cfg, const std::function<void(const TrainLogRow&)>& on_step) {
  cfg.validate();
  TrainResult result{meta, {}};
  if (cfg.meta_steps == 0) return result;

  const std::size_t T = cfg.unroll_len;
  const std::size_t n_windows = batches.size() / T;
  if (n_windows == 0) {
    throw ConfigError("need at least " + std::to_string(T) + " batches for one unroll window, got " +
                      std::to_string(batches.size()));
  }

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n_windows);
  std::iota(order.begin(), order.end(), std::size_t{0});

  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  std::vector<double> m(meta.size(), 0.0), v(meta.size(), 0.0);
  double beta1_t = 1.0, beta2_t = 1.0;
  double initial_mean = 0.0;

  const std::size_t H = theta0_source.layout().config().hidden_dim;
  lm::Parameters carried = theta0_source;
  lm::HiddenState carried_hidden = lm::HiddenState::zeros(H);

  for (std::size_t step = 0; step < cfg.meta_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    if (step % n_windows == 0 && !cfg.carry_theta) rng.shuffle(order);
    const std::size_t w = cfg.carry_theta ? step % n_windows : order[step % n_windows];
    const auto window = batches.subspan(w * T, T);

    const lm::Parameters& start = cfg.carry_theta ? carried : theta0_source;
    const lm::HiddenState start_hidden = cfg.carry_theta ? carried_hidden : lm::HiddenState::zeros(H);
    auto fwd = unroll_forward(result.meta, start, memory, window, start_hidden, cfg);
    auto grad = unroll_backward(result.meta, memory, window, cfg, fwd.state);

    const double grad_norm = clip_global_norm(grad, cfg.grad_clip);
    if (!std::isfinite(grad_norm)) throw NumericalError("non-finite meta-gradient at meta step " + std::to_string(step));

    beta1_t *= kBeta1;
    beta2_t *= kBeta2;
    auto params = result.meta.data();
    for (std::size_t q = 0; q < params.size(); ++q) {
      m[q] = kBeta1 * m[q] + (1.0 - kBeta1) * grad[q];
      v[q] = kBeta2 * v[q] + (1.0 - kBeta2) * grad[q] * grad[q];
      const double m_hat = m[q] / (1.0 - beta1_t);
      const double v_hat = v[q] / (1.0 - beta2_t);
      params[q] -= cfg.meta_lr * m_hat / (std::sqrt(v_hat) + kEps);
    }

    if (cfg.carry_theta) {
      carried = std::move(fwd.state.theta);
      carried_hidden = std::move(fwd.state.hidden);
      if (w + 1 == n_windows) {
        carried = theta0_source;
        carried_hidden = lm::HiddenState::zeros(H);
      }
    }

    TrainLogRow row;
    row.meta_step = step;
    row.meta_loss = fwd.report.meta_loss;
    row.mean_step_loss = fwd.report.meta_loss / static_cast<double>(T);
    row.meta_grad_norm = grad_norm;
    row.theta_drift = fwd.report.theta_drift;
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(row);
    if (on_step) on_step(row);

    if (step == 0) initial_mean = row.mean_step_loss;
    if (row.mean_step_loss > 10.0 * initial_mean) {
      throw NumericalError("meta-training diverged at meta step " + std::to_string(step) + ": mean loss " +
                           std::to_string(row.mean_step_loss) + " vs initial " + std::to_string(initial_mean));
    }
  }
  return result;
}

}  // namespace dynalm::metatrain
