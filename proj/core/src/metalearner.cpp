#include "dynalm/metalearner.hpp"

#include <cmath>

#include "dynalm/errors.hpp"
#include "dynalm/rng.hpp"

namespace dynalm::meta {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// d/dx of both preprocess channels.
std::array<double, 2> preprocess_slope(double x, double p) {
  if (std::abs(x) >= std::exp(-p)) return {1.0 / (p * x), 0.0};
  return {0.0, std::exp(p)};
}

void check_memory(const ewc::StaticMemory* memory, const FeatureOptions& opts, std::size_t n) {
  if ((opts.use_memory || opts.use_fisher) && memory == nullptr) {
    throw ConfigError("gate features need a static memory");
  }
  if (memory && (memory->theta0.size() != n || memory->fisher.size() != n)) {
    throw ConfigError("static memory does not match the parameter count");
  }
}

// Gate network activations at one coordinate.
struct CoordActivations {
  std::vector<double> hidden;
  std::array<double, 3> raw{};
};

void run_coord(const MetaParams& meta, std::span<const double> feat, CoordActivations& act) {
  const std::size_t D = meta.feature_dim(), Hm = meta.hidden();
  const auto w1 = meta.w1();
  const auto b1 = meta.b1();
  const auto w2 = meta.w2();
  const auto b2 = meta.b2();
  act.hidden.resize(Hm);
  for (std::size_t h = 0; h < Hm; ++h) {
    double s = b1[h];
    for (std::size_t d = 0; d < D; ++d) s += w1[h * D + d] * feat[d];
    act.hidden[h] = std::tanh(s);
  }
  for (std::size_t k = 0; k < 3; ++k) {
    double s = b2[k];
    for (std::size_t h = 0; h < Hm; ++h) s += w2[k * Hm + h] * act.hidden[h];
    act.raw[k] = s;
  }
}

template <typename GateAt>
lm::Parameters update_with(const lm::Parameters& theta_prev, const lm::GradientVector& grad,
                           const ewc::StaticMemory* memory, GateAt gate_at) {
  const std::size_t n = theta_prev.size();
  if (grad.size() != n) throw ConfigError("gradient length does not match parameters");
  if (memory && memory->theta0.size() != n) throw ConfigError("theta0 length does not match parameters");
  lm::Parameters next(theta_prev.layout_ptr());
  for (std::size_t j = 0; j < n; ++j) {
    const auto [f, i, z] = gate_at(j);
    double v = f * theta_prev[j] + i * grad[j];
    if (memory) v += z * memory->theta0[j];
    next[j] = v;
  }
  next.require_finite("updated parameter");
  return next;
}

}  // namespace

MetaParams::MetaParams(std::size_t feature_dim, std::size_t hidden)
    : feature_dim_(feature_dim), hidden_(hidden) {
  if (feature_dim < 1 || hidden < 1) throw ConfigError("meta network dimensions must be positive");
  data_.assign(hidden * feature_dim + hidden + 3 * hidden + 3 + 1, 0.0);
}

std::size_t MetaParams::segment_offset(std::size_t k) const {
  const std::size_t sizes[] = {hidden_ * feature_dim_, hidden_, 3 * hidden_, 3, 1};
  std::size_t off = 0;
  for (std::size_t s = 0; s < k; ++s) off += sizes[s];
  return off;
}

std::vector<std::size_t> MetaParams::segment_shape(std::size_t k) const {
  switch (k) {
    case 0: return {hidden_, feature_dim_};
    case 1: return {hidden_};
    case 2: return {3, hidden_};
    case 3: return {3};
    default: return {1};
  }
}

std::span<double> MetaParams::segment(std::size_t k) {
  const auto shape = segment_shape(k);
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return std::span(data_).subspan(segment_offset(k), n);
}

std::span<const double> MetaParams::segment(std::size_t k) const {
  const auto shape = segment_shape(k);
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return std::span<const double>(data_).subspan(segment_offset(k), n);
}

std::array<double, 2> preprocess(double x, double p) {
  if (std::abs(x) >= std::exp(-p)) {
    return {std::log(std::abs(x)) / p, x > 0.0 ? 1.0 : -1.0};
  }
  return {-1.0, std::exp(p) * x};
}

MetaParams init_meta(std::size_t feature_dim, std::size_t hidden, std::uint64_t seed,
                     const InitOptions& init) {
  MetaParams meta(feature_dim, hidden);
  Rng rng(seed);
  const double scale = 0.01 / std::sqrt(static_cast<double>(hidden));
  for (double& w : meta.w1()) w = rng.uniform(-scale, scale);
  for (double& w : meta.w2()) w = rng.uniform(-scale, scale);
  meta.b2()[0] = init.copy_bias;
  meta.b2()[1] = 0.0;
  meta.b2()[2] = init.flush_bias;
  meta.s_i() = init.update_scale;
  return meta;
}

CoordFeatures build_features(const StepInputs& in, const FeatureOptions& opts) {
  const std::size_t n = in.theta_prev.size();
  if (in.grad.size() != n) throw ConfigError("gradient length does not match parameters");
  check_memory(in.memory, opts, n);
  const double p = opts.preprocess_p;
  CoordFeatures out;
  out.dim = opts.dim();
  out.values.resize(n * out.dim);
  const auto loss_feat = preprocess(in.loss, p);
  const auto no_drift = preprocess(0.0, p);
  for (std::size_t j = 0; j < n; ++j) {
    double* row = &out.values[j * out.dim];
    const auto a = preprocess(in.theta_prev[j], p);
    const auto b = preprocess(in.grad[j], p);
    const auto c = opts.use_memory ? preprocess(in.theta_prev[j] - in.memory->theta0[j], p) : no_drift;
    row[0] = a[0];
    row[1] = a[1];
    row[2] = b[0];
    row[3] = b[1];
    row[4] = c[0];
    row[5] = c[1];
    row[6] = loss_feat[0];
    row[7] = loss_feat[1];
    if (opts.use_fisher) {
      const auto f = preprocess(in.memory->fisher[j], p);
      row[8] = f[0];
      row[9] = f[1];
    }
  }
  return out;
}

GateTriple gates(const MetaParams& meta, const CoordFeatures& features) {
  if (features.dim != meta.feature_dim()) {
    throw ConfigError("feature dimension " + std::to_string(features.dim) +
                      " does not match meta network input " + std::to_string(meta.feature_dim()));
  }
  const std::size_t n = features.count();
  GateTriple g{std::vector<double>(n), std::vector<double>(n), std::vector<double>(n)};
  CoordActivations act;
  const double s_i = meta.s_i();
  for (std::size_t j = 0; j < n; ++j) {
    run_coord(meta, features.row(j), act);
    g.f[j] = sigmoid(act.raw[0]);
    g.i[j] = s_i * act.raw[1];
    g.z[j] = sigmoid(act.raw[2]);
  }
  return g;
}

lm::Parameters apply_update(const lm::Parameters& theta_prev, const lm::GradientVector& grad,
                            const ewc::StaticMemory* memory, const GateTriple& g) {
  const std::size_t n = theta_prev.size();
  if (g.f.size() != n || g.i.size() != n || g.z.size() != n) {
    throw ConfigError("gate length does not match parameters");
  }
  return update_with(theta_prev, grad, memory, [&](std::size_t j) {
    return std::array<double, 3>{g.f[j], g.i[j], g.z[j]};
  });
}

lm::Parameters fixed_gate_update(const lm::Parameters& theta_prev, const lm::GradientVector& grad,
                                 const ewc::StaticMemory* memory, const FixedGates& gates) {
  const std::array<double, 3> constant{gates.f, gates.i, gates.z};
  return update_with(theta_prev, grad, memory, [&](std::size_t) { return constant; });
}

MetaGradients meta_backward(const MetaParams& meta, const StepContext& ctx,
                            const ewc::StaticMemory* memory, std::span<const double> upstream,
                            const FeatureOptions& opts, const BackwardOptions& bwd) {
  const std::size_t n = ctx.theta_prev.size();
  if (upstream.size() != n) throw ConfigError("upstream gradient length does not match parameters");
  if (opts.dim() != meta.feature_dim()) throw ConfigError("feature options do not match meta network");

  const StepInputs in{ctx.theta_prev, ctx.grad, ctx.loss, memory};
  const CoordFeatures features = build_features(in, opts);

  const std::size_t D = meta.feature_dim(), Hm = meta.hidden();
  const auto w1 = meta.w1();
  const auto w2 = meta.w2();
  const double s_i = meta.s_i();
  const double p = opts.preprocess_p;

  MetaGradients out;
  out.meta.assign(meta.size(), 0.0);
  out.theta_prev.assign(n, 0.0);
  double* d_w1 = &out.meta[meta.segment_offset(0)];
  double* d_b1 = &out.meta[meta.segment_offset(1)];
  double* d_w2 = &out.meta[meta.segment_offset(2)];
  double* d_b2 = &out.meta[meta.segment_offset(3)];
  double& d_si = out.meta.back();

  CoordActivations act;
  std::vector<double> d_pre(Hm);
  for (std::size_t j = 0; j < n; ++j) {
    const double a = upstream[j];
    if (a == 0.0) continue;
    const auto feat = features.row(j);
    run_coord(meta, feat, act);
    const double f = sigmoid(act.raw[0]);
    const double z = sigmoid(act.raw[2]);

    out.theta_prev[j] = a * f;

    const double d_f = a * ctx.theta_prev[j];
    const double d_i = a * ctx.grad[j];
    const double d_z = memory && opts.use_memory ? a * memory->theta0[j] : 0.0;
    const std::array<double, 3> d_raw{d_f * f * (1.0 - f), d_i * s_i, d_z * z * (1.0 - z)};
    d_si += d_i * act.raw[1];

    for (std::size_t k = 0; k < 3; ++k) {
      d_b2[k] += d_raw[k];
      for (std::size_t h = 0; h < Hm; ++h) d_w2[k * Hm + h] += d_raw[k] * act.hidden[h];
    }
    for (std::size_t h = 0; h < Hm; ++h) {
      double d_hidden = 0.0;
      for (std::size_t k = 0; k < 3; ++k) d_hidden += w2[k * Hm + h] * d_raw[k];
      d_pre[h] = d_hidden * (1.0 - act.hidden[h] * act.hidden[h]);
      d_b1[h] += d_pre[h];
      for (std::size_t d = 0; d < D; ++d) d_w1[h * D + d] += d_pre[h] * feat[d];
    }

    if (!bwd.feature_path) continue;
    // Only the theta_prev and drift channels depend on theta_prev.
    std::array<double, 6> d_feat{};
    for (std::size_t h = 0; h < Hm; ++h) {
      for (std::size_t d = 0; d < 6; ++d) d_feat[d] += w1[h * D + d] * d_pre[h];
    }
    const auto slope_theta = preprocess_slope(ctx.theta_prev[j], p);
    double d_theta = d_feat[0] * slope_theta[0] + d_feat[1] * slope_theta[1];
    if (opts.use_memory) {
      const auto slope_drift = preprocess_slope(ctx.theta_prev[j] - memory->theta0[j], p);
      d_theta += d_feat[4] * slope_drift[0] + d_feat[5] * slope_drift[1];
    }
    out.theta_prev[j] += d_theta;
  }
  return out;
}

}  // namespace dynalm::meta
