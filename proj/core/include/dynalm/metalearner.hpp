#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dynalm/ewc.hpp"
#include "dynalm/lm.hpp"

namespace dynalm::meta {

// Which per-coordinate inputs the gate network sees.
//   0,1  preprocess(theta_prev[j])
//   2,3  preprocess(grad[j])
//   4,5  preprocess(theta_prev[j] - theta0[j])   (constant (-1, 0) without memory)
//   6,7  preprocess(loss)                          broadcast
//   8,9  preprocess(fisher[j])                     only with use_fisher
struct FeatureOptions {
  // Without memory the FLUSH term z * theta0 is dropped from the update.
  bool use_memory = true;
  bool use_fisher = false;
  double preprocess_p = 10.0;

  std::size_t dim() const { return use_fisher ? 10 : 8; }
};

// Coordinate-shared gate network: one copy of the weights regardless of P.
// Stored flat as [W1 (h x D) | b1 (h) | W2 (3 x h) | b2 (3) | s_i (1)] so the
// optimizer and the checkpoint see a single array.
class MetaParams {
 public:
  static constexpr std::array<const char*, 5> kSegmentNames = {"meta_W1", "meta_b1", "meta_W2",
                                                               "meta_b2", "meta_si"};

  MetaParams() = default;
  MetaParams(std::size_t feature_dim, std::size_t hidden);

  std::size_t feature_dim() const { return feature_dim_; }
  std::size_t hidden() const { return hidden_; }
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  std::span<double> w1() { return segment(0); }
  std::span<double> b1() { return segment(1); }
  std::span<double> w2() { return segment(2); }
  std::span<double> b2() { return segment(3); }
  double& s_i() { return data_.back(); }
  std::span<const double> w1() const { return segment(0); }
  std::span<const double> b1() const { return segment(1); }
  std::span<const double> w2() const { return segment(2); }
  std::span<const double> b2() const { return segment(3); }
  double s_i() const { return data_.back(); }

  // Offset and shape of segment k (in kSegmentNames order).
  std::size_t segment_offset(std::size_t k) const;
  std::vector<std::size_t> segment_shape(std::size_t k) const;

  bool operator==(const MetaParams&) const = default;

 private:
  std::span<double> segment(std::size_t k);
  std::span<const double> segment(std::size_t k) const;

  std::size_t feature_dim_ = 0;
  std::size_t hidden_ = 0;
  std::vector<double> data_;
};

struct GateTriple {
  std::vector<double> f;  // COPY, in (0, 1)
  std::vector<double> i;  // UPDATE, unconstrained sign
  std::vector<double> z;  // FLUSH, in (0, 1)
};

struct FixedGates {
  double f = 1.0;
  double i = 0.0;
  double z = 0.0;
};

// Row-major P x D feature matrix.
struct CoordFeatures {
  std::size_t dim = 0;
  std::vector<double> values;

  std::size_t count() const { return dim == 0 ? 0 : values.size() / dim; }
  std::span<const double> row(std::size_t j) const { return std::span(values).subspan(j * dim, dim); }
};

// Everything the gate network consumes at one step.
struct StepInputs {
  const lm::Parameters& theta_prev;
  const lm::GradientVector& grad;
  double loss;
  const ewc::StaticMemory* memory;  // may be null when use_memory is off
};

struct InitOptions {
  double copy_bias = 4.0;    // f = sigmoid(copy_bias) at zero pre-activation
  double flush_bias = -4.0;  // z = sigmoid(flush_bias)
  double update_scale = 0.01;
};

// Log-magnitude / sign preprocessing:
//   |x| >= e^-p : (log|x| / p, sign(x))
//   otherwise   : (-1, e^p * x)
std::array<double, 2> preprocess(double x, double p = 10.0);

// Small random weights (uniform +-0.01/sqrt(h)) and biases chosen so the
// initial network is a near-COPY.
MetaParams init_meta(std::size_t feature_dim, std::size_t hidden, std::uint64_t seed,
                     const InitOptions& init = {});

CoordFeatures build_features(const StepInputs& in, const FeatureOptions& opts);

GateTriple gates(const MetaParams& meta, const CoordFeatures& features);

// theta_t = f * theta_prev + i * grad + z * theta0; the last term is skipped
// when memory is null.
lm::Parameters apply_update(const lm::Parameters& theta_prev, const lm::GradientVector& grad,
                            const ewc::StaticMemory* memory, const GateTriple& g);

// Constant gates broadcast over every coordinate. (1, -alpha, 0) is dynamic
// evaluation; (1 - d, 0, d) decays towards theta0.
lm::Parameters fixed_gate_update(const lm::Parameters& theta_prev, const lm::GradientVector& grad,
                                 const ewc::StaticMemory* memory, const FixedGates& gates);

// Values saved by the forward step and needed by meta_backward.
struct StepContext {
  lm::Parameters theta_prev;
  lm::GradientVector grad;
  double loss = 0.0;
};

struct BackwardOptions {
  // Propagate through the features computed from theta_prev. When false only
  // the direct f * upstream path reaches theta_prev.
  bool feature_path = true;
};

struct MetaGradients {
  std::vector<double> meta;        // aligned with MetaParams::data()
  std::vector<double> theta_prev;  // aligned with the LM parameters
};

// Reverse mode through the gate network and the update rule. grad and loss
// are constants (first-order meta-gradient).
MetaGradients meta_backward(const MetaParams& meta, const StepContext& ctx,
                            const ewc::StaticMemory* memory, std::span<const double> upstream,
                            const FeatureOptions& opts, const BackwardOptions& bwd = {});

}  // namespace dynalm::meta
