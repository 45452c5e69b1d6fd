#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dynalm/corpus.hpp"

namespace dynalm::lm {

struct LmConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 0;
  std::size_t hidden_dim = 0;
  // Reuses the embedding matrix as the output projection; requires E == H.
  bool tie_embeddings = false;

  void validate() const;
  bool operator==(const LmConfig&) const = default;
};

struct Segment {
  std::string name;
  std::size_t offset = 0;
  std::vector<std::size_t> shape;

  std::size_t size() const;
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() > 1 ? shape[1] : 1; }
};

// Named segments over the flat parameter array, in checkpoint order:
//   embed    V x E
//   lstm_Wx  4H x E   gate blocks packed as (input, forget, cell, output)
//   lstm_Wh  4H x H   same packing
//   lstm_b   4H
//   out_W    V x H    absent when embeddings are tied
//   out_b    V
class Layout {
 public:
  static std::shared_ptr<const Layout> for_config(const LmConfig& config);

  const LmConfig& config() const { return config_; }
  const std::vector<Segment>& segments() const { return segments_; }
  std::size_t total_size() const { return total_; }
  const Segment& find(std::string_view name) const;
  bool contains(std::string_view name) const;
  // Segment owning flat coordinate j.
  const Segment& segment_at(std::size_t coord) const;

 private:
  LmConfig config_;
  std::vector<Segment> segments_;
  std::size_t total_ = 0;
};

// Row-major matrix view aliasing a segment of the flat array.
template <typename T>
struct MatrixView {
  std::span<T> values;
  std::size_t rows = 0;
  std::size_t cols = 0;

  T& operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<T> row(std::size_t r) const { return values.subspan(r * cols, cols); }
};

// Flat coordinate-aligned vector over an LM layout. Shared by parameters and
// gradients so that every per-coordinate quantity indexes the same way.
class FlatVector {
 public:
  FlatVector() = default;
  explicit FlatVector(std::shared_ptr<const Layout> layout)
      : layout_(std::move(layout)), data_(layout_->total_size(), 0.0) {}
  FlatVector(std::shared_ptr<const Layout> layout, std::vector<double> data);

  const Layout& layout() const { return *layout_; }
  const std::shared_ptr<const Layout>& layout_ptr() const { return layout_; }
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }
  double& operator[](std::size_t j) { return data_[j]; }
  double operator[](std::size_t j) const { return data_[j]; }

  MatrixView<double> segment_view(std::string_view name);
  MatrixView<const double> segment_view(std::string_view name) const;

  // Throws NumericalError naming the first segment holding a NaN or infinity.
  void require_finite(std::string_view what) const;

 protected:
  std::shared_ptr<const Layout> layout_;
  std::vector<double> data_;
};

class Parameters : public FlatVector {
 public:
  using FlatVector::FlatVector;
};

class GradientVector : public FlatVector {
 public:
  using FlatVector::FlatVector;
};

struct HiddenState {
  std::vector<double> h;
  std::vector<double> c;

  static HiddenState zeros(std::size_t hidden_dim) {
    return {std::vector<double>(hidden_dim, 0.0), std::vector<double>(hidden_dim, 0.0)};
  }
  bool operator==(const HiddenState&) const = default;
};

struct ForwardResult {
  std::vector<double> logits;  // M x V, row-major
  HiddenState final_state;
};

struct StepOutput {
  std::vector<double> token_losses;  // nats
  double mean_loss = 0.0;
  HiddenState final_state;
};

// Uniform(-1/sqrt(H), 1/sqrt(H)) weights, zero biases, forget-gate bias 1.
Parameters init_params(const LmConfig& config, std::uint64_t seed);

ForwardResult forward(const Parameters& params, std::span<const corpus::TokenId> inputs,
                      const HiddenState& state);

// Per-token -log softmax(logits[t])[targets[t]] with max-subtraction.
StepOutput loss(std::span<const double> logits, std::size_t vocab_size,
                std::span<const corpus::TokenId> targets);

// Forward plus loss without the backward pass.
StepOutput evaluate(const Parameters& params, const corpus::Batch& batch, const HiddenState& state);

// Gradient of the batch mean loss by backpropagation through the M steps of
// the batch. The incoming state is treated as a constant.
std::pair<StepOutput, GradientVector> loss_and_grad(const Parameters& params,
                                                    const corpus::Batch& batch,
                                                    const HiddenState& state);

}  // namespace dynalm::lm
