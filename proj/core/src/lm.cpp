#include "dynalm/lm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dynalm/errors.hpp"
#include "dynalm/rng.hpp"

namespace dynalm::lm {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct Weights {
  MatrixView<const double> embed, wx, wh, out_w;
  std::span<const double> bias, out_b;
  std::size_t V, E, H;
};

Weights bind(const Parameters& p) {
  const auto& cfg = p.layout().config();
  Weights w{p.segment_view("embed"),
            p.segment_view("lstm_Wx"),
            p.segment_view("lstm_Wh"),
            cfg.tie_embeddings ? p.segment_view("embed") : p.segment_view("out_W"),
            p.segment_view("lstm_b").values,
            p.segment_view("out_b").values,
            cfg.vocab_size,
            cfg.embed_dim,
            cfg.hidden_dim};
  return w;
}

// Activations kept for the backward pass, one row per timestep.
struct Cache {
  std::vector<double> h_prev, c_prev;  // M x H
  std::vector<double> gates;           // M x 4H, post-nonlinearity (i, f, g, o)
  std::vector<double> tanh_c;          // M x H
  std::vector<double> h;               // M x H
};

void check_inputs(std::span<const corpus::TokenId> ids, std::size_t vocab_size) {
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab_size) {
      throw ConfigError("token id " + std::to_string(ids[t]) + " at position " + std::to_string(t) +
                        " outside vocabulary of size " + std::to_string(vocab_size));
    }
  }
}

ForwardResult run_forward(const Parameters& params, std::span<const corpus::TokenId> inputs,
                          const HiddenState& state, Cache* cache) {
  const Weights w = bind(params);
  const std::size_t V = w.V, E = w.E, H = w.H, M = inputs.size();
  check_inputs(inputs, V);
  if (state.h.size() != H || state.c.size() != H) {
    throw ConfigError("hidden state size does not match the model");
  }

  ForwardResult out;
  out.logits.assign(M * V, 0.0);
  std::vector<double> h = state.h, c = state.c, a(4 * H);
  if (cache) {
    cache->h_prev.resize(M * H);
    cache->c_prev.resize(M * H);
    cache->gates.resize(M * 4 * H);
    cache->tanh_c.resize(M * H);
    cache->h.resize(M * H);
  }

  for (std::size_t t = 0; t < M; ++t) {
    if (cache) {
      std::copy(h.begin(), h.end(), cache->h_prev.begin() + static_cast<std::ptrdiff_t>(t * H));
      std::copy(c.begin(), c.end(), cache->c_prev.begin() + static_cast<std::ptrdiff_t>(t * H));
    }
    const auto x = w.embed.row(static_cast<std::size_t>(inputs[t]));
    for (std::size_t r = 0; r < 4 * H; ++r) {
      double s = w.bias[r];
      const auto wx_row = w.wx.row(r);
      for (std::size_t k = 0; k < E; ++k) s += wx_row[k] * x[k];
      const auto wh_row = w.wh.row(r);
      for (std::size_t k = 0; k < H; ++k) s += wh_row[k] * h[k];
      a[r] = s;
    }
    for (std::size_t k = 0; k < H; ++k) {
      const double ig = sigmoid(a[k]);
      const double fg = sigmoid(a[H + k]);
      const double gg = std::tanh(a[2 * H + k]);
      const double og = sigmoid(a[3 * H + k]);
      c[k] = fg * c[k] + ig * gg;
      const double tc = std::tanh(c[k]);
      h[k] = og * tc;
      if (cache) {
        double* g = &cache->gates[t * 4 * H];
        g[k] = ig;
        g[H + k] = fg;
        g[2 * H + k] = gg;
        g[3 * H + k] = og;
        cache->tanh_c[t * H + k] = tc;
      }
    }
    if (cache) std::copy(h.begin(), h.end(), cache->h.begin() + static_cast<std::ptrdiff_t>(t * H));
    double* logits = &out.logits[t * V];
    for (std::size_t v = 0; v < V; ++v) {
      double s = w.out_b[v];
      const auto row = w.out_w.row(v);
      for (std::size_t k = 0; k < H; ++k) s += row[k] * h[k];
      logits[v] = s;
    }
  }
  out.final_state = {std::move(h), std::move(c)};
  return out;
}

}  // namespace

void LmConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("vocab_size must be at least 2");
  if (embed_dim < 1) throw ConfigError("embed_dim must be at least 1");
  if (hidden_dim < 1) throw ConfigError("hidden_dim must be at least 1");
  if (tie_embeddings && embed_dim != hidden_dim) {
    throw ConfigError("tie_embeddings requires embed_dim == hidden_dim");
  }
}

std::size_t Segment::size() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::shared_ptr<const Layout> Layout::for_config(const LmConfig& config) {
  config.validate();
  auto layout = std::make_shared<Layout>();
  layout->config_ = config;
  const std::size_t V = config.vocab_size, E = config.embed_dim, H = config.hidden_dim;
  auto add = [&](std::string name, std::vector<std::size_t> shape) {
    Segment s{std::move(name), layout->total_, std::move(shape)};
    layout->total_ += s.size();
    layout->segments_.push_back(std::move(s));
  };
  add("embed", {V, E});
  add("lstm_Wx", {4 * H, E});
  add("lstm_Wh", {4 * H, H});
  add("lstm_b", {4 * H});
  if (!config.tie_embeddings) add("out_W", {V, H});
  add("out_b", {V});
  return layout;
}

const Segment& Layout::find(std::string_view name) const {
  for (const auto& s : segments_) {
    if (s.name == name) return s;
  }
  throw ConfigError("unknown parameter segment '" + std::string(name) + "'");
}

bool Layout::contains(std::string_view name) const {
  return std::any_of(segments_.begin(), segments_.end(), [&](const Segment& s) { return s.name == name; });
}

const Segment& Layout::segment_at(std::size_t coord) const {
  for (const auto& s : segments_) {
    if (coord < s.offset + s.size()) return s;
  }
  throw ConfigError("coordinate " + std::to_string(coord) + " outside layout");
}

FlatVector::FlatVector(std::shared_ptr<const Layout> layout, std::vector<double> data)
    : layout_(std::move(layout)), data_(std::move(data)) {
  if (data_.size() != layout_->total_size()) {
    throw ConfigError("flat array of length " + std::to_string(data_.size()) +
                      " does not match layout of length " + std::to_string(layout_->total_size()));
  }
}

MatrixView<double> FlatVector::segment_view(std::string_view name) {
  const auto& s = layout_->find(name);
  return {std::span<double>(data_).subspan(s.offset, s.size()), s.rows(), s.cols()};
}

MatrixView<const double> FlatVector::segment_view(std::string_view name) const {
  const auto& s = layout_->find(name);
  return {std::span<const double>(data_).subspan(s.offset, s.size()), s.rows(), s.cols()};
}

void FlatVector::require_finite(std::string_view what) const {
  for (const auto& s : layout_->segments()) {
    for (std::size_t j = s.offset; j < s.offset + s.size(); ++j) {
      if (!std::isfinite(data_[j])) {
        throw NumericalError("numerical overflow in " + std::string(what) + " segment '" + s.name +
                             "' (coordinate " + std::to_string(j) + ")");
      }
    }
  }
}

Parameters init_params(const LmConfig& config, std::uint64_t seed) {
  Parameters params(Layout::for_config(config));
  Rng rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.hidden_dim));
  for (const auto& s : params.layout().segments()) {
    auto view = params.segment_view(s.name);
    if (s.shape.size() == 2) {
      for (double& v : view.values) v = rng.uniform(-scale, scale);
    }
  }
  auto bias = params.segment_view("lstm_b");
  const std::size_t H = config.hidden_dim;
  std::fill(bias.values.begin() + static_cast<std::ptrdiff_t>(H),
            bias.values.begin() + static_cast<std::ptrdiff_t>(2 * H), 1.0);
  return params;
}

ForwardResult forward(const Parameters& params, std::span<const corpus::TokenId> inputs,
                      const HiddenState& state) {
  return run_forward(params, inputs, state, nullptr);
}

StepOutput loss(std::span<const double> logits, std::size_t vocab_size,
                std::span<const corpus::TokenId> targets) {
  const std::size_t M = targets.size();
  if (logits.size() != M * vocab_size) throw ConfigError("logits shape does not match targets");
  check_inputs(targets, vocab_size);
  StepOutput out;
  out.token_losses.resize(M);
  double total = 0.0;
  for (std::size_t t = 0; t < M; ++t) {
    const auto row = logits.subspan(t * vocab_size, vocab_size);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double x : row) z += std::exp(x - mx);
    const double l = std::log(z) + mx - row[static_cast<std::size_t>(targets[t])];
    // Rounding can leave a saturated loss a hair below zero.
    out.token_losses[t] = std::max(l, 0.0);
    total += out.token_losses[t];
  }
  out.mean_loss = M > 0 ? total / static_cast<double>(M) : 0.0;
  return out;
}

StepOutput evaluate(const Parameters& params, const corpus::Batch& batch, const HiddenState& state) {
  auto fwd = run_forward(params, batch.inputs, state, nullptr);
  auto out = loss(fwd.logits, params.layout().config().vocab_size, batch.targets);
  if (!std::isfinite(out.mean_loss)) throw NumericalError("numerical overflow in loss");
  out.final_state = std::move(fwd.final_state);
  return out;
}

std::pair<StepOutput, GradientVector> loss_and_grad(const Parameters& params,
                                                    const corpus::Batch& batch,
                                                    const HiddenState& state) {
  Cache cache;
  auto fwd = run_forward(params, batch.inputs, state, &cache);
  const Weights w = bind(params);
  const std::size_t V = w.V, E = w.E, H = w.H, M = batch.inputs.size();
  if (batch.targets.size() != M) throw ConfigError("batch inputs and targets differ in length");

  StepOutput out = loss(fwd.logits, V, batch.targets);
  if (!std::isfinite(out.mean_loss)) throw NumericalError("numerical overflow in loss");
  out.final_state = std::move(fwd.final_state);

  GradientVector grad(params.layout_ptr());
  auto d_embed = grad.segment_view("embed");
  auto d_wx = grad.segment_view("lstm_Wx");
  auto d_wh = grad.segment_view("lstm_Wh");
  auto d_bias = grad.segment_view("lstm_b").values;
  auto d_out_w = params.layout().config().tie_embeddings ? d_embed : grad.segment_view("out_W");
  auto d_out_b = grad.segment_view("out_b").values;

  const double inv_m = 1.0 / static_cast<double>(M);
  std::vector<double> dlogits(V), dh(H), dc(H, 0.0), dh_next(H, 0.0), da(4 * H);

  for (std::size_t t = M; t-- > 0;) {
    // Softmax gradient of the mean loss.
    const double* logits = &fwd.logits[t * V];
    const double mx = *std::max_element(logits, logits + V);
    double z = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
      dlogits[v] = std::exp(logits[v] - mx);
      z += dlogits[v];
    }
    for (std::size_t v = 0; v < V; ++v) dlogits[v] *= inv_m / z;
    dlogits[static_cast<std::size_t>(batch.targets[t])] -= inv_m;

    const double* h_t = &cache.h[t * H];
    dh = dh_next;
    for (std::size_t v = 0; v < V; ++v) {
      const double g = dlogits[v];
      d_out_b[v] += g;
      const auto w_row = w.out_w.row(v);
      const auto dw_row = d_out_w.row(v);
      for (std::size_t k = 0; k < H; ++k) {
        dw_row[k] += g * h_t[k];
        dh[k] += g * w_row[k];
      }
    }

    const double* gates = &cache.gates[t * 4 * H];
    const double* c_prev = &cache.c_prev[t * H];
    const double* tanh_c = &cache.tanh_c[t * H];
    for (std::size_t k = 0; k < H; ++k) {
      const double ig = gates[k], fg = gates[H + k], gg = gates[2 * H + k], og = gates[3 * H + k];
      const double dct = dc[k] + dh[k] * og * (1.0 - tanh_c[k] * tanh_c[k]);
      da[k] = dct * gg * ig * (1.0 - ig);
      da[H + k] = dct * c_prev[k] * fg * (1.0 - fg);
      da[2 * H + k] = dct * ig * (1.0 - gg * gg);
      da[3 * H + k] = dh[k] * tanh_c[k] * og * (1.0 - og);
      dc[k] = dct * fg;
    }

    const auto token = static_cast<std::size_t>(batch.inputs[t]);
    const auto x = w.embed.row(token);
    const auto dx = d_embed.row(token);
    const double* h_prev = &cache.h_prev[t * H];
    std::fill(dh_next.begin(), dh_next.end(), 0.0);
    for (std::size_t r = 0; r < 4 * H; ++r) {
      const double g = da[r];
      d_bias[r] += g;
      const auto wx_row = w.wx.row(r);
      const auto dwx_row = d_wx.row(r);
      for (std::size_t k = 0; k < E; ++k) {
        dwx_row[k] += g * x[k];
        dx[k] += g * wx_row[k];
      }
      const auto wh_row = w.wh.row(r);
      const auto dwh_row = d_wh.row(r);
      for (std::size_t k = 0; k < H; ++k) {
        dwh_row[k] += g * h_prev[k];
        dh_next[k] += g * wh_row[k];
      }
    }
  }
  // dh_next and dc now hold the gradient w.r.t. the incoming state, which is
  // dropped: gradients stop at batch boundaries.
  grad.require_finite("gradient");
  return {std::move(out), std::move(grad)};
}

}  // namespace dynalm::lm
