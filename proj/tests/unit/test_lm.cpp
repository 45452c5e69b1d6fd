#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "dynalm/errors.hpp"
#include "dynalm/lm.hpp"
#include "test_support.hpp"

using namespace dynalm;
using namespace dynalm::lm;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(LmConfig, Validation) {
  EXPECT_THROW((LmConfig{1, 2, 2, false}.validate()), ConfigError);
  EXPECT_THROW((LmConfig{4, 0, 2, false}.validate()), ConfigError);
  EXPECT_THROW((LmConfig{4, 2, 0, false}.validate()), ConfigError);
  EXPECT_THROW((LmConfig{4, 3, 5, true}.validate()), ConfigError);
  EXPECT_NO_THROW((LmConfig{4, 5, 5, true}.validate()));
}

TEST(Layout, HandCountedSize) {
  const auto layout = Layout::for_config({4, 3, 5, false});
  EXPECT_EQ(layout->total_size(), 4u * 3 + 4 * (5 * 3 + 5 * 5 + 5) + 4 * 5 + 4);
  EXPECT_EQ(layout->total_size(), 216u);
}

TEST(Layout, SegmentsTileTheArray) {
  for (bool tie : {false, true}) {
    const auto layout = Layout::for_config({7, 6, 6, tie});
    std::size_t offset = 0;
    for (const auto& seg : layout->segments()) {
      EXPECT_EQ(seg.offset, offset);
      offset += seg.size();
    }
    EXPECT_EQ(offset, layout->total_size());
    EXPECT_EQ(layout->contains("out_W"), !tie);
  }
}

TEST(Layout, SegmentOrderAndNames) {
  const auto layout = Layout::for_config({4, 3, 5, false});
  std::vector<std::string> names;
  for (const auto& s : layout->segments()) names.push_back(s.name);
  EXPECT_EQ(names, (std::vector<std::string>{"embed", "lstm_Wx", "lstm_Wh", "lstm_b", "out_W", "out_b"}));
  EXPECT_EQ(layout->find("lstm_Wx").shape, (std::vector<std::size_t>{20, 3}));
  EXPECT_EQ(layout->segment_at(0).name, "embed");
  EXPECT_EQ(layout->segment_at(215).name, "out_b");
  EXPECT_THROW(layout->find("bogus"), ConfigError);
}

TEST(InitParams, DeterministicAndForgetBias) {
  const LmConfig cfg{6, 4, 5, false};
  const auto a = init_params(cfg, 9);
  const auto b = init_params(cfg, 9);
  EXPECT_EQ(a.values(), b.values());
  EXPECT_NE(a.values(), init_params(cfg, 10).values());
  const auto bias = a.segment_view("lstm_b");
  for (std::size_t k = 0; k < 5; ++k) {
    EXPECT_EQ(bias.values[k], 0.0);
    EXPECT_EQ(bias.values[5 + k], 1.0);
    EXPECT_EQ(bias.values[10 + k], 0.0);
    EXPECT_EQ(bias.values[15 + k], 0.0);
  }
  for (double v : a.segment_view("out_b").values) EXPECT_EQ(v, 0.0);
  const double s = 1.0 / std::sqrt(5.0);
  for (const char* name : {"embed", "lstm_Wx", "lstm_Wh", "out_W"})
    for (double v : a.segment_view(name).values) EXPECT_LT(std::abs(v), s);
}

TEST(SegmentView, WritesAliasFlatArray) {
  Parameters p(Layout::for_config({4, 3, 5, false}));
  auto view = p.segment_view("lstm_Wh");
  view(2, 3) = 1.0;
  EXPECT_EQ(p[p.layout().find("lstm_Wh").offset + 2 * 5 + 3], 1.0);
  std::vector<double> concat;
  for (const auto& seg : p.layout().segments()) {
    const auto v = std::as_const(p).segment_view(seg.name);
    concat.insert(concat.end(), v.values.begin(), v.values.end());
  }
  EXPECT_EQ(concat, p.values());
  EXPECT_THROW(p.segment_view("nope"), ConfigError);
}

TEST(Forward, ZeroParametersGiveZeroLogits) {
  const LmConfig cfg{5, 3, 4, false};
  Parameters p(Layout::for_config(cfg));
  const std::vector<corpus::TokenId> in{0, 3, 2};
  const auto r = forward(p, in, HiddenState::zeros(4));
  for (double v : r.logits) EXPECT_EQ(v, 0.0);
}

TEST(Forward, RejectsOutOfRangeId) {
  const LmConfig cfg{5, 3, 4, false};
  const auto p = init_params(cfg, 1);
  const std::vector<corpus::TokenId> in{0, 5};
  EXPECT_THROW(forward(p, in, HiddenState::zeros(4)), ConfigError);
  EXPECT_THROW(forward(p, in, HiddenState::zeros(3)), ConfigError);
}

TEST(Forward, HandComputedScalarStep) {
  const LmConfig cfg{2, 1, 1, false};
  Parameters p(Layout::for_config(cfg));
  p.segment_view("embed")(1, 0) = 0.7;
  const double wx[4] = {0.5, -0.3, 0.8, 0.2};
  const double wh[4] = {0.1, 0.4, -0.6, 0.9};
  const double b[4] = {0.05, 1.0, -0.1, 0.3};
  for (int k = 0; k < 4; ++k) {
    p.segment_view("lstm_Wx")(k, 0) = wx[k];
    p.segment_view("lstm_Wh")(k, 0) = wh[k];
    p.segment_view("lstm_b").values[k] = b[k];
  }
  p.segment_view("out_W")(0, 0) = 1.5;
  p.segment_view("out_W")(1, 0) = -2.0;
  p.segment_view("out_b").values[0] = 0.25;
  p.segment_view("out_b").values[1] = -0.5;

  const HiddenState s0{{0.3}, {-0.2}};
  const std::vector<corpus::TokenId> in{1};
  const auto r = forward(p, in, s0);

  const double x = 0.7;
  const double ig = sigmoid(0.5 * x + 0.1 * 0.3 + 0.05);
  const double fg = sigmoid(-0.3 * x + 0.4 * 0.3 + 1.0);
  const double gg = std::tanh(0.8 * x - 0.6 * 0.3 - 0.1);
  const double og = sigmoid(0.2 * x + 0.9 * 0.3 + 0.3);
  const double c = fg * -0.2 + ig * gg;
  const double h = og * std::tanh(c);
  EXPECT_NEAR(r.final_state.c[0], c, 1e-15);
  EXPECT_NEAR(r.final_state.h[0], h, 1e-15);
  EXPECT_NEAR(r.logits[0], 1.5 * h + 0.25, 1e-15);
  EXPECT_NEAR(r.logits[1], -2.0 * h - 0.5, 1e-15);
}

TEST(Forward, Causality) {
  const LmConfig cfg{6, 4, 5, false};
  const auto p = init_params(cfg, 3);
  const auto s = oracle::random_state(5, 4);
  std::vector<corpus::TokenId> in{1, 2, 3, 4, 5, 0, 1};
  const auto base = forward(p, in, s);
  for (std::size_t k = 0; k < in.size(); ++k) {
    auto changed = in;
    changed[k] = (changed[k] + 1) % 6;
    const auto r = forward(p, changed, s);
    for (std::size_t t = 0; t < k; ++t)
      for (std::size_t v = 0; v < 6; ++v) EXPECT_EQ(r.logits[t * 6 + v], base.logits[t * 6 + v]);
    EXPECT_NE(r.logits[k * 6], base.logits[k * 6]);
  }
}

TEST(Forward, StateThreadingMatchesSingleCall) {
  const LmConfig cfg{6, 4, 5, false};
  const auto p = init_params(cfg, 3);
  const auto seq = oracle::random_tokens(8, 6, 5).ids;
  const auto whole = forward(p, seq, HiddenState::zeros(5));
  const std::span<const corpus::TokenId> all(seq);
  const auto first = forward(p, all.first(4), HiddenState::zeros(5));
  const auto second = forward(p, all.subspan(4), first.final_state);
  std::vector<double> chained = first.logits;
  chained.insert(chained.end(), second.logits.begin(), second.logits.end());
  EXPECT_EQ(chained, whole.logits);
  EXPECT_EQ(second.final_state, whole.final_state);
}

TEST(Loss, UniformLogits) {
  const std::vector<double> logits(3 * 7, 0.4);
  const std::vector<corpus::TokenId> t{0, 3, 6};
  const auto out = loss(logits, 7, t);
  for (double l : out.token_losses) EXPECT_NEAR(l, std::log(7.0), 1e-15);
  EXPECT_NEAR(out.mean_loss, std::log(7.0), 1e-15);
}

TEST(Loss, Saturated) {
  std::vector<double> logits(4, 0.0);
  logits[2] = 1000.0;
  const std::vector<corpus::TokenId> t{2};
  const auto out = loss(logits, 4, t);
  EXPECT_GE(out.token_losses[0], 0.0);
  EXPECT_LT(out.token_losses[0], 1e-9);
}

TEST(Loss, MatchesLongDoubleOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t v = 2 + rng.below(30);
    const std::size_t m = 1 + rng.below(5);
    std::vector<double> logits(m * v);
    for (double& x : logits) x = rng.uniform(-20, 20);
    std::vector<corpus::TokenId> t(m);
    for (auto& id : t) id = static_cast<corpus::TokenId>(rng.below(v));
    const auto out = loss(logits, v, t);
    double sum = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
      const double ref = oracle::reference_token_loss(std::span(logits).subspan(k * v, v), t[k]);
      EXPECT_NEAR(out.token_losses[k], ref, 1e-12 * std::max(1.0, ref));
      EXPECT_GE(out.token_losses[k], 0.0);
      sum += out.token_losses[k];
    }
    EXPECT_NEAR(out.mean_loss, sum / m, 1e-14);
  }
}

TEST(LossAndGrad, FiniteDifferenceSpecInstance) {
  const LmConfig cfg{5, 4, 6, false};
  const auto p = oracle::random_params(cfg, 21, 0.5);
  const auto batch = oracle::random_batch(4, 5, 22);
  const auto s = oracle::random_state(6, 23);
  const auto [out, grad] = loss_and_grad(p, batch, s);
  EXPECT_EQ(out.mean_loss, evaluate(p, batch, s).mean_loss);
  EXPECT_NEAR(out.mean_loss, static_cast<double>(oracle::ref_mean_loss(p.layout(), oracle::widen(p.data()), batch, s)),
              1e-13);
  const auto numeric = oracle::lm_numeric_gradient(p, batch, s, 1e-5L);
  EXPECT_LT(oracle::max_relative_error(grad.values(), numeric, 1e-7), 1e-6);
}

TEST(LossAndGrad, FiniteDifferenceTied) {
  const LmConfig cfg{6, 5, 5, true};
  const auto p = oracle::random_params(cfg, 31, 0.5);
  const auto batch = oracle::random_batch(5, 6, 32);
  const auto s = oracle::random_state(5, 33);
  const auto grad = loss_and_grad(p, batch, s).second;
  const auto numeric = oracle::lm_numeric_gradient(p, batch, s, 1e-5L);
  EXPECT_LT(oracle::max_relative_error(grad.values(), numeric, 1e-7), 1e-6);
}

TEST(LossAndGrad, ZeroNetworkOutputBiasClosedForm) {
  const LmConfig cfg{4, 3, 2, false};
  Parameters p(Layout::for_config(cfg));
  corpus::Batch b;
  b.inputs = {0, 1, 2, 3};
  b.targets = {1, 1, 2, 0};
  const auto [out, grad] = loss_and_grad(p, b, HiddenState::zeros(2));
  EXPECT_NEAR(out.mean_loss, std::log(4.0), 1e-15);
  const auto gb = grad.segment_view("out_b");
  // mean over steps of softmax(0) - onehot(target)
  const double expected[4] = {0.25 - 0.25, 0.25 - 0.5, 0.25 - 0.25, 0.25};
  for (int v = 0; v < 4; ++v) EXPECT_NEAR(gb.values[v], expected[v], 1e-15);
  for (double g : grad.segment_view("out_W").values) EXPECT_EQ(g, 0.0);
}

TEST(LossAndGrad, Pure) {
  const LmConfig cfg{5, 3, 4, false};
  const auto p = init_params(cfg, 1);
  const auto b = oracle::random_batch(6, 5, 2);
  const auto r1 = loss_and_grad(p, b, HiddenState::zeros(4));
  const auto r2 = loss_and_grad(p, b, HiddenState::zeros(4));
  EXPECT_EQ(r1.first.token_losses, r2.first.token_losses);
  EXPECT_EQ(r1.second.values(), r2.second.values());
  EXPECT_EQ(r1.first.final_state, r2.first.final_state);
}

TEST(LossAndGrad, OverflowNamesSegment) {
  const LmConfig cfg{5, 3, 4, false};
  auto p = init_params(cfg, 1);
  p.segment_view("out_b").values[0] = std::numeric_limits<double>::infinity();
  const auto b = oracle::random_batch(3, 5, 2);
  try {
    loss_and_grad(p, b, HiddenState::zeros(4));
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("numerical overflow"), std::string::npos);
  }
}

TEST(Evaluate, RandomInitNearUniform) {
  const LmConfig cfg{20, 8, 16, false};
  const auto p = init_params(cfg, 4);
  const auto batches = corpus::make_batches(oracle::random_tokens(2001, 20, 5), 50);
  HiddenState s = HiddenState::zeros(16);
  double total = 0.0;
  for (const auto& b : batches) {
    const auto out = evaluate(p, b, s);
    total += out.mean_loss;
    s = out.final_state;
  }
  EXPECT_NEAR(total / batches.size(), std::log(20.0), 0.05 * std::log(20.0));
}
