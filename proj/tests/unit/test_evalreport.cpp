#include <cmath>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "dynalm/errors.hpp"
#include "dynalm/evalreport.hpp"
#include "dynalm/io.hpp"
#include "test_support.hpp"

using namespace dynalm;
using namespace dynalm::evalreport;

namespace {

struct Setup {
  lm::LmConfig cfg{7, 4, 6, false};
  lm::Parameters theta;
  ewc::StaticMemory memory;
  std::vector<corpus::Batch> batches;
};

Setup make_setup(std::size_t n_batches, std::size_t m, std::uint64_t seed) {
  Setup s;
  s.theta = lm::init_params(s.cfg, seed);
  s.memory = ewc::consolidate(s.theta, std::vector<double>(s.theta.size(), 0.5));
  s.batches = corpus::make_batches(oracle::random_tokens(n_batches * m + 1, 7, seed + 1), m);
  return s;
}

EvalTrace trace_of(std::vector<double> losses, std::size_t m = 4, std::size_t first = 0) {
  EvalTrace t;
  t.tokens_per_batch = m;
  for (std::size_t k = 0; k < losses.size(); ++k) t.batch_index.push_back(first + k);
  t.batch_loss = std::move(losses);
  return t;
}

meta::MetaParams copy_meta() {
  meta::MetaParams m(8, 2);
  m.b2()[0] = 800.0;
  m.b2()[2] = -800.0;
  m.s_i() = 0.0;
  return m;
}

}  // namespace

TEST(OnlineEval, StaticDeterministic) {
  const auto s = make_setup(20, 5, 1);
  const auto v = ModelVariant::static_lm("static");
  const auto a = online_eval(v, s.theta, s.batches, true);
  const auto b = online_eval(v, s.theta, s.batches, true);
  EXPECT_EQ(a.batch_loss, b.batch_loss);
  EXPECT_EQ(a.token_losses, b.token_losses);
  EXPECT_EQ(a.size(), 20u);
}

TEST(OnlineEval, PureCopyMetaEqualsStatic) {
  const auto s = make_setup(20, 5, 2);
  const auto m = copy_meta();
  const auto st = online_eval(ModelVariant::static_lm("static"), s.theta, s.batches, true);
  const auto mt = online_eval(ModelVariant::meta_only("meta", m), s.theta, s.batches, true);
  auto m3 = copy_meta();
  const auto mm = online_eval(ModelVariant::meta_with_memory("mem", m3, s.memory), s.theta, s.batches, true);
  EXPECT_EQ(st.batch_loss, mt.batch_loss);
  EXPECT_EQ(st.batch_loss, mm.batch_loss);
  EXPECT_EQ(st.token_losses, mt.token_losses);
}

TEST(OnlineEval, DynamicFixedMatchesHandRolledSgd) {
  const auto s = make_setup(60, 5, 3);
  for (double alpha : {0.01, 0.1, 1.0}) {
    const auto trace = online_eval(ModelVariant::dynamic_fixed("dyn", {1.0, -alpha, 0.0}), s.theta, s.batches, false);
    lm::Parameters theta = s.theta;
    lm::HiddenState h = lm::HiddenState::zeros(6);
    for (std::size_t k = 0; k < s.batches.size(); ++k) {
      auto [out, grad] = lm::loss_and_grad(theta, s.batches[k], h);
      EXPECT_NEAR(trace.batch_loss[k], out.mean_loss, 1e-12);
      for (std::size_t j = 0; j < theta.size(); ++j) theta[j] -= alpha * grad[j];
      h = out.final_state;
    }
  }
}

TEST(OnlineEval, LossRecordedBeforeUpdate) {
  const auto s = make_setup(15, 5, 4);
  // Two rules that agree until batch 7 is scored and then diverge wildly.
  auto make_rule = [&](double late_scale) -> UpdateRule {
    return [&, late_scale](std::size_t k, const lm::Parameters& theta, const corpus::Batch& b,
                           const lm::HiddenState& h, const lm::StepOutput&) {
      auto [out, grad] = lm::loss_and_grad(theta, b, h);
      return meta::fixed_gate_update(theta, grad, nullptr, {1.0, k >= 7 ? late_scale : -0.1, 0.0});
    };
  };
  const auto a = online_eval_with_rule(s.theta, s.batches, make_rule(-0.1), false);
  const auto b = online_eval_with_rule(s.theta, s.batches, make_rule(5.0), false);
  for (std::size_t k = 0; k <= 7; ++k) EXPECT_EQ(a.batch_loss[k], b.batch_loss[k]) << k;
  EXPECT_NE(a.batch_loss[8], b.batch_loss[8]);
}

TEST(OnlineEval, RequiresContiguousBatchesAndMemory) {
  const auto s = make_setup(5, 5, 5);
  std::vector<corpus::Batch> gap{s.batches[0], s.batches[2]};
  EXPECT_THROW(online_eval(ModelVariant::static_lm("s"), s.theta, gap, false), ConfigError);
  auto bad = ModelVariant::static_lm("m");
  bad.kind = VariantKind::kMetaWithMemory;
  EXPECT_THROW(online_eval(bad, s.theta, s.batches, false), ConfigError);
}

TEST(OnlineEval, RandomInitStaticPerplexityNearV) {
  const auto s = make_setup(200, 10, 6);
  const double ppl = perplexity(online_eval(ModelVariant::static_lm("s"), s.theta, s.batches, false));
  EXPECT_NEAR(ppl, 7.0, 0.05 * 7.0);
}

TEST(Perplexity, Examples) {
  EXPECT_NEAR(perplexity(trace_of({std::log(2.0), std::log(2.0), std::log(2.0)})), 2.0, 1e-15);
  EXPECT_NEAR(perplexity(trace_of({std::log(13.0)})), 13.0, 1e-12);
  EXPECT_THROW(perplexity(EvalTrace{}), ConfigError);
}

TEST(Gain, Examples) {
  const auto a = trace_of({0.3, 1.2, 0.7});
  for (double g : perplexity_gain(a, a, 1).raw) EXPECT_EQ(g, 0.0);
  const auto g = perplexity_gain(trace_of({std::log(3.0), std::log(3.0)}), trace_of({std::log(2.0), std::log(2.0)}), 1);
  for (double v : g.raw) EXPECT_NEAR(v, 1.0, 1e-14);
}

TEST(Gain, OverlapOnly) {
  const auto g = perplexity_gain(trace_of({0.1, 0.2, 0.3}, 4, 0), trace_of({0.5, 0.6, 0.7}, 4, 2), 1);
  EXPECT_EQ(g.batch_index, (std::vector<std::size_t>{0 + 2}));
  EXPECT_NEAR(g.raw[0], std::exp(0.3) - std::exp(0.5), 1e-15);
  EXPECT_THROW(perplexity_gain(trace_of({0.1}, 4, 0), trace_of({0.1}, 4, 5), 1), ConfigError);
}

TEST(Gain, Antisymmetric) {
  Rng rng(7);
  std::vector<double> la(50), lb(50);
  for (auto& x : la) x = rng.uniform(0, 4);
  for (auto& x : lb) x = rng.uniform(0, 4);
  const auto ab = perplexity_gain(trace_of(la), trace_of(lb), 5);
  const auto ba = perplexity_gain(trace_of(lb), trace_of(la), 5);
  for (std::size_t k = 0; k < 50; ++k) EXPECT_EQ(ab.raw[k], -ba.raw[k]);
}

TEST(MovingAverage, HandComputed) {
  const std::vector<double> x{0, 3, 0, 3, 0, 3};
  // Window 3 centered: interior points alternate (3+0+3)/3 and (0+3+0)/3;
  // the edges average the two available values.
  EXPECT_EQ(moving_average(x, 3), (std::vector<double>{1.5, 1.0, 2.0, 1.0, 2.0, 1.5}));
  EXPECT_EQ(moving_average(x, 1), x);
  // Even windows lean one step forward.
  EXPECT_EQ(moving_average(std::vector<double>{2, 4, 6}, 2), (std::vector<double>{3, 5, 6}));
  // A constant series is a fixed point for any window.
  for (double v : moving_average(std::vector<double>(9, 1.25), 4)) EXPECT_EQ(v, 1.25);
  EXPECT_THROW(moving_average(x, 0), ConfigError);
}

TEST(TokenDiff, IdenticalVariantsAreZero) {
  const auto s = make_setup(4, 5, 8);
  const auto vocab = corpus::Vocabulary(corpus::VocabMode::kCharacter, {"a", "b", "c", "d", "e", "f", "g"});
  const auto t = online_eval(ModelVariant::static_lm("s"), s.theta, s.batches, true);
  const auto d = token_loss_diff(t, t, s.batches, vocab, 2);
  for (double v : d.diff) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(d.tokens.size(), 5u);
  EXPECT_EQ(d.tokens[0], vocab.token(s.batches[2].targets[0]));
  EXPECT_THROW(token_loss_diff(t, t, s.batches, vocab, 9), ConfigError);
}

TEST(TokenDiff, HandBuiltCrossEntropies) {
  // Zero networks except the output bias: logits are the bias row.
  const lm::LmConfig cfg{2, 1, 1, false};
  lm::Parameters pa(lm::Layout::for_config(cfg)), pb(lm::Layout::for_config(cfg));
  pa.segment_view("out_b").values[0] = std::log(3.0);  // p(a) = 3/4
  corpus::Batch b{0, {0, 1}, {0, 1}};
  std::vector<corpus::Batch> batches{b};
  const auto ta = online_eval(ModelVariant::static_lm("a"), pa, batches, true);
  const auto tb = online_eval(ModelVariant::static_lm("b"), pb, batches, true);
  const auto vocab = corpus::Vocabulary(corpus::VocabMode::kCharacter, {"x", "y"});
  const auto d = token_loss_diff(ta, tb, batches, vocab, 0);
  EXPECT_NEAR(d.diff[0], -std::log(0.75) - std::log(2.0), 1e-15);
  EXPECT_NEAR(d.diff[1], -std::log(0.25) - std::log(2.0), 1e-15);
  EXPECT_EQ(d.tokens, (std::vector<std::string>{"x", "y"}));
}

TEST(TokenDiff, SumMatchesBatchLossDifference) {
  const auto s = make_setup(10, 6, 9);
  const auto vocab = corpus::Vocabulary(corpus::VocabMode::kCharacter, {"a", "b", "c", "d", "e", "f", "g"});
  const auto ta = online_eval(ModelVariant::static_lm("s"), s.theta, s.batches, true);
  const auto tb = online_eval(ModelVariant::dynamic_fixed("d", {1.0, -0.5, 0.0}), s.theta, s.batches, true);
  for (std::size_t i = 0; i < 10; ++i) {
    const auto d = token_loss_diff(ta, tb, s.batches, vocab, i);
    double sum = 0.0;
    for (double v : d.diff) sum += v;
    EXPECT_NEAR(sum, 6.0 * (ta.batch_loss[i] - tb.batch_loss[i]), 1e-12);
  }
}

TEST(ArticleIds, CountsBoundaries) {
  const std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5};
  const std::vector<std::size_t> bounds{3, 0};
  EXPECT_EQ(article_ids(idx, bounds), (std::vector<std::size_t>{1, 1, 1, 2, 2, 2}));
}

TEST(WriteReport, FilesManifestAndRoundTrip) {
  oracle::TempDir dir("report");
  const auto s = make_setup(30, 5, 10);
  const auto vocab = corpus::Vocabulary(corpus::VocabMode::kCharacter, {"a", ",", "\"", "d", "e", "f", "g"});
  const auto ta = online_eval(ModelVariant::static_lm("static"), s.theta, s.batches, true);
  const auto tb = online_eval(ModelVariant::dynamic_fixed("dyn", {1.0, -0.3, 0.0}), s.theta, s.batches, true);
  Report r;
  r.traces = {{"static", ta}, {"dyn", tb}};
  r.gains.push_back({"static", "dyn", perplexity_gain(ta, tb, 5)});
  r.diffs.push_back(token_loss_diff(ta, tb, s.batches, vocab, 3));
  r.boundaries = std::vector<std::size_t>{0, 10, 20};
  r.run_config = {{"seed", "1"}};
  const auto files = write_report(r, dir.path());
  EXPECT_EQ(files, (std::vector<std::string>{"trace_static.csv", "trace_dyn.csv", "gain_static_vs_dyn.csv",
                                             "tokens_3.csv", "report.json"}));
  for (const auto& f : files) EXPECT_TRUE(std::filesystem::exists(dir / f));

  const auto back = read_trace_csv(dir / "trace_dyn.csv", 5);
  EXPECT_EQ(back.batch_loss, tb.batch_loss);
  EXPECT_NEAR(perplexity(back), perplexity(tb), 1e-9);

  const std::string gain_csv = io::read_file(dir / "gain_static_vs_dyn.csv");
  EXPECT_EQ(gain_csv.substr(0, gain_csv.find('\n')), "batch,gain,smoothed,article");
  const std::string tokens_csv = io::read_file(dir / "tokens_3.csv");
  EXPECT_EQ(tokens_csv.substr(0, tokens_csv.find('\n')), "pos,token,loss_a,loss_b,diff");

  // Same inputs, second directory: byte-identical files.
  oracle::TempDir again("report2");
  write_report(r, again.path());
  for (const auto& f : files) EXPECT_EQ(io::read_file(dir / f), io::read_file(again / f)) << f;
}

TEST(WriteReport, EmptyGainsNoted) {
  oracle::TempDir dir("report_empty");
  Report r;
  r.traces = {{"static", trace_of({0.5, 0.6})}};
  const auto files = write_report(r, dir.path());
  EXPECT_EQ(files, (std::vector<std::string>{"trace_static.csv", "report.json"}));
  EXPECT_NE(io::read_file(dir / "report.json").find("no gain series"), std::string::npos);
}

TEST(WriteReport, UnwritableDirectory) {
  Report r;
  r.traces = {{"static", trace_of({0.5})}};
  oracle::TempDir dir("report_blocked");
  io::write_file_atomic(dir / "plain_file", "x");
  EXPECT_THROW(write_report(r, dir / "plain_file" / "sub"), IoError);
}

TEST(ReadBoundaries, ParsesAndSorts) {
  oracle::TempDir dir("bounds");
  io::write_file_atomic(dir / "b.txt", "# articles\n20\n\n0\n  10\n");
  EXPECT_EQ(read_boundaries(dir / "b.txt"), (std::vector<std::size_t>{0, 10, 20}));
  io::write_file_atomic(dir / "bad.txt", "x1\n");
  EXPECT_THROW(read_boundaries(dir / "bad.txt"), ConfigError);
}
