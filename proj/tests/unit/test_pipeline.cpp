#include <cmath>

#include <gtest/gtest.h>

#include "dynalm/errors.hpp"
#include "dynalm/io.hpp"
#include "dynalm/pipeline.hpp"
#include "dynalm/synthetic.hpp"
#include "test_support.hpp"

using namespace dynalm;

namespace {

config::RunConfig small_config(const oracle::TempDir& dir, std::vector<std::pair<std::string, std::string>> extra = {}) {
  std::vector<std::pair<std::string, std::string>> o = {
      {"corpus_path", (dir / "corpus.txt").string()},
      {"out_dir", (dir / "out").string()},
      {"batch_tokens", "16"},
      {"embed_dim", "4"},
      {"hidden_dim", "6"},
      {"pretrain_epochs", "1"},
      {"unroll_len", "3"},
      {"meta_steps", "2"},
      {"meta_hidden", "4"},
      {"smooth_window", "3"},
      {"gen_articles", "6"},
      {"gen_article_chars", "400"},
      {"gen_common_words", "6"},
      {"gen_topic_words", "4"},
  };
  for (auto& e : extra) o.push_back(std::move(e));
  return config::resolve({}, o, nullptr);
}

std::string file(const std::filesystem::path& p) { return io::read_file(p); }

void expect_checkpoint_round_trip(const config::RunConfig& cfg) {
  const std::string bytes = file(cfg.checkpoint_path());
  EXPECT_EQ(checkpoint::Checkpoint::parse(bytes).serialize(), bytes);
}

}  // namespace

TEST(Synthetic, RegimeCorpusShape) {
  synthetic::RegimeCorpusOptions o;
  o.articles = 5;
  o.article_chars = 300;
  const auto c = synthetic::generate_regime_corpus(o);
  EXPECT_EQ(c.text.size(), 1500u);
  ASSERT_EQ(c.article_offsets.size(), 5u);
  for (std::size_t a = 0; a < 5; ++a) {
    EXPECT_EQ(c.article_offsets[a], a * 300);
    EXPECT_EQ(c.text[c.article_offsets[a] + 299], '\n');
  }
  EXPECT_EQ(c.text, synthetic::generate_regime_corpus(o).text);
}

TEST(Synthetic, TestBoundaries) {
  // Articles at 0, 100, 200, 300; test split starts at 150 with 200 tokens, M = 10.
  EXPECT_EQ(synthetic::test_boundaries({0, 100, 200, 300}, 150, 200, 10), (std::vector<std::size_t>{5, 15}));
  EXPECT_EQ(synthetic::generate_alternating_corpus(5), "ababa");
  const auto u = synthetic::generate_uniform_corpus(1000, 3, 2);
  EXPECT_EQ(u.find_first_not_of("abc"), std::string::npos);
}

TEST(Pipeline, GenCorpusWritesBoundaries) {
  oracle::TempDir dir("gen");
  const auto cfg = small_config(dir);
  const auto b = pipeline::cmd_gen_corpus(cfg);
  EXPECT_EQ(file(dir / "corpus.txt").size(), 2400u);
  std::string expected;
  for (auto x : b) expected += std::to_string(x) + "\n";
  EXPECT_EQ(file(dir / "corpus.txt.boundaries"), expected);
  // Test split covers chars [2160, 2400): only the article at 2000 overlaps, and it starts earlier.
  EXPECT_TRUE(b.empty());
}

TEST(Pipeline, ZeroEpochsKeepsInit) {
  oracle::TempDir dir("pre0");
  const auto cfg = small_config(dir, {{"pretrain_epochs", "0"}});
  pipeline::cmd_gen_corpus(cfg);
  pipeline::cmd_pretrain(cfg);
  const auto ckpt = checkpoint::Checkpoint::load(cfg.checkpoint_path());
  const auto vocab = checkpoint::load_vocab(ckpt);
  EXPECT_EQ(checkpoint::load_params(ckpt).values(), lm::init_params(cfg.lm_config(vocab.size()), cfg.seed).values());
  expect_checkpoint_round_trip(cfg);
}

TEST(Pipeline, AlternatingCorpusReachesNearZeroLoss) {
  oracle::TempDir dir("abab");
  io::write_file_atomic(dir / "corpus.txt", synthetic::generate_alternating_corpus(4000));
  const auto cfg = small_config(dir, {{"pretrain_epochs", "4"}, {"hidden_dim", "8"}});
  const auto r = pipeline::cmd_pretrain(cfg);
  EXPECT_LT(r.best_valid_loss, 0.01);
}

TEST(Pipeline, UniformCorpusPlateausAtEntropy) {
  oracle::TempDir dir("uniform");
  io::write_file_atomic(dir / "corpus.txt", synthetic::generate_uniform_corpus(40000, 5, 3));
  const auto cfg = small_config(dir, {{"pretrain_epochs", "3"}, {"pretrain_lr", "0.5"}});
  const auto r = pipeline::cmd_pretrain(cfg);
  EXPECT_NEAR(r.best_valid_loss, std::log(5.0), 0.02 * std::log(5.0));
}

TEST(Pipeline, ConsolidateMatchesOracle) {
  oracle::TempDir dir("cons");
  const auto cfg = small_config(dir, {{"fisher_batches", "2"}});
  pipeline::cmd_gen_corpus(cfg);
  pipeline::cmd_pretrain(cfg);
  const auto memory = pipeline::cmd_consolidate(cfg);
  const auto ckpt = checkpoint::Checkpoint::load(cfg.checkpoint_path());
  const auto params = checkpoint::load_params(ckpt);
  EXPECT_EQ(memory.theta0.values(), params.values());
  const auto data = pipeline::prepare_data(cfg, nullptr);
  const auto [o1, g1] = lm::loss_and_grad(params, data.train[0], lm::HiddenState::zeros(6));
  const auto g2 = lm::loss_and_grad(params, data.train[1], o1.final_state).second;
  for (std::size_t j = 0; j < params.size(); ++j) {
    EXPECT_EQ(memory.fisher[j], (g1[j] * g1[j] + g2[j] * g2[j]) / 2.0);
    EXPECT_GE(memory.fisher[j], 0.0);
  }
  EXPECT_EQ(checkpoint::load_memory(ckpt).fisher, memory.fisher);
  expect_checkpoint_round_trip(cfg);
}

TEST(Pipeline, MetatrainZeroStepsStoresInit) {
  oracle::TempDir dir("meta0");
  const auto cfg = small_config(dir, {{"meta_steps", "0"}});
  pipeline::cmd_gen_corpus(cfg);
  pipeline::cmd_pretrain(cfg);
  EXPECT_THROW(pipeline::cmd_metatrain(cfg), ConfigError);  // not consolidated yet
  pipeline::cmd_consolidate(cfg);
  pipeline::cmd_metatrain(cfg);
  const auto ckpt = checkpoint::Checkpoint::load(cfg.checkpoint_path());
  EXPECT_EQ(checkpoint::load_meta(ckpt), meta::init_meta(8, 4, cfg.seed));
  EXPECT_EQ(checkpoint::load_meta(ckpt, pipeline::kNoMemoryPrefix),
            meta::init_meta(8, 4, cfg.seed, {cfg.nomem_init_copy_bias, cfg.meta_init_flush_bias, cfg.meta_init_update_scale}));
  EXPECT_EQ(file(cfg.out_dir / "meta_train.csv"), "meta_step,meta_loss,mean_step_loss,meta_grad_norm,theta_drift,wall_ms\n");
}

TEST(Pipeline, EndToEndCommandsAndCompare) {
  oracle::TempDir dir("e2e");
  auto cfg = small_config(dir, {{"token_batches", "1,3"}});
  pipeline::cmd_gen_corpus(cfg);
  pipeline::cmd_pretrain(cfg);
  pipeline::cmd_consolidate(cfg);
  const auto outcome = pipeline::cmd_metatrain(cfg);
  EXPECT_EQ(outcome.memory_log.size(), 2u);
  EXPECT_EQ(outcome.nomem_log.size(), 2u);
  // header + one row per meta step
  const std::string log = file(cfg.out_dir / "meta_train.csv");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 3);
  expect_checkpoint_round_trip(cfg);

  for (const char* v : {"static", "dynamic_fixed", "meta", "meta_with_memory"}) {
    cfg.variant = v;
    const auto t = pipeline::cmd_eval(cfg);
    EXPECT_GT(t.size(), 0u);
    EXPECT_TRUE(std::filesystem::exists(cfg.out_dir / (std::string("trace_") + v + ".csv")));
  }
  cfg.variant = "wavelet";
  EXPECT_THROW(pipeline::cmd_eval(cfg), ConfigError);

  cfg.variant_a = cfg.variant_b = "static";
  for (double g : pipeline::cmd_compare(cfg).gain.raw) EXPECT_EQ(g, 0.0);

  cfg.variant_a = "static";
  cfg.variant_b = "dynamic_fixed";
  const auto ab = pipeline::cmd_compare(cfg);
  EXPECT_EQ(ab.diffs.size(), 2u);
  const std::string gain_ab = file(cfg.out_dir / "gain_static_vs_dynamic_fixed.csv");
  cfg.variant = "static";
  const auto ts = evalreport::read_trace_csv((pipeline::cmd_eval(cfg), cfg.out_dir / "trace_static.csv"), 16);
  cfg.variant = "dynamic_fixed";
  const auto td = evalreport::read_trace_csv((pipeline::cmd_eval(cfg), cfg.out_dir / "trace_dynamic_fixed.csv"), 16);
  for (std::size_t k = 0; k < ab.gain.raw.size(); ++k) {
    EXPECT_NEAR(ab.gain.raw[k], std::exp(ts.batch_loss[k]) - std::exp(td.batch_loss[k]), 1e-12);
  }

  std::swap(cfg.variant_a, cfg.variant_b);
  const auto ba = pipeline::cmd_compare(cfg);
  for (std::size_t k = 0; k < ab.gain.raw.size(); ++k) EXPECT_EQ(ba.gain.raw[k], -ab.gain.raw[k]);
}

TEST(Pipeline, CompareWritesArticleColumn) {
  oracle::TempDir dir("bounds");
  auto cfg = small_config(dir, {{"gen_articles", "20"}, {"gen_article_chars", "200"}});
  const auto b = pipeline::cmd_gen_corpus(cfg);
  ASSERT_FALSE(b.empty());
  pipeline::cmd_pretrain(cfg);
  cfg.boundaries_path = dir / "corpus.txt.boundaries";
  cfg.variant_b = "dynamic_fixed";
  pipeline::cmd_compare(cfg);
  const std::string csv = file(cfg.out_dir / "gain_static_vs_dynamic_fixed.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "batch,gain,smoothed,article");
}

TEST(Pipeline, MissingInputs) {
  oracle::TempDir dir("missing");
  const auto cfg = small_config(dir);
  EXPECT_THROW(pipeline::cmd_pretrain(cfg), IoError);
  EXPECT_THROW(pipeline::cmd_consolidate(cfg), IoError);
}
