#include <gtest/gtest.h>

#include "dynalm/config.hpp"
#include "dynalm/errors.hpp"
#include "dynalm/io.hpp"
#include "test_support.hpp"

using namespace dynalm;
using namespace dynalm::config;

TEST(Config, Defaults) {
  const auto c = resolve({}, {}, nullptr);
  EXPECT_EQ(c.batch_tokens, 64u);
  EXPECT_EQ(c.unroll.unroll_len, 40u);
  EXPECT_EQ(c.unroll.checkpoint_interval, 0u);
  EXPECT_EQ(c.unroll.interval(), 6u);
  EXPECT_EQ(c.meta_hidden, 16u);
  EXPECT_EQ(c.pretrain_clip, 0.25);
  EXPECT_EQ(c.pretrain_lr, 1.0);
  EXPECT_FALSE(c.unroll.carry_theta);
  EXPECT_FALSE(c.unroll.features.use_fisher);
  EXPECT_EQ(c.unroll.ewc_lambda, 0.0);
  EXPECT_EQ(c.checkpoint_path(), std::filesystem::path("out") / "model.ckpt");
}

TEST(Config, ParseTextAndOverridePrecedence) {
  const auto values = parse_text("# comment\nseed = 5\n\nbatch_tokens=32   # trailing\nvocab_mode = word\n");
  EXPECT_EQ(values.size(), 3u);
  const auto c = resolve(values, {{"batch_tokens", "16"}}, nullptr);
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.batch_tokens, 16u);
  EXPECT_EQ(c.vocab_mode, corpus::VocabMode::kWord);
  EXPECT_EQ(resolve(values, {{"seed", "6"}}, "9").seed, 9u);
  EXPECT_EQ(resolve(values, {}, "").seed, 5u);
}

TEST(Config, RejectsUnknownKeys) {
  try {
    parse_text("seed = 1\nbogus_key = 3\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("bogus_key"), std::string::npos);
  }
  EXPECT_THROW(resolve({}, {{"nope", "1"}}, nullptr), ConfigError);
  EXPECT_THROW(resolve({{"bad", "1"}}, {}, nullptr), ConfigError);
}

TEST(Config, RejectsMalformedAndInvalid) {
  EXPECT_THROW(parse_text("seed 1\n"), ConfigError);
  EXPECT_THROW(parse_text("seed = 1\nseed = 2\n"), ConfigError);
  EXPECT_THROW(resolve({}, {{"batch_tokens", "abc"}}, nullptr), ConfigError);
  EXPECT_THROW(resolve({}, {{"batch_tokens", "-3"}}, nullptr), ConfigError);
  EXPECT_THROW(resolve({}, {{"batch_tokens", "0"}}, nullptr), ConfigError);
  EXPECT_THROW(resolve({}, {{"meta_lr", "0"}}, nullptr), ConfigError);
  EXPECT_THROW(resolve({}, {{"unroll_len", "4"}, {"checkpoint_interval", "5"}}, nullptr), ConfigError);
  EXPECT_THROW(resolve({}, {{"split_train", "0.9"}}, nullptr), ConfigError);
  EXPECT_THROW(resolve({}, {{"tie_embeddings", "true"}}, nullptr), ConfigError);
  EXPECT_THROW(resolve({}, {{"tie_embeddings", "maybe"}}, nullptr), ConfigError);
  EXPECT_THROW(resolve({}, {{"vocab_mode", "bpe"}}, nullptr), ConfigError);
  EXPECT_THROW(resolve({}, {{"meta_variants", "all"}}, nullptr), ConfigError);
  EXPECT_THROW(resolve({}, {{"ewc_lambda", "-1"}}, nullptr), ConfigError);
  EXPECT_THROW(resolve({}, {{"seed", "1.5"}}, "x"), ConfigError);
}

TEST(Config, CanonicalTextRoundTrips) {
  const auto c = resolve({}, {{"seed", "3"}, {"meta_lr", "0.0025"}, {"token_batches", "4, 9"}, {"tie_embeddings", "true"},
                              {"embed_dim", "8"}, {"hidden_dim", "8"}},
                         nullptr);
  const std::string text = c.to_text();
  const auto again = resolve(parse_text(text), {}, nullptr);
  EXPECT_EQ(again.to_text(), text);
  EXPECT_EQ(again.token_batches, (std::vector<std::size_t>{4, 9}));
  EXPECT_EQ(again.unroll.meta_lr, 0.0025);
  EXPECT_EQ(c.to_pairs().size(), known_keys().size());
}

TEST(Config, LoadFromFile) {
  oracle::TempDir dir("cfg");
  io::write_file_atomic(dir / "run.cfg", "hidden_dim = 12\n");
  EXPECT_EQ(load(dir / "run.cfg", {{"embed_dim", "3"}}).hidden_dim, 12u);
  EXPECT_THROW(load(dir / "missing.cfg"), IoError);
}
