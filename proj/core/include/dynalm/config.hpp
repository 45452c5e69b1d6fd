#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dynalm/corpus.hpp"
#include "dynalm/lm.hpp"
#include "dynalm/metalearner.hpp"
#include "dynalm/metatrain.hpp"

namespace dynalm::config {

// Every setting of a run. Built from flat "key = value" text plus overrides;
// unknown keys are rejected before anything runs.
struct RunConfig {
  std::filesystem::path corpus_path;
  corpus::VocabMode vocab_mode = corpus::VocabMode::kCharacter;
  std::size_t vocab_max_size = 10000;
  std::size_t batch_tokens = 64;
  double split_train = 0.8;
  double split_valid = 0.1;
  double split_test = 0.1;

  std::size_t embed_dim = 16;
  std::size_t hidden_dim = 64;
  bool tie_embeddings = false;

  double pretrain_lr = 1.0;
  std::size_t pretrain_epochs = 10;
  double pretrain_clip = 0.25;
  std::size_t fisher_batches = 0;  // 0: the whole training split

  metatrain::UnrollConfig unroll;
  std::size_t meta_hidden = 16;
  std::string meta_variants = "both";  // memory | nomem | both
  double meta_init_copy_bias = 4.0;
  double meta_init_flush_bias = -4.0;
  double meta_init_update_scale = 0.01;
  double nomem_init_copy_bias = 8.0;

  meta::FixedGates dynamic_gates{1.0, -0.1, 0.0};
  std::string variant = "static";
  std::string variant_a = "static";
  std::string variant_b = "meta";
  std::size_t smooth_window = 25;
  std::vector<std::size_t> token_batches;
  std::filesystem::path boundaries_path;

  std::size_t gen_articles = 100;
  std::size_t gen_article_chars = 1600;
  std::size_t gen_common_words = 24;
  std::size_t gen_topic_words = 16;
  double gen_common_fraction = 0.4;

  std::uint64_t seed = 1;
  std::filesystem::path out_dir = "out";
  std::filesystem::path checkpoint;  // empty: <out_dir>/model.ckpt

  std::filesystem::path checkpoint_path() const;
  lm::LmConfig lm_config(std::size_t vocab_size) const;

  // Canonical "key = value" listing of every setting, sorted by key.
  std::string to_text() const;
  std::vector<std::pair<std::string, std::string>> to_pairs() const;
};

std::vector<std::string> known_keys();

// Parses "key = value" lines; '#' starts a comment. Throws ConfigError on
// malformed lines, duplicate keys or unknown keys.
std::map<std::string, std::string> parse_text(std::string_view text);

// defaults <- file <- overrides <- DYNALM_SEED.
RunConfig resolve(const std::map<std::string, std::string>& file_values,
                  const std::vector<std::pair<std::string, std::string>>& overrides,
                  const char* env_seed);

RunConfig load(const std::filesystem::path& path,
               const std::vector<std::pair<std::string, std::string>>& overrides = {});

}  // namespace dynalm::config
