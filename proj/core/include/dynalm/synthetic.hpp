#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace dynalm::synthetic {

// Concatenated "articles": each article draws words from its own topic
// vocabulary mixed with a shared pool of common words, so a static model only
// learns the shared statistics and each article rewards online adaptation.
struct RegimeCorpusOptions {
  std::size_t articles = 100;
  std::size_t article_chars = 1600;
  std::size_t common_words = 24;
  std::size_t topic_words = 16;
  double common_fraction = 0.4;
  std::uint64_t seed = 1;
};

struct RegimeCorpus {
  std::string text;
  std::vector<std::size_t> article_offsets;  // character offset of each article start
};

RegimeCorpus generate_regime_corpus(const RegimeCorpusOptions& opts);

// iid uniform characters over the first `alphabet` lowercase letters.
std::string generate_uniform_corpus(std::size_t length, std::size_t alphabet, std::uint64_t seed);

// "abab..." of the given length.
std::string generate_alternating_corpus(std::size_t length);

// Batch index (within the test split) at which each article starting inside
// the test split begins, given the split start offset and tokens per batch.
std::vector<std::size_t> test_boundaries(const std::vector<std::size_t>& article_offsets,
                                         std::size_t test_start, std::size_t test_length,
                                         std::size_t tokens_per_batch);

}  // namespace dynalm::synthetic
