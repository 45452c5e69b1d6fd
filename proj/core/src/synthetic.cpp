#include "dynalm/synthetic.hpp"

#include <cmath>

#include "dynalm/errors.hpp"
#include "dynalm/rng.hpp"

namespace dynalm::synthetic {

namespace {

std::string random_word(Rng& rng) {
  const std::size_t len = 3 + rng.below(5);
  std::string w;
  for (std::size_t k = 0; k < len; ++k) w += static_cast<char>('a' + rng.below(26));
  return w;
}

// Zipf(1) sampler over n ranks.
class Zipf {
 public:
  explicit Zipf(std::size_t n) : cdf_(n) {
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      total += 1.0 / static_cast<double>(r + 1);
      cdf_[r] = total;
    }
    for (double& c : cdf_) c /= total;
  }

  std::size_t sample(Rng& rng) const {
    const double u = rng.uniform();
    for (std::size_t r = 0; r < cdf_.size(); ++r) {
      if (u < cdf_[r]) return r;
    }
    return cdf_.size() - 1;
  }

 private:
  std::vector<double> cdf_;
};

}  // namespace

RegimeCorpus generate_regime_corpus(const RegimeCorpusOptions& opts) {
  if (opts.articles == 0 || opts.article_chars == 0) throw ConfigError("corpus generator needs articles");
  if (opts.common_words == 0 || opts.topic_words == 0) throw ConfigError("corpus generator needs words");
  if (opts.common_fraction < 0.0 || opts.common_fraction > 1.0) {
    throw ConfigError("common_fraction must lie in [0, 1]");
  }
  Rng rng(opts.seed);
  std::vector<std::string> common;
  for (std::size_t k = 0; k < opts.common_words; ++k) common.push_back(random_word(rng));
  const Zipf common_dist(opts.common_words), topic_dist(opts.topic_words);

  RegimeCorpus corpus;
  for (std::size_t a = 0; a < opts.articles; ++a) {
    std::vector<std::string> topic;
    for (std::size_t k = 0; k < opts.topic_words; ++k) topic.push_back(random_word(rng));
    corpus.article_offsets.push_back(corpus.text.size());
    std::string article;
    while (article.size() < opts.article_chars) {
      const bool use_common = rng.uniform() < opts.common_fraction;
      article += use_common ? common[common_dist.sample(rng)] : topic[topic_dist.sample(rng)];
      article += ' ';
    }
    article.resize(opts.article_chars - 1);
    article += '\n';
    corpus.text += article;
  }
  return corpus;
}

std::string generate_uniform_corpus(std::size_t length, std::size_t alphabet, std::uint64_t seed) {
  if (alphabet < 2 || alphabet > 26) throw ConfigError("alphabet must be in [2, 26]");
  Rng rng(seed);
  std::string text(length, 'a');
  for (char& c : text) c = static_cast<char>('a' + rng.below(alphabet));
  return text;
}

std::string generate_alternating_corpus(std::size_t length) {
  std::string text(length, 'a');
  for (std::size_t k = 1; k < length; k += 2) text[k] = 'b';
  return text;
}

std::vector<std::size_t> test_boundaries(const std::vector<std::size_t>& article_offsets,
                                         std::size_t test_start, std::size_t test_length,
                                         std::size_t tokens_per_batch) {
  if (tokens_per_batch == 0) throw ConfigError("tokens per batch must be positive");
  const std::size_t n_batches = test_length > 0 ? (test_length - 1) / tokens_per_batch : 0;
  std::vector<std::size_t> out;
  for (auto off : article_offsets) {
    if (off < test_start) continue;
    const std::size_t b = (off - test_start) / tokens_per_batch;
    if (b < n_batches) out.push_back(b);
  }
  return out;
}

}  // namespace dynalm::synthetic
