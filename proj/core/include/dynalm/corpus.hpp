#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace dynalm::corpus {

using TokenId = std::int32_t;

enum class VocabMode { kCharacter, kWord };

std::string to_string(VocabMode mode);
VocabMode parse_vocab_mode(std::string_view name);

// Token <-> id mapping. Ids are assigned by descending frequency with ties
// broken by byte-wise lexicographic order. In word mode id 0 is reserved for
// the unknown-word token.
class Vocabulary {
 public:
  static constexpr std::string_view kUnkToken = "<unk>";

  Vocabulary() = default;
  Vocabulary(VocabMode mode, std::vector<std::string> tokens);

  VocabMode mode() const { return mode_; }
  std::size_t size() const { return id_to_token_.size(); }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> find(std::string_view token) const;
  std::optional<TokenId> unk_id() const;
  const std::vector<std::string>& tokens() const { return id_to_token_; }

  // "dynalm-vocab v1 <mode> <V>" header, then one escaped token per line.
  // Escapes: backslash, newline, carriage return and tab.
  std::string serialize() const;
  static Vocabulary deserialize(std::string_view text);

  bool operator==(const Vocabulary& other) const {
    return mode_ == other.mode_ && id_to_token_ == other.id_to_token_;
  }

 private:
  VocabMode mode_ = VocabMode::kCharacter;
  std::vector<std::string> id_to_token_;
  std::map<std::string, TokenId, std::less<>> token_to_id_;
};

struct TokenSequence {
  std::vector<TokenId> ids;
  std::size_t length() const { return ids.size(); }
};

// One contiguous window of the stream: targets[k] is the token after inputs[k].
struct Batch {
  std::size_t index = 0;
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;
};

struct Split {
  TokenSequence train;
  TokenSequence valid;
  TokenSequence test;
};

// Splits UTF-8 text into code points; invalid sequences raise ConfigError.
std::vector<std::string> utf8_characters(std::string_view text);

Vocabulary build_vocab(std::string_view text, VocabMode mode, std::size_t max_size);

TokenSequence encode(std::string_view text, const Vocabulary& vocab);
std::string decode(const TokenSequence& tokens, const Vocabulary& vocab);

// Batch i covers inputs [i*M, i*M+M) and targets [i*M+1, i*M+M]; the trailing
// remainder is dropped, so there are floor((T-1)/M) batches.
std::vector<Batch> make_batches(const TokenSequence& tokens, std::size_t tokens_per_batch);

// Contiguous split; train and valid get floor(fraction*T), test gets the rest.
Split split_corpus(const TokenSequence& tokens, double train, double valid, double test);

}  // namespace dynalm::corpus
