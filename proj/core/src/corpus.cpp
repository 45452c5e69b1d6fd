#include "dynalm/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>

#include "dynalm/errors.hpp"

namespace dynalm::corpus {

namespace {

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> words;
  std::size_t pos = 0;
  auto is_space = [](char c) { return c == ' ' || c == '\n' || c == '\t' || c == '\r' || c == '\f' || c == '\v'; };
  while (pos < text.size()) {
    while (pos < text.size() && is_space(text[pos])) ++pos;
    const std::size_t start = pos;
    while (pos < text.size() && !is_space(text[pos])) ++pos;
    if (pos > start) words.emplace_back(text.substr(start, pos - start));
  }
  return words;
}

std::vector<std::string> tokenize(std::string_view text, VocabMode mode) {
  return mode == VocabMode::kCharacter ? utf8_characters(text) : split_whitespace(text);
}

std::string escape_token(const std::string& token) {
  std::string out;
  for (char c : token) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\t': out += "\\t"; break;
      default: out += c;
    }
  }
  return out;
}

std::string unescape_token(std::string_view line) {
  std::string out;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] != '\\') {
      out += line[i];
      continue;
    }
    if (++i == line.size()) throw ConfigError("vocabulary: dangling escape");
    switch (line[i]) {
      case '\\': out += '\\'; break;
      case 'n': out += '\n'; break;
      case 'r': out += '\r'; break;
      case 't': out += '\t'; break;
      default: throw ConfigError("vocabulary: unknown escape \\" + std::string(1, line[i]));
    }
  }
  return out;
}

}  // namespace

std::string to_string(VocabMode mode) {
  return mode == VocabMode::kCharacter ? "character" : "word";
}

VocabMode parse_vocab_mode(std::string_view name) {
  if (name == "character" || name == "char") return VocabMode::kCharacter;
  if (name == "word") return VocabMode::kWord;
  throw ConfigError("unknown vocabulary mode '" + std::string(name) + "'");
}

Vocabulary::Vocabulary(VocabMode mode, std::vector<std::string> tokens)
    : mode_(mode), id_to_token_(std::move(tokens)) {
  for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
    auto [it, inserted] = token_to_id_.emplace(id_to_token_[i], static_cast<TokenId>(i));
    if (!inserted) throw ConfigError("vocabulary: duplicate token '" + id_to_token_[i] + "'");
  }
  if (mode_ == VocabMode::kWord && (id_to_token_.empty() || id_to_token_[0] != kUnkToken)) {
    throw ConfigError("word vocabulary must start with the unknown token");
  }
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    throw ConfigError("token id " + std::to_string(id) + " out of range");
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = token_to_id_.find(token);
  if (it == token_to_id_.end()) return std::nullopt;
  return it->second;
}

std::optional<TokenId> Vocabulary::unk_id() const {
  if (mode_ == VocabMode::kWord) return TokenId{0};
  return std::nullopt;
}

std::string Vocabulary::serialize() const {
  std::string out = "dynalm-vocab v1 " + to_string(mode_) + " " + std::to_string(size()) + "\n";
  for (const auto& t : id_to_token_) {
    out += escape_token(t);
    out += '\n';
  }
  return out;
}

Vocabulary Vocabulary::deserialize(std::string_view text) {
  std::vector<std::string> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) throw ConfigError("vocabulary: missing trailing newline");
    lines.emplace_back(text.substr(pos, nl - pos));
    pos = nl + 1;
  }
  if (lines.empty()) throw ConfigError("vocabulary: empty file");
  std::istringstream header(lines[0]);
  std::string magic, version, mode;
  std::size_t count = 0;
  header >> magic >> version >> mode >> count;
  if (magic != "dynalm-vocab" || version != "v1" || !header) {
    throw ConfigError("vocabulary: bad header '" + lines[0] + "'");
  }
  if (lines.size() != count + 1) throw ConfigError("vocabulary: token count does not match header");
  std::vector<std::string> tokens;
  tokens.reserve(count);
  for (std::size_t i = 1; i < lines.size(); ++i) tokens.push_back(unescape_token(lines[i]));
  return Vocabulary(parse_vocab_mode(mode), std::move(tokens));
}

std::vector<std::string> utf8_characters(std::string_view text) {
  std::vector<std::string> out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if (lead >= 0xF0 && lead < 0xF8) len = 4;
    else if (lead >= 0xE0) len = 3;
    else if (lead >= 0xC0) len = 2;
    else if (lead >= 0x80) throw ConfigError("invalid UTF-8 at byte " + std::to_string(i));
    if (lead >= 0xF8 || i + len > text.size()) throw ConfigError("invalid UTF-8 at byte " + std::to_string(i));
    for (std::size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(text[i + k]) & 0xC0) != 0x80) {
        throw ConfigError("invalid UTF-8 at byte " + std::to_string(i));
      }
    }
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

Vocabulary build_vocab(std::string_view text, VocabMode mode, std::size_t max_size) {
  if (text.empty()) throw ConfigError("empty corpus");
  const auto tokens = tokenize(text, mode);
  if (tokens.empty()) throw ConfigError("empty corpus");

  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& t : tokens) {
    if (mode == VocabMode::kWord && t == Vocabulary::kUnkToken) continue;
    ++counts[t];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  std::vector<std::string> ordered;
  if (mode == VocabMode::kWord) ordered.emplace_back(Vocabulary::kUnkToken);
  for (auto& [token, count] : ranked) {
    if (ordered.size() >= max_size) break;
    ordered.push_back(std::move(token));
  }
  if (ordered.size() < 2) throw ConfigError("vocabulary needs at least two tokens");
  return Vocabulary(mode, std::move(ordered));
}

TokenSequence encode(std::string_view text, const Vocabulary& vocab) {
  const auto tokens = tokenize(text, vocab.mode());
  TokenSequence seq;
  seq.ids.reserve(tokens.size());
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    if (auto id = vocab.find(tokens[k])) {
      seq.ids.push_back(*id);
    } else if (auto unk = vocab.unk_id()) {
      seq.ids.push_back(*unk);
    } else {
      throw ConfigError("character '" + tokens[k] + "' at offset " + std::to_string(k) +
                        " is not in the vocabulary");
    }
  }
  return seq;
}

std::string decode(const TokenSequence& tokens, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t k = 0; k < tokens.ids.size(); ++k) {
    if (vocab.mode() == VocabMode::kWord && k > 0) out += ' ';
    out += vocab.token(tokens.ids[k]);
  }
  return out;
}

std::vector<Batch> make_batches(const TokenSequence& tokens, std::size_t tokens_per_batch) {
  if (tokens_per_batch < 1) throw ConfigError("tokens per batch must be at least 1");
  if (tokens.length() < tokens_per_batch + 1) throw ConfigError("sequence too short");
  const std::size_t count = (tokens.length() - 1) / tokens_per_batch;
  std::vector<Batch> batches(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto first = tokens.ids.begin() + static_cast<std::ptrdiff_t>(i * tokens_per_batch);
    const auto m = static_cast<std::ptrdiff_t>(tokens_per_batch);
    batches[i].index = i;
    batches[i].inputs.assign(first, first + m);
    batches[i].targets.assign(first + 1, first + m + 1);
  }
  return batches;
}

Split split_corpus(const TokenSequence& tokens, double train, double valid, double test) {
  if (!(train > 0.0) || !(valid > 0.0) || !(test > 0.0)) {
    throw ConfigError("split fractions must be positive");
  }
  if (std::abs(train + valid + test - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  const auto total = tokens.length();
  // The epsilon absorbs representation error such as 0.1 * 100 = 10.000000000000002.
  auto portion = [total](double f) {
    return static_cast<std::size_t>(std::floor(f * static_cast<double>(total) + 1e-9));
  };
  const std::size_t n_train = std::min(portion(train), total);
  const std::size_t n_valid = std::min(portion(valid), total - n_train);
  Split split;
  auto begin = tokens.ids.begin();
  split.train.ids.assign(begin, begin + static_cast<std::ptrdiff_t>(n_train));
  split.valid.ids.assign(begin + static_cast<std::ptrdiff_t>(n_train),
                         begin + static_cast<std::ptrdiff_t>(n_train + n_valid));
  split.test.ids.assign(begin + static_cast<std::ptrdiff_t>(n_train + n_valid), tokens.ids.end());
  return split;
}

}  // namespace dynalm::corpus
