#include "dynalm/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <sstream>

#include "dynalm/errors.hpp"
#include "dynalm/io.hpp"

namespace dynalm::config {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("config key '" + key + "': expected " + expected + ", got '" + value + "'");
}

std::size_t to_size(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) bad_value(key, v, "a non-negative integer");
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    bad_value(key, v, "a non-negative integer");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) bad_value(key, v, "a number");
    return d;
  } catch (const std::exception&) {
    bad_value(key, v, "a number");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "a boolean");
}

std::string from_bool(bool b) { return b ? "true" : "false"; }

std::vector<std::size_t> to_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::istringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(to_size(key, item));
  }
  return out;
}

std::string from_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t k = 0; k < v.size(); ++k) {
    if (k) s += ',';
    s += std::to_string(v[k]);
  }
  return s;
}

struct Field {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define DYNALM_SIZE(name, member)                                                      \
  Field{name, [](RunConfig& c, const std::string& v) { c.member = to_size(name, v); }, \
        [](const RunConfig& c) { return std::to_string(c.member); }}
#define DYNALM_DOUBLE(name, member)                                                      \
  Field{name, [](RunConfig& c, const std::string& v) { c.member = to_double(name, v); }, \
        [](const RunConfig& c) { return io::format_double(c.member); }}
#define DYNALM_BOOL(name, member)                                                      \
  Field{name, [](RunConfig& c, const std::string& v) { c.member = to_bool(name, v); }, \
        [](const RunConfig& c) { return from_bool(c.member); }}
#define DYNALM_STRING(name, member)                                       \
  Field{name, [](RunConfig& c, const std::string& v) { c.member = v; }, \
        [](const RunConfig& c) { return std::string(c.member); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      DYNALM_STRING("corpus_path", corpus_path),
      Field{"vocab_mode", [](RunConfig& c, const std::string& v) { c.vocab_mode = corpus::parse_vocab_mode(v); },
            [](const RunConfig& c) { return corpus::to_string(c.vocab_mode); }},
      DYNALM_SIZE("vocab_max_size", vocab_max_size),
      DYNALM_SIZE("batch_tokens", batch_tokens),
      DYNALM_DOUBLE("split_train", split_train),
      DYNALM_DOUBLE("split_valid", split_valid),
      DYNALM_DOUBLE("split_test", split_test),
      DYNALM_SIZE("embed_dim", embed_dim),
      DYNALM_SIZE("hidden_dim", hidden_dim),
      DYNALM_BOOL("tie_embeddings", tie_embeddings),
      DYNALM_DOUBLE("pretrain_lr", pretrain_lr),
      DYNALM_SIZE("pretrain_epochs", pretrain_epochs),
      DYNALM_DOUBLE("pretrain_clip", pretrain_clip),
      DYNALM_SIZE("fisher_batches", fisher_batches),
      DYNALM_SIZE("unroll_len", unroll.unroll_len),
      DYNALM_SIZE("checkpoint_interval", unroll.checkpoint_interval),
      DYNALM_DOUBLE("meta_lr", unroll.meta_lr),
      DYNALM_SIZE("meta_steps", unroll.meta_steps),
      DYNALM_DOUBLE("meta_clip", unroll.grad_clip),
      DYNALM_BOOL("carry_theta", unroll.carry_theta),
      DYNALM_DOUBLE("ewc_lambda", unroll.ewc_lambda),
      DYNALM_BOOL("meta_use_fisher", unroll.features.use_fisher),
      DYNALM_SIZE("meta_hidden", meta_hidden),
      DYNALM_STRING("meta_variants", meta_variants),
      DYNALM_DOUBLE("meta_init_copy_bias", meta_init_copy_bias),
      DYNALM_DOUBLE("meta_init_flush_bias", meta_init_flush_bias),
      DYNALM_DOUBLE("meta_init_update_scale", meta_init_update_scale),
      DYNALM_DOUBLE("nomem_init_copy_bias", nomem_init_copy_bias),
      DYNALM_DOUBLE("dyn_f", dynamic_gates.f),
      DYNALM_DOUBLE("dyn_i", dynamic_gates.i),
      DYNALM_DOUBLE("dyn_z", dynamic_gates.z),
      DYNALM_STRING("variant", variant),
      DYNALM_STRING("variant_a", variant_a),
      DYNALM_STRING("variant_b", variant_b),
      DYNALM_SIZE("smooth_window", smooth_window),
      Field{"token_batches", [](RunConfig& c, const std::string& v) { c.token_batches = to_list("token_batches", v); },
            [](const RunConfig& c) { return from_list(c.token_batches); }},
      DYNALM_STRING("boundaries_path", boundaries_path),
      DYNALM_SIZE("gen_articles", gen_articles),
      DYNALM_SIZE("gen_article_chars", gen_article_chars),
      DYNALM_SIZE("gen_common_words", gen_common_words),
      DYNALM_SIZE("gen_topic_words", gen_topic_words),
      DYNALM_DOUBLE("gen_common_fraction", gen_common_fraction),
      DYNALM_SIZE("seed", seed),
      DYNALM_STRING("out_dir", out_dir),
      DYNALM_STRING("checkpoint", checkpoint),
  };
  return table;
}

#undef DYNALM_SIZE
#undef DYNALM_DOUBLE
#undef DYNALM_BOOL
#undef DYNALM_STRING

const Field* find_field(std::string_view key) {
  for (const auto& f : fields()) {
    if (key == f.key) return &f;
  }
  return nullptr;
}

void validate(const RunConfig& c) {
  if (c.batch_tokens < 1) throw ConfigError("batch_tokens must be at least 1");
  if (c.vocab_max_size < 2) throw ConfigError("vocab_max_size must be at least 2");
  if (c.embed_dim < 1 || c.hidden_dim < 1) throw ConfigError("embed_dim and hidden_dim must be positive");
  if (c.tie_embeddings && c.embed_dim != c.hidden_dim) {
    throw ConfigError("tie_embeddings requires embed_dim == hidden_dim");
  }
  if (!(c.pretrain_lr > 0.0)) throw ConfigError("pretrain_lr must be positive");
  if (!(c.pretrain_clip > 0.0)) throw ConfigError("pretrain_clip must be positive");
  if (c.meta_hidden < 1) throw ConfigError("meta_hidden must be positive");
  if (c.meta_variants != "both" && c.meta_variants != "memory" && c.meta_variants != "nomem") {
    throw ConfigError("meta_variants must be one of both, memory, nomem");
  }
  if (c.smooth_window < 1) throw ConfigError("smooth_window must be at least 1");
  if (!(c.split_train > 0.0 && c.split_valid > 0.0 && c.split_test > 0.0)) {
    throw ConfigError("split fractions must be positive");
  }
  if (std::abs(c.split_train + c.split_valid + c.split_test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1");
  }
  c.unroll.validate();
}

}  // namespace

std::filesystem::path RunConfig::checkpoint_path() const {
  return checkpoint.empty() ? out_dir / "model.ckpt" : checkpoint;
}

lm::LmConfig RunConfig::lm_config(std::size_t vocab_size) const {
  lm::LmConfig c{vocab_size, embed_dim, hidden_dim, tie_embeddings};
  c.validate();
  return c;
}

std::vector<std::pair<std::string, std::string>> RunConfig::to_pairs() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : fields()) out.emplace_back(f.key, f.get(*this));
  std::sort(out.begin(), out.end());
  return out;
}

std::string RunConfig::to_text() const {
  std::string s;
  for (const auto& [k, v] : to_pairs()) s += k + " = " + v + "\n";
  return s;
}

std::vector<std::string> known_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.emplace_back(f.key);
  return keys;
}

std::map<std::string, std::string> parse_text(std::string_view text) {
  std::map<std::string, std::string> values;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string content = trim(line);
    if (content.empty()) continue;
    const auto eq = content.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(content.substr(0, eq));
    const std::string value = trim(content.substr(eq + 1));
    if (!find_field(key)) throw ConfigError("unknown config key '" + key + "'");
    if (!values.emplace(key, value).second) throw ConfigError("duplicate config key '" + key + "'");
  }
  return values;
}

RunConfig resolve(const std::map<std::string, std::string>& file_values,
                  const std::vector<std::pair<std::string, std::string>>& overrides, const char* env_seed) {
  // Reject unknown keys before applying anything.
  for (const auto& [k, v] : file_values) {
    if (!find_field(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  for (const auto& [k, v] : overrides) {
    if (!find_field(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  RunConfig c;
  for (const auto& [k, v] : file_values) find_field(k)->set(c, v);
  for (const auto& [k, v] : overrides) find_field(k)->set(c, v);
  if (env_seed != nullptr && *env_seed != '\0') find_field("seed")->set(c, env_seed);
  validate(c);
  return c;
}

RunConfig load(const std::filesystem::path& path, const std::vector<std::pair<std::string, std::string>>& overrides) {
  std::map<std::string, std::string> values;
  if (!path.empty()) values = parse_text(io::read_file(path));
  return resolve(values, overrides, std::getenv("DYNALM_SEED"));
}

}  // namespace dynalm::config
