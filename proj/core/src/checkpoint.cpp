#include "dynalm/checkpoint.hpp"

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <sstream>

#include "dynalm/errors.hpp"
#include "dynalm/io.hpp"

namespace dynalm::checkpoint {

namespace {

constexpr std::string_view kMagic = "DYNALM1";

void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  for (int b = 0; b < 8; ++b) out += static_cast<char>((bits >> (8 * b)) & 0xFF);
}

double get_f64(const char* p) {
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[b])) << (8 * b);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s;
  for (std::size_t k = 0; k < shape.size(); ++k) {
    if (k) s += 'x';
    s += std::to_string(shape[k]);
  }
  return s;
}

std::vector<std::size_t> parse_shape(const std::string& s) {
  std::vector<std::size_t> shape;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t next = std::min(s.find('x', pos), s.size());
    const std::string part = s.substr(pos, next - pos);
    if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError("checkpoint: bad shape '" + s + "'");
    }
    shape.push_back(std::stoull(part));
    pos = next + 1;
  }
  return shape;
}

std::size_t element_count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::size_t byte_size(const Checkpoint::Entry& e) {
  return e.dtype == "f64" ? e.values.size() * 8 : e.text.size();
}

std::string meta_name(std::string_view prefix, std::string_view base) {
  return std::string(prefix) + std::string(base);
}

std::string lm_config_text(const lm::LmConfig& c) {
  std::ostringstream s;
  s << "vocab_size=" << c.vocab_size << " embed_dim=" << c.embed_dim << " hidden_dim=" << c.hidden_dim
    << " tie_embeddings=" << (c.tie_embeddings ? 1 : 0);
  return s.str();
}

lm::LmConfig parse_lm_config(const std::string& text) {
  lm::LmConfig c;
  std::istringstream in(text);
  std::string item;
  int seen = 0;
  while (in >> item) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("checkpoint: bad lm_config item '" + item + "'");
    const std::string key = item.substr(0, eq);
    const std::size_t value = std::stoull(item.substr(eq + 1));
    if (key == "vocab_size") c.vocab_size = value;
    else if (key == "embed_dim") c.embed_dim = value;
    else if (key == "hidden_dim") c.hidden_dim = value;
    else if (key == "tie_embeddings") c.tie_embeddings = value != 0;
    else throw ConfigError("checkpoint: unknown lm_config key '" + key + "'");
    ++seen;
  }
  if (seen != 4) throw ConfigError("checkpoint: incomplete lm_config");
  c.validate();
  return c;
}

}  // namespace

bool Checkpoint::has(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
}

const Checkpoint::Entry& Checkpoint::entry(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw ConfigError("checkpoint has no array '" + std::string(name) + "'");
}

Checkpoint::Entry& Checkpoint::upsert(std::string name) {
  for (auto& e : entries_) {
    if (e.name == name) return e;
  }
  entries_.push_back(Entry{std::move(name), {}, {}, {}, {}});
  return entries_.back();
}

void Checkpoint::set_array(std::string name, std::vector<std::size_t> shape, std::vector<double> values) {
  if (name.empty() || name.find_first_of(" \n\t") != std::string::npos) {
    throw ConfigError("checkpoint: invalid entry name '" + name + "'");
  }
  if (element_count(shape) != values.size()) throw ConfigError("checkpoint: shape does not match data for '" + name + "'");
  Entry& e = upsert(std::move(name));
  e.dtype = "f64";
  e.shape = std::move(shape);
  e.values = std::move(values);
  e.text.clear();
}

void Checkpoint::set_text(std::string name, std::string text) {
  if (name.empty() || name.find_first_of(" \n\t") != std::string::npos) {
    throw ConfigError("checkpoint: invalid entry name '" + name + "'");
  }
  Entry& e = upsert(std::move(name));
  e.dtype = "utf8";
  e.shape = {text.size()};
  e.text = std::move(text);
  e.values.clear();
}

const std::vector<double>& Checkpoint::array(std::string_view name) const {
  const auto& e = entry(name);
  if (e.dtype != "f64") throw ConfigError("checkpoint entry '" + std::string(name) + "' is not numeric");
  return e.values;
}

const std::string& Checkpoint::text(std::string_view name) const {
  const auto& e = entry(name);
  if (e.dtype != "utf8") throw ConfigError("checkpoint entry '" + std::string(name) + "' is not text");
  return e.text;
}

std::string Checkpoint::serialize() const {
  std::string out(kMagic);
  out += '\n';
  std::size_t offset = 0;
  for (const auto& e : entries_) {
    out += e.name + ' ' + e.dtype + ' ' + shape_string(e.shape) + ' ' + std::to_string(offset) + '\n';
    offset += byte_size(e);
  }
  out += '\n';
  out.reserve(out.size() + offset);
  for (const auto& e : entries_) {
    if (e.dtype == "f64") {
      for (double v : e.values) put_f64(out, v);
    } else {
      out += e.text;
    }
  }
  return out;
}

Checkpoint Checkpoint::parse(std::string_view bytes) {
  std::size_t pos = 0;
  auto next_line = [&]() {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string_view::npos) throw ConfigError("checkpoint: truncated header");
    std::string line(bytes.substr(pos, nl - pos));
    pos = nl + 1;
    return line;
  };
  if (next_line() != kMagic) throw ConfigError("checkpoint: bad magic");

  struct Pending {
    Entry entry;
    std::size_t offset;
  };
  std::vector<Pending> pending;
  for (std::string line = next_line(); !line.empty(); line = next_line()) {
    std::istringstream in(line);
    std::string name, dtype, shape;
    std::size_t offset = 0;
    if (!(in >> name >> dtype >> shape >> offset)) throw ConfigError("checkpoint: bad manifest line '" + line + "'");
    if (dtype != "f64" && dtype != "utf8") throw ConfigError("checkpoint: unknown dtype '" + dtype + "'");
    pending.push_back({Entry{name, dtype, parse_shape(shape), {}, {}}, offset});
  }

  const std::string_view body = bytes.substr(pos);
  Checkpoint ckpt;
  std::size_t expected = 0;
  for (auto& p : pending) {
    const std::size_t n = element_count(p.entry.shape);
    const std::size_t nbytes = p.entry.dtype == "f64" ? n * 8 : n;
    if (p.offset != expected || p.offset + nbytes > body.size()) {
      throw ConfigError("checkpoint: manifest offset of '" + p.entry.name + "' inconsistent with body");
    }
    if (p.entry.dtype == "f64") {
      p.entry.values.resize(n);
      for (std::size_t k = 0; k < n; ++k) p.entry.values[k] = get_f64(body.data() + p.offset + 8 * k);
    } else {
      p.entry.text.assign(body.substr(p.offset, n));
    }
    expected += nbytes;
    ckpt.entries_.push_back(std::move(p.entry));
  }
  if (expected != body.size()) throw ConfigError("checkpoint: trailing bytes after body");
  return ckpt;
}

void Checkpoint::save(const std::filesystem::path& path) const { io::write_file_atomic(path, serialize()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) { return parse(io::read_file(path)); }

void store_params(Checkpoint& ckpt, const lm::Parameters& params) {
  ckpt.set_text("lm_config", lm_config_text(params.layout().config()));
  for (const auto& s : params.layout().segments()) {
    const auto view = params.segment_view(s.name);
    ckpt.set_array(s.name, s.shape, std::vector<double>(view.values.begin(), view.values.end()));
  }
}

lm::Parameters load_params(const Checkpoint& ckpt) {
  const auto layout = lm::Layout::for_config(parse_lm_config(ckpt.text("lm_config")));
  lm::Parameters params(layout);
  for (const auto& s : layout->segments()) {
    const auto& e = ckpt.entry(s.name);
    if (e.dtype != "f64" || e.shape != s.shape) throw ConfigError("checkpoint: segment '" + s.name + "' has the wrong shape");
    auto view = params.segment_view(s.name);
    std::copy(e.values.begin(), e.values.end(), view.values.begin());
  }
  return params;
}

void store_memory(Checkpoint& ckpt, const ewc::StaticMemory& memory) {
  ckpt.set_array("theta0", {memory.theta0.size()}, memory.theta0.values());
  ckpt.set_array("fisher", {memory.fisher.size()}, memory.fisher);
}

ewc::StaticMemory load_memory(const Checkpoint& ckpt) {
  const auto layout = lm::Layout::for_config(parse_lm_config(ckpt.text("lm_config")));
  lm::Parameters theta0(layout, ckpt.array("theta0"));
  return ewc::consolidate(theta0, ckpt.array("fisher"));
}

void store_meta(Checkpoint& ckpt, const meta::MetaParams& meta, const meta::FeatureOptions& opts,
                std::string_view prefix) {
  std::ostringstream cfg;
  cfg << "feature_dim=" << meta.feature_dim() << " hidden=" << meta.hidden()
      << " use_memory=" << (opts.use_memory ? 1 : 0) << " use_fisher=" << (opts.use_fisher ? 1 : 0);
  ckpt.set_text(meta_name(prefix, "meta_config"), cfg.str());
  const auto data = meta.data();
  for (std::size_t k = 0; k < meta::MetaParams::kSegmentNames.size(); ++k) {
    const auto shape = meta.segment_shape(k);
    const std::size_t off = meta.segment_offset(k);
    ckpt.set_array(meta_name(prefix, meta::MetaParams::kSegmentNames[k]), shape,
                   std::vector<double>(data.begin() + static_cast<std::ptrdiff_t>(off),
                                       data.begin() + static_cast<std::ptrdiff_t>(off + element_count(shape))));
  }
}

bool has_meta(const Checkpoint& ckpt, std::string_view prefix) {
  return ckpt.has(meta_name(prefix, "meta_config"));
}

meta::FeatureOptions load_meta_options(const Checkpoint& ckpt, std::string_view prefix) {
  std::istringstream in(ckpt.text(meta_name(prefix, "meta_config")));
  std::string item;
  meta::FeatureOptions opts;
  while (in >> item) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("checkpoint: bad meta_config item '" + item + "'");
    const std::string key = item.substr(0, eq), value = item.substr(eq + 1);
    if (key == "use_memory") opts.use_memory = value == "1";
    else if (key == "use_fisher") opts.use_fisher = value == "1";
  }
  return opts;
}

meta::MetaParams load_meta(const Checkpoint& ckpt, std::string_view prefix) {
  const auto& w1 = ckpt.entry(meta_name(prefix, "meta_W1"));
  if (w1.shape.size() != 2) throw ConfigError("checkpoint: meta_W1 must be a matrix");
  meta::MetaParams meta(w1.shape[1], w1.shape[0]);
  auto data = meta.data();
  for (std::size_t k = 0; k < meta::MetaParams::kSegmentNames.size(); ++k) {
    const auto& e = ckpt.entry(meta_name(prefix, meta::MetaParams::kSegmentNames[k]));
    if (e.dtype != "f64" || e.shape != meta.segment_shape(k)) {
      throw ConfigError("checkpoint: meta segment '" + e.name + "' has the wrong shape");
    }
    std::copy(e.values.begin(), e.values.end(), data.begin() + static_cast<std::ptrdiff_t>(meta.segment_offset(k)));
  }
  return meta;
}

void store_vocab(Checkpoint& ckpt, const corpus::Vocabulary& vocab) { ckpt.set_text("vocab", vocab.serialize()); }

corpus::Vocabulary load_vocab(const Checkpoint& ckpt) { return corpus::Vocabulary::deserialize(ckpt.text("vocab")); }

}  // namespace dynalm::checkpoint
