#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dynalm/corpus.hpp"
#include "dynalm/ewc.hpp"
#include "dynalm/lm.hpp"
#include "dynalm/metalearner.hpp"

namespace dynalm::checkpoint {

// File layout:
//   DYNALM1\n
//   <name> <dtype> <shape> <offset>\n      one manifest line per entry
//   \n
//   <body>
// dtype is f64 (little-endian IEEE doubles) or utf8; shape is dims joined by
// 'x' (the byte length for utf8). Offsets are relative to the body start and
// entries are stored back to back in manifest order.
class Checkpoint {
 public:
  struct Entry {
    std::string name;
    std::string dtype;
    std::vector<std::size_t> shape;
    std::vector<double> values;
    std::string text;
  };

  bool has(std::string_view name) const;
  const Entry& entry(std::string_view name) const;
  const std::vector<Entry>& entries() const { return entries_; }

  // Replaces an existing entry in place or appends a new one.
  void set_array(std::string name, std::vector<std::size_t> shape, std::vector<double> values);
  void set_text(std::string name, std::string text);

  const std::vector<double>& array(std::string_view name) const;
  const std::string& text(std::string_view name) const;

  std::string serialize() const;
  static Checkpoint parse(std::string_view bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  Entry& upsert(std::string name);
  std::vector<Entry> entries_;
};

// LM weights under the layout segment names plus an "lm_config" text entry.
void store_params(Checkpoint& ckpt, const lm::Parameters& params);
lm::Parameters load_params(const Checkpoint& ckpt);

void store_memory(Checkpoint& ckpt, const ewc::StaticMemory& memory);
ewc::StaticMemory load_memory(const Checkpoint& ckpt);

// prefix "" stores the memory-enabled meta-learner under meta_W1 ... meta_si;
// other prefixes are prepended ("nomem_meta_W1").
void store_meta(Checkpoint& ckpt, const meta::MetaParams& meta, const meta::FeatureOptions& opts,
                std::string_view prefix = "");
bool has_meta(const Checkpoint& ckpt, std::string_view prefix = "");
meta::MetaParams load_meta(const Checkpoint& ckpt, std::string_view prefix = "");
meta::FeatureOptions load_meta_options(const Checkpoint& ckpt, std::string_view prefix = "");

void store_vocab(Checkpoint& ckpt, const corpus::Vocabulary& vocab);
corpus::Vocabulary load_vocab(const Checkpoint& ckpt);

}  // namespace dynalm::checkpoint
