#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dynalm/corpus.hpp"
#include "dynalm/ewc.hpp"
#include "dynalm/lm.hpp"
#include "dynalm/metalearner.hpp"

namespace dynalm::evalreport {

enum class VariantKind { kStatic, kDynamicFixed, kMeta, kMetaWithMemory };

// One of the compared models. Pointers are non-owning and must outlive the
// evaluation.
struct ModelVariant {
  std::string name;
  VariantKind kind = VariantKind::kStatic;
  meta::FixedGates fixed;
  const meta::MetaParams* meta = nullptr;
  const ewc::StaticMemory* memory = nullptr;
  bool use_fisher = false;

  static ModelVariant static_lm(std::string name);
  // memory is only needed when the fixed gates include a FLUSH term.
  static ModelVariant dynamic_fixed(std::string name, meta::FixedGates gates,
                                    const ewc::StaticMemory* memory = nullptr);
  static ModelVariant meta_only(std::string name, const meta::MetaParams& meta);
  static ModelVariant meta_with_memory(std::string name, const meta::MetaParams& meta,
                                       const ewc::StaticMemory& memory, bool use_fisher = false);

  meta::FeatureOptions feature_options() const;
  void validate() const;
};

struct EvalTrace {
  std::size_t tokens_per_batch = 0;
  std::vector<std::size_t> batch_index;
  std::vector<double> batch_loss;  // mean loss in nats, recorded before the update
  std::map<std::size_t, std::vector<double>> token_losses;

  std::size_t size() const { return batch_index.size(); }
};

// Called after batch k is scored; returns the weights for batch k + 1.
using UpdateRule = std::function<lm::Parameters(std::size_t k, const lm::Parameters& theta,
                                                const corpus::Batch& batch, const lm::HiddenState& hidden,
                                                const lm::StepOutput& scored)>;

// Generic online pass: score with the current weights, record, then update.
EvalTrace online_eval_with_rule(const lm::Parameters& theta_start, std::span<const corpus::Batch> batches,
                                const UpdateRule& rule, bool record_tokens);

EvalTrace online_eval(const ModelVariant& variant, const lm::Parameters& theta_start,
                      std::span<const corpus::Batch> batches, bool record_tokens);

// exp of the token-weighted mean batch loss.
double perplexity(const EvalTrace& trace);

// gain_i = exp(L_i^A) - exp(L_i^B); positive means A is locally worse (B has
// the lower perplexity). smoothed is a centered moving average truncated at
// the series edges.
struct GainSeries {
  std::vector<std::size_t> batch_index;
  std::vector<double> raw;
  std::vector<double> smoothed;
};

GainSeries perplexity_gain(const EvalTrace& a, const EvalTrace& b, std::size_t smooth_window);

std::vector<double> moving_average(std::span<const double> values, std::size_t window);

struct TokenDiff {
  std::size_t batch = 0;
  std::vector<std::string> tokens;  // decoded targets
  std::vector<double> loss_a;
  std::vector<double> loss_b;
  std::vector<double> diff;  // loss_a - loss_b
};

TokenDiff token_loss_diff(const EvalTrace& a, const EvalTrace& b, std::span<const corpus::Batch> batches,
                          const corpus::Vocabulary& vocab, std::size_t target_batch);

// Article id per batch: number of boundaries <= batch index.
std::vector<std::size_t> article_ids(std::span<const std::size_t> batch_index,
                                     std::span<const std::size_t> boundaries);

struct NamedGain {
  std::string a;
  std::string b;
  GainSeries series;
};

struct Report {
  std::vector<std::pair<std::string, EvalTrace>> traces;
  std::vector<NamedGain> gains;
  std::vector<TokenDiff> diffs;
  std::optional<std::vector<std::size_t>> boundaries;
  std::vector<std::pair<std::string, std::string>> run_config;
};

// Emits trace_<name>.csv, gain_<a>_vs_<b>.csv, tokens_<batch>.csv and a
// report.json manifest. Returns written file names in order.
std::vector<std::string> write_report(const Report& report, const std::filesystem::path& out_dir);

// Reads "batch,loss,ppl" rows back into a trace.
EvalTrace read_trace_csv(const std::filesystem::path& path, std::size_t tokens_per_batch);

// One batch index per line; blank lines and '#' comments are skipped.
std::vector<std::size_t> read_boundaries(const std::filesystem::path& path);

}  // namespace dynalm::evalreport
