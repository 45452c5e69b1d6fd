#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "dynalm/checkpoint.hpp"
#include "dynalm/config.hpp"
#include "dynalm/corpus.hpp"
#include "dynalm/evalreport.hpp"
#include "dynalm/lm.hpp"
#include "dynalm/metatrain.hpp"

// End-to-end commands: pretrain -> consolidate -> metatrain -> eval/compare.
// Each command reads and rewrites the checkpoint named by the config.
namespace dynalm::pipeline {

inline constexpr const char* kNoMemoryPrefix = "nomem_";

struct Data {
  corpus::Vocabulary vocab;
  std::vector<corpus::Batch> train;
  std::vector<corpus::Batch> valid;
  std::vector<corpus::Batch> test;
};

// Reads the corpus, builds (or reuses) the vocabulary, splits and batches.
Data prepare_data(const config::RunConfig& cfg, const corpus::Vocabulary* vocab = nullptr);

struct PretrainOptions {
  double lr = 1.0;
  std::size_t epochs = 10;
  double clip = 0.25;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
  double lr = 0.0;
};

struct PretrainResult {
  lm::Parameters best;
  double best_valid_loss = 0.0;
  std::vector<EpochLog> log;
};

// Mean batch loss over a stream with the hidden state threaded from zero.
double stream_loss(const lm::Parameters& params, const std::vector<corpus::Batch>& batches);

// Truncated BPTT over consecutive batches with SGD and global-norm clipping;
// the learning rate halves whenever validation loss fails to improve. Returns
// the best-validation weights.
PretrainResult pretrain_lm(const lm::Parameters& init, const std::vector<corpus::Batch>& train,
                           const std::vector<corpus::Batch>& valid, const PretrainOptions& opts);

PretrainResult cmd_pretrain(const config::RunConfig& cfg);
ewc::StaticMemory cmd_consolidate(const config::RunConfig& cfg);

struct MetatrainOutcome {
  std::vector<metatrain::TrainLogRow> memory_log;
  std::vector<metatrain::TrainLogRow> nomem_log;
};
MetatrainOutcome cmd_metatrain(const config::RunConfig& cfg);

// Owns everything a ModelVariant points into.
struct VariantBundle {
  lm::Parameters theta_start;
  ewc::StaticMemory memory;
  meta::MetaParams meta;
  evalreport::ModelVariant variant;
};

// Names: static, dynamic_fixed, meta (two-level), meta_with_memory (three-level).
std::unique_ptr<VariantBundle> make_variant(const checkpoint::Checkpoint& ckpt, const config::RunConfig& cfg,
                                            const std::string& name);

evalreport::EvalTrace cmd_eval(const config::RunConfig& cfg);

struct CompareOutcome {
  evalreport::EvalTrace trace_a;
  evalreport::EvalTrace trace_b;
  evalreport::GainSeries gain;
  std::vector<evalreport::TokenDiff> diffs;
};
CompareOutcome cmd_compare(const config::RunConfig& cfg);

// Writes the synthetic regime-switching corpus to corpus_path and the test
// split's article-start batch indices to corpus_path + ".boundaries".
std::vector<std::size_t> cmd_gen_corpus(const config::RunConfig& cfg);

}  // namespace dynalm::pipeline
