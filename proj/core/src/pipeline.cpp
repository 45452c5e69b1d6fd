#include "dynalm/pipeline.hpp"

#include <cmath>
#include <fstream>
#include <iostream>

#include "dynalm/errors.hpp"
#include "dynalm/ewc.hpp"
#include "dynalm/io.hpp"
#include "dynalm/synthetic.hpp"

namespace dynalm::pipeline {

namespace {

checkpoint::Checkpoint load_checkpoint(const config::RunConfig& cfg) {
  const auto path = cfg.checkpoint_path();
  if (!std::filesystem::exists(path)) throw IoError("checkpoint '" + path.string() + "' does not exist");
  return checkpoint::Checkpoint::load(path);
}

void require(const checkpoint::Checkpoint& ckpt, std::initializer_list<const char*> names, const std::string& why) {
  for (const char* n : names) {
    if (!ckpt.has(n)) throw ConfigError("checkpoint has no array '" + std::string(n) + "' (needed by " + why + ")");
  }
}

class LogWriter {
 public:
  explicit LogWriter(const std::filesystem::path& path) : path_(path) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    out_.open(path, std::ios::trunc);
    if (!out_) throw IoError("cannot open '" + path.string() + "' for writing");
    out_ << "meta_step,meta_loss,mean_step_loss,meta_grad_norm,theta_drift,wall_ms\n";
    out_.flush();
  }

  void append(const metatrain::TrainLogRow& r) {
    out_ << r.meta_step << ',' << io::format_double(r.meta_loss) << ',' << io::format_double(r.mean_step_loss)
         << ',' << io::format_double(r.meta_grad_norm) << ',' << io::format_double(r.theta_drift) << ','
         << io::format_double(r.wall_ms) << '\n';
    out_.flush();
    if (!out_) throw IoError("failed writing '" + path_.string() + "'");
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

metatrain::TrainResult train_variant(const config::RunConfig& cfg, const ewc::StaticMemory& memory,
                                     const std::vector<corpus::Batch>& train, bool with_memory,
                                     const std::filesystem::path& log_path) {
  metatrain::UnrollConfig ucfg = cfg.unroll;
  ucfg.seed = cfg.seed;
  ucfg.features.use_memory = with_memory;
  if (!with_memory) {
    ucfg.features.use_fisher = false;
    ucfg.ewc_lambda = 0.0;
  }
  meta::InitOptions init{with_memory ? cfg.meta_init_copy_bias : cfg.nomem_init_copy_bias,
                         cfg.meta_init_flush_bias, cfg.meta_init_update_scale};
  const auto meta0 = meta::init_meta(ucfg.features.dim(), cfg.meta_hidden, cfg.seed, init);
  LogWriter log(log_path);
  return metatrain::train_meta(meta0, memory.theta0, memory, train, ucfg,
                               [&log](const metatrain::TrainLogRow& r) { log.append(r); });
}

}  // namespace

Data prepare_data(const config::RunConfig& cfg, const corpus::Vocabulary* vocab) {
  if (cfg.corpus_path.empty()) throw ConfigError("corpus_path is not set");
  const std::string text = io::read_file(cfg.corpus_path);
  Data data;
  data.vocab = vocab ? *vocab : corpus::build_vocab(text, cfg.vocab_mode, cfg.vocab_max_size);
  const auto tokens = corpus::encode(text, data.vocab);
  const auto split = corpus::split_corpus(tokens, cfg.split_train, cfg.split_valid, cfg.split_test);
  data.train = corpus::make_batches(split.train, cfg.batch_tokens);
  data.valid = corpus::make_batches(split.valid, cfg.batch_tokens);
  data.test = corpus::make_batches(split.test, cfg.batch_tokens);
  return data;
}

double stream_loss(const lm::Parameters& params, const std::vector<corpus::Batch>& batches) {
  if (batches.empty()) throw ConfigError("cannot evaluate an empty batch stream");
  lm::HiddenState h = lm::HiddenState::zeros(params.layout().config().hidden_dim);
  double total = 0.0;
  for (const auto& b : batches) {
    auto out = lm::evaluate(params, b, h);
    total += out.mean_loss;
    h = std::move(out.final_state);
  }
  return total / static_cast<double>(batches.size());
}

PretrainResult pretrain_lm(const lm::Parameters& init, const std::vector<corpus::Batch>& train,
                           const std::vector<corpus::Batch>& valid, const PretrainOptions& opts) {
  PretrainResult result{init, stream_loss(init, valid), {}};
  lm::Parameters params = init;
  double lr = opts.lr;
  const std::size_t H = init.layout().config().hidden_dim;
  for (std::size_t epoch = 1; epoch <= opts.epochs; ++epoch) {
    lm::HiddenState h = lm::HiddenState::zeros(H);
    double total = 0.0;
    for (const auto& b : train) {
      auto [out, grad] = lm::loss_and_grad(params, b, h);
      metatrain::clip_global_norm(grad.data(), opts.clip);
      for (std::size_t j = 0; j < params.size(); ++j) params[j] -= lr * grad[j];
      total += out.mean_loss;
      h = std::move(out.final_state);
    }
    const double train_loss = total / static_cast<double>(train.size());
    const double valid_loss = stream_loss(params, valid);
    if (!std::isfinite(train_loss) || !std::isfinite(valid_loss)) {
      throw NumericalError("pretraining diverged at epoch " + std::to_string(epoch));
    }
    result.log.push_back({epoch, train_loss, valid_loss, lr});
    if (valid_loss < result.best_valid_loss) {
      result.best_valid_loss = valid_loss;
      result.best = params;
    } else {
      lr *= 0.5;
    }
  }
  return result;
}

PretrainResult cmd_pretrain(const config::RunConfig& cfg) {
  const Data data = prepare_data(cfg);
  const auto init = lm::init_params(cfg.lm_config(data.vocab.size()), cfg.seed);
  auto result = pretrain_lm(init, data.train, data.valid, {cfg.pretrain_lr, cfg.pretrain_epochs, cfg.pretrain_clip});

  std::string log = "epoch,train_loss,valid_loss,lr\n";
  for (const auto& e : result.log) {
    log += std::to_string(e.epoch) + ',' + io::format_double(e.train_loss) + ',' + io::format_double(e.valid_loss) +
           ',' + io::format_double(e.lr) + '\n';
  }
  io::write_file_atomic(cfg.out_dir / "pretrain.csv", log);

  checkpoint::Checkpoint ckpt;
  ckpt.set_text("config_pretrain", cfg.to_text());
  checkpoint::store_vocab(ckpt, data.vocab);
  checkpoint::store_params(ckpt, result.best);
  ckpt.save(cfg.checkpoint_path());
  return result;
}

ewc::StaticMemory cmd_consolidate(const config::RunConfig& cfg) {
  auto ckpt = load_checkpoint(cfg);
  require(ckpt, {"lm_config", "vocab", "embed"}, "consolidate");
  const auto params = checkpoint::load_params(ckpt);
  const auto vocab = checkpoint::load_vocab(ckpt);
  const Data data = prepare_data(cfg, &vocab);
  std::span<const corpus::Batch> batches = data.train;
  if (cfg.fisher_batches > 0 && cfg.fisher_batches < batches.size()) batches = batches.first(cfg.fisher_batches);
  auto fisher = ewc::estimate_fisher_diag(params, batches, lm::HiddenState::zeros(params.layout().config().hidden_dim));
  auto memory = ewc::consolidate(params, std::move(fisher));
  ckpt.set_text("config_consolidate", cfg.to_text());
  checkpoint::store_memory(ckpt, memory);
  ckpt.save(cfg.checkpoint_path());
  return memory;
}

MetatrainOutcome cmd_metatrain(const config::RunConfig& cfg) {
  auto ckpt = load_checkpoint(cfg);
  require(ckpt, {"theta0", "fisher"}, "metatrain (run consolidate first)");
  const auto vocab = checkpoint::load_vocab(ckpt);
  const auto memory = checkpoint::load_memory(ckpt);
  const Data data = prepare_data(cfg, &vocab);

  MetatrainOutcome outcome;
  if (cfg.meta_variants != "nomem") {
    auto r = train_variant(cfg, memory, data.train, true, cfg.out_dir / "meta_train.csv");
    meta::FeatureOptions opts;
    opts.use_fisher = cfg.unroll.features.use_fisher;
    checkpoint::store_meta(ckpt, r.meta, opts);
    outcome.memory_log = std::move(r.log);
  }
  if (cfg.meta_variants != "memory") {
    auto r = train_variant(cfg, memory, data.train, false, cfg.out_dir / "meta_train_nomem.csv");
    meta::FeatureOptions opts;
    opts.use_memory = false;
    checkpoint::store_meta(ckpt, r.meta, opts, kNoMemoryPrefix);
    outcome.nomem_log = std::move(r.log);
  }
  ckpt.set_text("config_metatrain", cfg.to_text());
  ckpt.save(cfg.checkpoint_path());
  return outcome;
}

std::unique_ptr<VariantBundle> make_variant(const checkpoint::Checkpoint& ckpt, const config::RunConfig& cfg,
                                            const std::string& name) {
  auto bundle = std::make_unique<VariantBundle>();
  bundle->theta_start = checkpoint::load_params(ckpt);
  if (name == "static") {
    bundle->variant = evalreport::ModelVariant::static_lm(name);
  } else if (name == "dynamic_fixed") {
    const ewc::StaticMemory* memory = nullptr;
    if (cfg.dynamic_gates.z != 0.0) {
      require(ckpt, {"theta0", "fisher"}, "dynamic_fixed with a FLUSH gate");
      bundle->memory = checkpoint::load_memory(ckpt);
      memory = &bundle->memory;
    }
    bundle->variant = evalreport::ModelVariant::dynamic_fixed(name, cfg.dynamic_gates, memory);
  } else if (name == "meta") {
    if (!checkpoint::has_meta(ckpt, kNoMemoryPrefix)) {
      throw ConfigError("checkpoint has no array 'nomem_meta_W1' (needed by variant meta; run metatrain)");
    }
    bundle->meta = checkpoint::load_meta(ckpt, kNoMemoryPrefix);
    bundle->variant = evalreport::ModelVariant::meta_only(name, bundle->meta);
  } else if (name == "meta_with_memory") {
    if (!checkpoint::has_meta(ckpt)) {
      throw ConfigError("checkpoint has no array 'meta_W1' (needed by variant meta_with_memory; run metatrain)");
    }
    require(ckpt, {"theta0", "fisher"}, "variant meta_with_memory");
    bundle->memory = checkpoint::load_memory(ckpt);
    bundle->meta = checkpoint::load_meta(ckpt);
    const auto opts = checkpoint::load_meta_options(ckpt);
    bundle->theta_start = bundle->memory.theta0;
    bundle->variant = evalreport::ModelVariant::meta_with_memory(name, bundle->meta, bundle->memory, opts.use_fisher);
  } else {
    throw ConfigError("unknown variant '" + name + "' (expected static, dynamic_fixed, meta, meta_with_memory)");
  }
  bundle->variant.validate();
  return bundle;
}

evalreport::EvalTrace cmd_eval(const config::RunConfig& cfg) {
  const auto ckpt = load_checkpoint(cfg);
  auto bundle = make_variant(ckpt, cfg, cfg.variant);
  const auto vocab = checkpoint::load_vocab(ckpt);
  const Data data = prepare_data(cfg, &vocab);
  auto trace = evalreport::online_eval(bundle->variant, bundle->theta_start, data.test, false);
  evalreport::Report report;
  report.traces.emplace_back(cfg.variant, trace);
  report.run_config = cfg.to_pairs();
  evalreport::write_report(report, cfg.out_dir);
  return trace;
}

CompareOutcome cmd_compare(const config::RunConfig& cfg) {
  const auto ckpt = load_checkpoint(cfg);
  auto a = make_variant(ckpt, cfg, cfg.variant_a);
  auto b = make_variant(ckpt, cfg, cfg.variant_b);
  const auto vocab = checkpoint::load_vocab(ckpt);
  const Data data = prepare_data(cfg, &vocab);

  CompareOutcome out;
  out.trace_a = evalreport::online_eval(a->variant, a->theta_start, data.test, true);
  out.trace_b = evalreport::online_eval(b->variant, b->theta_start, data.test, true);
  out.gain = evalreport::perplexity_gain(out.trace_a, out.trace_b, cfg.smooth_window);
  for (auto batch : cfg.token_batches) {
    out.diffs.push_back(evalreport::token_loss_diff(out.trace_a, out.trace_b, data.test, vocab, batch));
  }

  evalreport::Report report;
  report.traces.emplace_back(cfg.variant_a, out.trace_a);
  if (cfg.variant_b != cfg.variant_a) report.traces.emplace_back(cfg.variant_b, out.trace_b);
  report.gains.push_back({cfg.variant_a, cfg.variant_b, out.gain});
  report.diffs = out.diffs;
  if (!cfg.boundaries_path.empty()) report.boundaries = evalreport::read_boundaries(cfg.boundaries_path);
  report.run_config = cfg.to_pairs();
  evalreport::write_report(report, cfg.out_dir);
  return out;
}

std::vector<std::size_t> cmd_gen_corpus(const config::RunConfig& cfg) {
  if (cfg.corpus_path.empty()) throw ConfigError("corpus_path is not set");
  synthetic::RegimeCorpusOptions opts;
  opts.articles = cfg.gen_articles;
  opts.article_chars = cfg.gen_article_chars;
  opts.common_words = cfg.gen_common_words;
  opts.topic_words = cfg.gen_topic_words;
  opts.common_fraction = cfg.gen_common_fraction;
  opts.seed = cfg.seed;
  const auto corpus = synthetic::generate_regime_corpus(opts);

  corpus::TokenSequence positions;
  positions.ids.assign(corpus.text.size(), 0);
  const auto split = corpus::split_corpus(positions, cfg.split_train, cfg.split_valid, cfg.split_test);
  const std::size_t test_start = split.train.length() + split.valid.length();
  const auto boundaries =
      synthetic::test_boundaries(corpus.article_offsets, test_start, split.test.length(), cfg.batch_tokens);

  io::write_file_atomic(cfg.corpus_path, corpus.text);
  std::string lines;
  for (auto b : boundaries) lines += std::to_string(b) + '\n';
  auto bpath = cfg.corpus_path;
  bpath += ".boundaries";
  io::write_file_atomic(bpath, lines);
  return boundaries;
}

}  // namespace dynalm::pipeline
