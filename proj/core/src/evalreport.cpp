#include "dynalm/evalreport.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "dynalm/errors.hpp"
#include "dynalm/io.hpp"
#include "dynalm/metatrain.hpp"

namespace dynalm::evalreport {

ModelVariant ModelVariant::static_lm(std::string name) {
  ModelVariant v;
  v.name = std::move(name);
  v.kind = VariantKind::kStatic;
  return v;
}

ModelVariant ModelVariant::dynamic_fixed(std::string name, meta::FixedGates gates,
                                         const ewc::StaticMemory* memory) {
  ModelVariant v;
  v.name = std::move(name);
  v.kind = VariantKind::kDynamicFixed;
  v.fixed = gates;
  v.memory = memory;
  return v;
}

ModelVariant ModelVariant::meta_only(std::string name, const meta::MetaParams& meta) {
  ModelVariant v;
  v.name = std::move(name);
  v.kind = VariantKind::kMeta;
  v.meta = &meta;
  return v;
}

ModelVariant ModelVariant::meta_with_memory(std::string name, const meta::MetaParams& meta,
                                            const ewc::StaticMemory& memory, bool use_fisher) {
  ModelVariant v;
  v.name = std::move(name);
  v.kind = VariantKind::kMetaWithMemory;
  v.meta = &meta;
  v.memory = &memory;
  v.use_fisher = use_fisher;
  return v;
}

meta::FeatureOptions ModelVariant::feature_options() const {
  meta::FeatureOptions opts;
  opts.use_memory = kind == VariantKind::kMetaWithMemory;
  opts.use_fisher = use_fisher;
  return opts;
}

void ModelVariant::validate() const {
  switch (kind) {
    case VariantKind::kStatic:
      break;
    case VariantKind::kDynamicFixed:
      if (fixed.z != 0.0 && memory == nullptr) {
        throw ConfigError("variant '" + name + "': a FLUSH gate needs a static memory");
      }
      break;
    case VariantKind::kMeta:
      if (meta == nullptr) throw ConfigError("variant '" + name + "' needs meta parameters");
      if (use_fisher) throw ConfigError("variant '" + name + "': Fisher features need a static memory");
      break;
    case VariantKind::kMetaWithMemory:
      if (meta == nullptr) throw ConfigError("variant '" + name + "' needs meta parameters");
      if (memory == nullptr) throw ConfigError("variant '" + name + "' needs a static memory");
      break;
  }
  if (meta && meta->feature_dim() != feature_options().dim()) {
    throw ConfigError("variant '" + name + "': meta network input does not match the feature set");
  }
}

EvalTrace online_eval_with_rule(const lm::Parameters& theta_start, std::span<const corpus::Batch> batches,
                                const UpdateRule& rule, bool record_tokens) {
  for (std::size_t k = 1; k < batches.size(); ++k) {
    if (batches[k].index != batches[k - 1].index + 1) throw ConfigError("evaluation batches are not contiguous");
  }
  EvalTrace trace;
  trace.tokens_per_batch = batches.empty() ? 0 : batches.front().inputs.size();
  lm::Parameters theta = theta_start;
  lm::HiddenState hidden = lm::HiddenState::zeros(theta.layout().config().hidden_dim);
  for (std::size_t k = 0; k < batches.size(); ++k) {
    const auto& batch = batches[k];
    lm::StepOutput scored = lm::evaluate(theta, batch, hidden);
    if (!std::isfinite(scored.mean_loss)) {
      throw NumericalError("non-finite loss at batch " + std::to_string(batch.index));
    }
    trace.batch_index.push_back(batch.index);
    trace.batch_loss.push_back(scored.mean_loss);
    if (record_tokens) trace.token_losses[batch.index] = scored.token_losses;
    if (rule) theta = rule(k, theta, batch, hidden, scored);
    hidden = std::move(scored.final_state);
  }
  return trace;
}

EvalTrace online_eval(const ModelVariant& variant, const lm::Parameters& theta_start,
                      std::span<const corpus::Batch> batches, bool record_tokens) {
  variant.validate();
  UpdateRule rule;
  switch (variant.kind) {
    case VariantKind::kStatic:
      break;
    case VariantKind::kDynamicFixed:
      rule = [&variant](std::size_t, const lm::Parameters& theta, const corpus::Batch& batch,
                        const lm::HiddenState& hidden, const lm::StepOutput&) {
        auto [out, grad] = lm::loss_and_grad(theta, batch, hidden);
        return meta::fixed_gate_update(theta, grad, variant.memory, variant.fixed);
      };
      break;
    case VariantKind::kMeta:
    case VariantKind::kMetaWithMemory: {
      const auto opts = variant.feature_options();
      rule = [&variant, opts](std::size_t, const lm::Parameters& theta, const corpus::Batch& batch,
                              const lm::HiddenState& hidden, const lm::StepOutput&) {
        return metatrain::meta_step(*variant.meta, theta, batch, hidden, variant.memory, opts).next;
      };
      break;
    }
  }
  return online_eval_with_rule(theta_start, batches, rule, record_tokens);
}

double perplexity(const EvalTrace& trace) {
  if (trace.size() == 0) throw ConfigError("perplexity of an empty trace");
  const double m = static_cast<double>(std::max<std::size_t>(trace.tokens_per_batch, 1));
  double weighted = 0.0, tokens = 0.0;
  for (double l : trace.batch_loss) {
    weighted += m * l;
    tokens += m;
  }
  return std::exp(weighted / tokens);
}

std::vector<double> moving_average(std::span<const double> values, std::size_t window) {
  if (window < 1) throw ConfigError("smoothing window must be at least 1");
  const std::size_t n = values.size();
  const std::size_t before = (window - 1) / 2, after = window / 2;
  std::vector<double> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t lo = k >= before ? k - before : 0;
    const std::size_t hi = std::min(n - 1, k + after);
    double s = 0.0;
    for (std::size_t q = lo; q <= hi; ++q) s += values[q];
    out[k] = s / static_cast<double>(hi - lo + 1);
  }
  return out;
}

GainSeries perplexity_gain(const EvalTrace& a, const EvalTrace& b, std::size_t smooth_window) {
  if (smooth_window < 1) throw ConfigError("smoothing window must be at least 1");
  std::map<std::size_t, double> b_loss;
  for (std::size_t k = 0; k < b.size(); ++k) b_loss.emplace(b.batch_index[k], b.batch_loss[k]);
  GainSeries g;
  for (std::size_t k = 0; k < a.size(); ++k) {
    auto it = b_loss.find(a.batch_index[k]);
    if (it == b_loss.end()) continue;
    g.batch_index.push_back(a.batch_index[k]);
    g.raw.push_back(std::exp(a.batch_loss[k]) - std::exp(it->second));
  }
  if (g.raw.empty()) throw ConfigError("traces have no batches in common");
  g.smoothed = moving_average(g.raw, smooth_window);
  return g;
}

TokenDiff token_loss_diff(const EvalTrace& a, const EvalTrace& b, std::span<const corpus::Batch> batches,
                          const corpus::Vocabulary& vocab, std::size_t target_batch) {
  auto ia = a.token_losses.find(target_batch);
  auto ib = b.token_losses.find(target_batch);
  if (ia == a.token_losses.end() || ib == b.token_losses.end()) {
    throw ConfigError("no per-token losses recorded for batch " + std::to_string(target_batch));
  }
  auto batch = std::find_if(batches.begin(), batches.end(),
                            [&](const corpus::Batch& x) { return x.index == target_batch; });
  if (batch == batches.end()) throw ConfigError("batch " + std::to_string(target_batch) + " out of range");
  if (ia->second.size() != batch->targets.size() || ib->second.size() != batch->targets.size()) {
    throw ConfigError("per-token losses do not match batch length");
  }
  TokenDiff d;
  d.batch = target_batch;
  d.loss_a = ia->second;
  d.loss_b = ib->second;
  for (std::size_t t = 0; t < batch->targets.size(); ++t) {
    d.tokens.push_back(vocab.token(batch->targets[t]));
    d.diff.push_back(d.loss_a[t] - d.loss_b[t]);
  }
  return d;
}

std::vector<std::size_t> article_ids(std::span<const std::size_t> batch_index,
                                     std::span<const std::size_t> boundaries) {
  std::vector<std::size_t> sorted(boundaries.begin(), boundaries.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> ids;
  ids.reserve(batch_index.size());
  for (auto b : batch_index) {
    ids.push_back(static_cast<std::size_t>(std::upper_bound(sorted.begin(), sorted.end(), b) - sorted.begin()));
  }
  return ids;
}

std::vector<std::string> write_report(const Report& report, const std::filesystem::path& out_dir) {
  using nlohmann::json;
  std::vector<std::string> files;
  json manifest;
  manifest["format"] = "dynalm-report v1";
  manifest["gain_convention"] = "gain = ppl_a - ppl_b; positive means b is locally better";

  json traces = json::array();
  for (const auto& [name, trace] : report.traces) {
    std::ostringstream csv;
    csv << "batch,loss,ppl\n";
    for (std::size_t k = 0; k < trace.size(); ++k) {
      csv << trace.batch_index[k] << ',' << io::format_double(trace.batch_loss[k]) << ','
          << io::format_double(std::exp(trace.batch_loss[k])) << '\n';
    }
    const std::string file = "trace_" + name + ".csv";
    io::write_file_atomic(out_dir / file, csv.str());
    files.push_back(file);
    traces.push_back({{"variant", name},
                      {"file", file},
                      {"batches", trace.size()},
                      {"perplexity", trace.size() ? perplexity(trace) : 0.0}});
  }
  manifest["traces"] = traces;

  json gains = json::array();
  for (const auto& gain : report.gains) {
    std::vector<std::size_t> articles;
    if (report.boundaries) articles = article_ids(gain.series.batch_index, *report.boundaries);
    std::ostringstream csv;
    csv << "batch,gain,smoothed" << (report.boundaries ? ",article" : "") << '\n';
    for (std::size_t k = 0; k < gain.series.raw.size(); ++k) {
      csv << gain.series.batch_index[k] << ',' << io::format_double(gain.series.raw[k]) << ','
          << io::format_double(gain.series.smoothed[k]);
      if (report.boundaries) csv << ',' << articles[k];
      csv << '\n';
    }
    const std::string file = "gain_" + gain.a + "_vs_" + gain.b + ".csv";
    io::write_file_atomic(out_dir / file, csv.str());
    files.push_back(file);
    gains.push_back({{"a", gain.a}, {"b", gain.b}, {"file", file}, {"batches", gain.series.raw.size()}});
  }
  manifest["gains"] = gains;
  if (report.gains.empty()) manifest["notes"].push_back("no gain series requested");

  json diffs = json::array();
  for (const auto& d : report.diffs) {
    std::ostringstream csv;
    csv << "pos,token,loss_a,loss_b,diff\n";
    for (std::size_t t = 0; t < d.tokens.size(); ++t) {
      csv << t << ',' << io::csv_field(d.tokens[t]) << ',' << io::format_double(d.loss_a[t]) << ','
          << io::format_double(d.loss_b[t]) << ',' << io::format_double(d.diff[t]) << '\n';
    }
    const std::string file = "tokens_" + std::to_string(d.batch) + ".csv";
    io::write_file_atomic(out_dir / file, csv.str());
    files.push_back(file);
    diffs.push_back({{"batch", d.batch}, {"file", file}});
  }
  manifest["token_diffs"] = diffs;

  json cfg = json::object();
  for (const auto& [k, v] : report.run_config) cfg[k] = v;
  manifest["config"] = cfg;
  manifest["files"] = files;

  io::write_file_atomic(out_dir / "report.json", manifest.dump(2) + "\n");
  files.push_back("report.json");
  return files;
}

EvalTrace read_trace_csv(const std::filesystem::path& path, std::size_t tokens_per_batch) {
  const std::string text = io::read_file(path);
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "batch,loss,ppl") {
    throw ConfigError("'" + path.string() + "' is not a trace CSV");
  }
  EvalTrace trace;
  trace.tokens_per_batch = tokens_per_batch;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto fields = io::parse_csv_line(line);
    if (fields.size() != 3) throw ConfigError("malformed trace row '" + line + "'");
    trace.batch_index.push_back(std::stoull(fields[0]));
    trace.batch_loss.push_back(std::stod(fields[1]));
  }
  return trace;
}

std::vector<std::size_t> read_boundaries(const std::filesystem::path& path) {
  const std::string text = io::read_file(path);
  std::istringstream in(text);
  std::string line;
  std::vector<std::size_t> out;
  while (std::getline(in, line)) {
    const auto start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos || line[start] == '#') continue;
    try {
      out.push_back(std::stoull(line.substr(start)));
    } catch (const std::exception&) {
      throw ConfigError("bad boundary line '" + line + "' in " + path.string());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace dynalm::evalreport
