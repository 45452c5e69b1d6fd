// dynalm: pretrain -> consolidate -> metatrain -> eval / compare.
//
//   dynalm <command> [--config PATH] [--key value ...]
//
// Any configuration key may be overridden on the command line. Exit codes:
// 0 success, 2 configuration error, 3 numerical abort, 4 I/O error.

#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "dynalm/config.hpp"
#include "dynalm/errors.hpp"
#include "dynalm/evalreport.hpp"
#include "dynalm/pipeline.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 4;

std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& args) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t k = 0; k < args.size(); ++k) {
    const std::string& a = args[k];
    if (a.rfind("--", 0) != 0 || a.size() < 3) throw dynalm::ConfigError("unexpected argument '" + a + "'");
    std::string key = a.substr(2), value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key.resize(eq);
    } else {
      if (k + 1 >= args.size()) throw dynalm::ConfigError("missing value for '" + a + "'");
      value = args[++k];
    }
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

int run(const std::string& command, const dynalm::config::RunConfig& cfg) {
  namespace pl = dynalm::pipeline;
  if (command == "gen-corpus") {
    const auto boundaries = pl::cmd_gen_corpus(cfg);
    std::cout << "wrote " << cfg.corpus_path.string() << " (" << boundaries.size()
              << " article boundaries in the test split)\n";
  } else if (command == "pretrain") {
    const auto r = pl::cmd_pretrain(cfg);
    for (const auto& e : r.log) {
      std::cout << "epoch " << e.epoch << " train " << e.train_loss << " valid " << e.valid_loss << " lr " << e.lr
                << '\n';
    }
    std::cout << "best validation loss " << r.best_valid_loss << " -> " << cfg.checkpoint_path().string() << '\n';
  } else if (command == "consolidate") {
    const auto memory = pl::cmd_consolidate(cfg);
    double total = 0.0;
    for (double f : memory.fisher) total += f;
    std::cout << "consolidated " << memory.fisher.size() << " coordinates, mean Fisher "
              << total / static_cast<double>(memory.fisher.size()) << '\n';
  } else if (command == "metatrain") {
    const auto r = pl::cmd_metatrain(cfg);
    auto summary = [](const char* name, const std::vector<dynalm::metatrain::TrainLogRow>& log) {
      if (log.empty()) return;
      std::cout << name << ": mean step loss " << log.front().mean_step_loss << " -> " << log.back().mean_step_loss
                << " over " << log.size() << " meta steps\n";
    };
    summary("meta_with_memory", r.memory_log);
    summary("meta", r.nomem_log);
  } else if (command == "eval") {
    const auto trace = pl::cmd_eval(cfg);
    std::cout << cfg.variant << " test perplexity " << dynalm::evalreport::perplexity(trace) << '\n';
  } else if (command == "compare") {
    const auto r = pl::cmd_compare(cfg);
    std::cout << cfg.variant_a << " perplexity " << dynalm::evalreport::perplexity(r.trace_a) << ", "
              << cfg.variant_b << " perplexity " << dynalm::evalreport::perplexity(r.trace_b) << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamical language model: meta-learned online weight updates"};
  app.require_subcommand(1);
  std::string config_path;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-corpus", "write the synthetic regime-switching corpus and its test-split boundaries"},
      {"pretrain", "train the LM with truncated BPTT and save the best-validation weights"},
      {"consolidate", "store theta0 and the diagonal Fisher in the checkpoint"},
      {"metatrain", "meta-train the update network (variants: memory, nomem, both)"},
      {"eval", "online evaluation of one variant on the test split"},
      {"compare", "perplexity gain and token loss differences between two variants"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "flat key = value configuration file");
    sub->allow_extras();
    sub->footer("Any setting can be overridden with --key value, e.g. --meta_lr 0.02.");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  const auto* sub = app.get_subcommands().front();
  try {
    const auto overrides = parse_overrides(sub->remaining());
    const auto cfg = dynalm::config::load(config_path, overrides);
    return run(sub->get_name(), cfg);
  } catch (const dynalm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const dynalm::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const dynalm::IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kExitIo;
  }
}
