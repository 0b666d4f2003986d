#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tiltlab/commands.hpp"
#include "tiltlab/config.hpp"
#include "tiltlab/corpus.hpp"

// Subcommands: prepare-corpus, run, report, inspect-checkpoint. The run
// subcommand exposes every config key as a --key override; --seed overrides
// the experiment seed specifically (explicit stageN.seed keys still win).

namespace {

std::vector<std::string> split_commas(const std::string& value) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= value.size()) {
    std::size_t end = value.find(',', start);
    if (end == std::string::npos) end = value.size();
    const std::string item = tiltlab::trim_ws(value.substr(start, end - start));
    if (!item.empty()) out.push_back(item);
    if (end == value.size()) break;
    start = end + 1;
  }
  return out;
}

void add_prepare(CLI::App& app) {
  auto* cmd = app.add_subcommand(
      "prepare-corpus", "Clean a raw corpus into one-utterance-per-line text plus a stats JSON");

  struct Args {
    std::string kind;
    std::string input;
    std::string output;
    tiltlab::PrepareOptions options;
    bool keep_target_child = false;
    bool keep_empty = false;
    bool keep_at_codes = false;
    bool keep_bracketed = false;
    bool keep_speaker_tags = false;
    std::string filler_words = "uh,um,er";
  };
  auto args = std::make_shared<Args>();

  cmd->add_option("--kind", args->kind, "input format: cds_csv, coca, or scripted")->required();
  cmd->add_option("--input", args->input, "raw corpus file")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--output", args->output, "cleaned text destination")->required();
  cmd->add_option("--language", args->options.language, "language label for the stats")
      ->capture_default_str();

  cmd->add_option("--max-age-months", args->options.cds_rules.max_age_months,
                  "cds_csv: drop rows with an older target child")
      ->capture_default_str();
  cmd->add_flag("--keep-target-child", args->keep_target_child,
                "cds_csv: keep the child's own utterances");
  cmd->add_flag("--keep-empty", args->keep_empty, "cds_csv: keep whitespace-only rows");

  cmd->add_option("--filler-words", args->filler_words, "coca: comma-separated words to drop")
      ->capture_default_str();
  cmd->add_flag("--keep-at-codes", args->keep_at_codes, "coca: keep @!-codes");
  cmd->add_flag("--keep-bracketed", args->keep_bracketed, "coca: keep [bracketed] annotations");
  cmd->add_flag("--keep-speaker-tags", args->keep_speaker_tags,
                "coca: keep leading speaker-tag prefixes");

  cmd->add_option("--sample-n", args->options.sample_n, "scripted: sentences to sample")
      ->capture_default_str();
  cmd->add_option("--sample-seed", args->options.sample_seed, "scripted: sampling seed")
      ->capture_default_str();

  cmd->callback([args] {
    args->options.kind = tiltlab::parse_corpus_kind(args->kind);
    args->options.cds_rules.drop_target_child = !args->keep_target_child;
    args->options.cds_rules.drop_empty = !args->keep_empty;
    args->options.coca_rules.filler_words = split_commas(args->filler_words);
    args->options.coca_rules.drop_at_codes = !args->keep_at_codes;
    args->options.coca_rules.drop_bracketed = !args->keep_bracketed;
    args->options.coca_rules.strip_speaker_tags = !args->keep_speaker_tags;

    const auto stats = tiltlab::cmd_prepare_corpus(args->input, args->options, args->output);
    std::cout << "wrote " << args->output << ": " << stats.n_utterances << " utterances, "
              << stats.total_tokens << " tokens, vocabulary " << stats.vocabulary;
    if (stats.n_children) std::cout << ", " << *stats.n_children << " children";
    std::cout << "\n";
  });
}

void add_run(CLI::App& app) {
  auto* cmd = app.add_subcommand("run", "Execute an experiment config end to end");

  struct Args {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    bool quiet = false;
    std::map<std::string, std::string> overrides;
  };
  auto args = std::make_shared<Args>();

  cmd->add_option("config", args->config_path, "experiment config file")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", args->seed, "override the experiment seed");
  cmd->add_flag("--quiet", args->quiet, "suppress progress output");
  for (const auto& key : tiltlab::known_config_keys()) {
    if (key == "seed") continue;  // --seed already covers it
    cmd->add_option_function<std::string>(
           "--" + key, [args, key](const std::string& value) { args->overrides[key] = value; },
           "override the " + key + " config key")
        ->group("Config overrides");
  }

  cmd->callback([args] {
    tiltlab::LogFn log;
    if (!args->quiet) log = [](const std::string& line) { std::cout << line << "\n"; };
    tiltlab::cmd_run(args->config_path, args->seed, log, args->overrides);
  });
}

void add_report(CLI::App& app) {
  auto* cmd = app.add_subcommand(
      "report", "Compare runs: per-phenomenon table plus language-effect deltas");

  struct Args {
    std::vector<std::string> run_dirs;
    std::string reference;
    std::string out_dir;
  };
  auto args = std::make_shared<Args>();

  cmd->add_option("runs", args->run_dirs, "run directories written by `tiltlab run`")
      ->required();
  cmd->add_option("--out", args->out_dir, "directory for comparison.md and language_effect.csv")
      ->required();
  cmd->add_option("--reference", args->reference,
                  "run id the deltas subtract from (default: first column)");

  cmd->callback([args] {
    std::vector<std::filesystem::path> dirs(args->run_dirs.begin(), args->run_dirs.end());
    tiltlab::cmd_report(dirs, args->reference, args->out_dir,
                        [](const std::string& line) { std::cerr << line << "\n"; });
    std::cout << "wrote " << args->out_dir << "/comparison.md and language_effect.csv\n";
  });
}

void add_inspect(CLI::App& app) {
  auto* cmd =
      app.add_subcommand("inspect-checkpoint", "Verify digests and print a checkpoint summary");
  auto path = std::make_shared<std::string>();
  cmd->add_option("checkpoint", *path, "checkpoint directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  cmd->callback([path] { tiltlab::cmd_inspect_checkpoint(*path, std::cout); });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tiltlab: sequential language transfer experiments on small masked LMs"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "tiltlab 0.1.0");

  add_prepare(app);
  add_run(app);
  add_report(app);
  add_inspect(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
