#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tiltlab/config.hpp"
#include "tiltlab/corpus.hpp"
#include "tiltlab/transfer.hpp"

// The command surface behind the tiltlab binary. Each cmd_* function is the
// whole subcommand minus argv parsing, so tests can drive them directly.
//
// A run directory is laid out as:
//   config.resolved      canonical key = value snapshot; re-running it
//                        reproduces every artifact byte for byte
//   run.json             run id, variant, languages, registers, seed
//   stats_l1.json        corpus statistics (stats_l1 only for tilt_transfer)
//   stats_l2.json
//   loss_stage1.csv      run,step,epoch,loss (stage files exist only for
//   loss_stage2.csv      stages the variant actually executes)
//   checkpoint/          final model (see checkpoint_io.hpp)
//   checkpoint_stage1/   pre-transfer model, tilt_transfer only
//   eval_paradigms.csv   present when the config names a suite
//   eval_phenomena.csv
//   eval_result.json
//   report.md
//   FAILED               written with the error message when a stage throws

namespace tiltlab {

enum class CorpusKind { cds_csv, coca, scripted };

CorpusKind parse_corpus_kind(const std::string& name);  // throws ConfigError

struct PrepareOptions {
  CorpusKind kind = CorpusKind::cds_csv;
  std::string language = "english";
  CleaningRules cds_rules;      // cds_csv
  CocaRules coca_rules;         // coca
  std::size_t sample_n = 80000;  // scripted
  std::uint64_t sample_seed = 0;
};

// Cleans `input` according to options.kind and writes the result as
// one-utterance-per-line text at output_path, with the statistics JSON
// beside it at output_path + ".stats.json". Both writes go through a
// temporary file and a rename, so a failure leaves no partial outputs.
CorpusStats cmd_prepare_corpus(const std::filesystem::path& input, const PrepareOptions& options,
                               const std::filesystem::path& output_path);

// Progress sink for the long-running commands; never called when empty.
using LogFn = std::function<void(const std::string&)>;

// Runs the experiment described by the config file (which must set run_dir)
// and writes the artifact tree above. `overrides` are applied on top of the
// file's keys before validation, so CLI --key flags behave exactly like
// editing the config. On any failure after the run directory exists, a
// FAILED marker file holding the message is left next to whatever partial
// artifacts were produced, and the exception is rethrown.
ExperimentResult cmd_run(const std::filesystem::path& config_path,
                         std::optional<std::uint64_t> seed_override = std::nullopt,
                         const LogFn& log = {},
                         const std::map<std::string, std::string>& overrides = {});

// Cross-run comparison over directories written by cmd_run. Reads run.json
// and eval_result.json from each; a directory missing either is skipped with
// a warning through `log`. Writes comparison.md and language_effect.csv
// under out_dir, with model columns ordered scripted ADS, conversational
// ADS, CDS/transfer, random baseline, then by language label and run id.
// An empty reference_id picks the first run in that order.
void cmd_report(const std::vector<std::filesystem::path>& run_dirs,
                const std::string& reference_id, const std::filesystem::path& out_dir,
                const LogFn& log = {});

// Reads the checkpoint (verifying every digest) and prints a summary:
// provenance, model shape, parameter and tokenizer sizes, and the per-tensor
// digest table.
void cmd_inspect_checkpoint(const std::filesystem::path& ckpt_dir, std::ostream& out);

}  // namespace tiltlab
