#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tiltlab/transfer.hpp"

// Experiment configuration: a flat key = value text file. '#' starts a
// comment, blank lines are skipped, keys may appear once. The documented
// key list is the union of ExperimentPlan, ModelConfig (model.*), and the
// two TrainConfigs (stage1.*, stage2.*); anything else is rejected by name.
//
// Keys:
//   variant                 tilt_transfer | random_baseline | from_scratch
//   l1_corpus, l2_corpus    paths to cleaned one-utterance-per-line text
//   l1_language, l2_language  labels for stats and reports
//   l1_register, l2_register  cds | conversational_ads | scripted_ads
//   seed                    experiment seed (also the default stage seed)
//   bpe_min_frequency       merge threshold for tokenizer training
//   reuse_l1_tokenizer      keep the L1 vocabulary at transfer
//   run_dir, run_id         output directory and its label
//   suite                   comma-separated BLiMP jsonl paths (optional)
//   model.{n_layers,n_heads,d_model,d_ff,max_seq_len,vocab_size,
//          tie_output_to_embeddings,init_std,layer_norm_eps}
//   stageN.{learning_rate,batch_size,n_epochs,max_steps,mask_prob,seed,
//           adam_beta1,adam_beta2,adam_eps,weight_decay}   N in {1,2}
//
// Relative corpus/suite paths resolve against $TILTLAB_DATA_ROOT when that
// variable is set, otherwise against the config file's directory.

namespace tiltlab {

struct KeyValueConfig {
  std::map<std::string, std::string> values;
  std::map<std::string, std::size_t> lines;  // where each key was set
};

KeyValueConfig parse_config(const std::string& bytes, const std::string& filename);

// Every key resolve_run_config accepts. The CLI mirrors these as --key
// overrides on the run subcommand.
const std::set<std::string>& known_config_keys();

// Canonical form: sorted "key = value" lines, trailing newline.
std::string serialize_config(const KeyValueConfig& config);

// A fully resolved run: the plan plus everything cmd_run needs around it.
struct RunConfig {
  ExperimentPlan plan;
  std::string run_id;
  std::filesystem::path run_dir;
  std::vector<std::filesystem::path> suite_files;
  std::string l1_language;  // empty unless tilt_transfer
  std::string l2_language;
  Register l1_register = Register::cds;
  Register l2_register = Register::conversational_ads;
  KeyValueConfig resolved;  // every key explicit; reproduces this run
};

// Validates keys and values, loads the corpora, applies the seed override,
// and materializes defaults into `resolved`. config_dir anchors relative
// paths (see above). Throws ConfigError naming the offending key.
RunConfig resolve_run_config(const KeyValueConfig& config,
                             const std::filesystem::path& config_dir,
                             std::optional<std::uint64_t> seed_override = std::nullopt);

Register parse_register(const std::string& name);  // throws ConfigError

}  // namespace tiltlab
