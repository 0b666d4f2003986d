#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "tiltlab/transfer.hpp"

// Minimal-pair evaluation. A sentence is scored by masked pseudo
// log-likelihood: every non-special position is masked in turn and the log
// probability of the true token is summed. A pair is judged correct when
// the grammatical sentence outscores the ungrammatical one; ties count as
// incorrect. Paradigm accuracies average (unweighted) into phenomenon
// accuracies, and those into the overall score.

namespace tiltlab {

struct MinimalPair {
  std::string sentence_good;
  std::string sentence_bad;
  std::string paradigm_uid;
  std::string phenomenon;
};

// Official BLiMP field names: sentence_good, sentence_bad, UID,
// linguistics_term. One JSON object per line; blank lines are skipped.
// Missing or empty fields throw ParseError naming the file and line.
std::vector<MinimalPair> parse_suite_jsonl(const std::string& bytes, const std::string& filename);
std::vector<MinimalPair> load_suite(const std::vector<std::filesystem::path>& files);

struct PllOptions {
  bool length_normalize = false;  // divide by the number of scored positions
};

struct PllResult {
  double score = 0.0;
  std::size_t positions = 0;  // how many tokens were masked and scored
  bool truncated = false;     // sentence exceeded max_seq_len and was cut
};

PllResult pll_score_detail(const Checkpoint& ckpt, const std::string& sentence,
                           const PllOptions& opts = {});
double pll_score(const Checkpoint& ckpt, const std::string& sentence,
                 const PllOptions& opts = {});

enum class Verdict { correct, incorrect };

// correct iff pll(good) > pll(bad); an exact tie is incorrect.
Verdict judge_pair(const Checkpoint& ckpt, const MinimalPair& pair, const PllOptions& opts = {});

struct ParadigmResult {
  std::string uid;
  std::string phenomenon;
  std::size_t n_pairs = 0;
  std::size_t n_correct = 0;
  std::size_t n_ties = 0;
  std::size_t n_truncated = 0;  // pairs where either sentence was cut
  double accuracy = 0.0;
};

struct SuiteResult {
  std::string model_id;
  std::vector<ParadigmResult> paradigms;  // ordered by uid
  std::map<std::string, double> phenomenon_accuracy;
  double overall = 0.0;        // unweighted mean over phenomena
  double paradigm_mean = 0.0;  // unweighted mean over paradigms, also reported
};

// Scores every pair and aggregates. model_id defaults to
// "<variant>:<stage>" from the checkpoint manifest. Pairs sharing a uid
// must agree on the phenomenon label.
SuiteResult evaluate(const Checkpoint& ckpt, const std::vector<MinimalPair>& suite,
                     const PllOptions& opts = {}, const std::string& model_id = "");

struct LanguageEffectRow {
  std::string model_id;
  double overall = 0.0;  // points, 0-100
  double delta = 0.0;    // reference overall - model overall, points
  std::map<std::string, double> phenomenon_delta;
};

struct LanguageEffectReport {
  std::string reference_id;
  std::vector<LanguageEffectRow> rows;  // ascending by delta, then model_id
};

// Deltas of every result against the named reference. Throws ConfigError
// when reference_id is not among the results.
LanguageEffectReport language_effect(const std::vector<SuiteResult>& results,
                                     const std::string& reference_id);

// Round trip for the eval_result.json run artifact.
std::string suite_result_to_json(const SuiteResult& result);
SuiteResult suite_result_from_json(const std::string& json_text);  // throws ParseError

// Report surfaces. All emit deterministic text with trailing newlines.
std::string paradigm_csv(const SuiteResult& result);
std::string phenomenon_csv(const SuiteResult& result);
std::string comparison_markdown(const std::vector<SuiteResult>& results);
std::string language_effect_csv(const LanguageEffectReport& report);

}  // namespace tiltlab
