#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

// Transcript ingestion and cleaning. CHILDES-style exports arrive as CSV
// (one utterance per row); COCA and Wikipedia arrive as plain text (one
// sentence per line). Cleaning produces age-ordered, speaker-filtered text
// ready for tokenizer training.

namespace tiltlab {

enum class SpeakerRole { target_child, other };
enum class Register { cds, conversational_ads, scripted_ads };

std::string register_name(Register r);

struct UtteranceRecord {
  std::string corpus_name;
  std::string transcript_id;
  std::optional<double> target_child_age;  // months
  SpeakerRole speaker_role = SpeakerRole::other;
  std::string utterance_text;
};

struct CleaningRules {
  double max_age_months = 72.0;
  bool drop_target_child = true;
  bool drop_empty = true;
};

struct CleanCorpus {
  std::string language;
  Register reg = Register::cds;
  std::vector<std::string> utterances;
};

struct CorpusStats {
  std::size_t vocabulary = 0;
  std::size_t total_tokens = 0;
  double avg_sentence_length = 0.0;
  std::optional<std::size_t> n_children;  // unknown for ADS corpora
  std::size_t n_utterances = 0;
};

// Spoken-corpus cleanup knobs. The paper-level categories (disfluencies,
// annotations, speaker tags) are fixed; the filler word list is data-driven
// and therefore configurable.
struct CocaRules {
  std::vector<std::string> filler_words = {"uh", "um", "er"};
  bool drop_at_codes = true;       // tokens starting with "@!"
  bool drop_bracketed = true;      // [laughter], (pause), including multi-token spans
  bool strip_speaker_tags = true;  // leading @NAME: or ALL-CAPS-NAME: prefixes
};

// Parses a CSV export with header columns corpus_name, transcript_id,
// target_child_age, speaker_role, utterance_text (any order; extra columns
// are ignored). Quoted fields follow RFC 4180, including embedded commas,
// doubled quotes, and newlines. A speaker_role equal to "target_child"
// (case-insensitive) maps to target_child; anything else maps to other.
// Throws ParseError with the offending physical line on malformed rows,
// non-numeric or negative ages, and invalid UTF-8.
std::vector<UtteranceRecord> parse_transcript_csv(const std::string& bytes);

// Keeps utterances from non-child speakers, drops rows that are empty after
// whitespace trimming, and drops rows older than rules.max_age_months.
// Stored text is whitespace-trimmed. Input order is preserved.
CleanCorpus clean_cds(const std::vector<UtteranceRecord>& records, const CleaningRules& rules);

// Stable sort by target_child_age ascending; records without an age go last.
std::vector<UtteranceRecord> age_order(std::vector<UtteranceRecord> records);

// Applies the spoken-register cleanup: strips speaker-tag prefixes, removes
// @!-codes, bracketed annotation spans, and filler words, and drops lines
// that end up empty.
CleanCorpus clean_coca(const std::vector<std::string>& lines, const CocaRules& rules = {});

// Uniform sample of exactly n distinct lines, without replacement, keeping
// the original relative order. Identical (lines, n, seed) give identical
// output. Throws std::invalid_argument when n exceeds the line count.
CleanCorpus sample_scripted(const std::vector<std::string>& lines, std::size_t n,
                            std::uint64_t seed);

// Whitespace-token statistics with ASCII lowercasing. n_children is filled
// only when child_ids is supplied. An empty corpus yields all zeros.
CorpusStats compute_stats(const CleanCorpus& corpus,
                          const std::optional<std::set<std::string>>& child_ids = std::nullopt);

// Flat JSON object with the CorpusStats field names; n_children is omitted
// when absent. Deterministic key order.
std::string stats_to_json(const CorpusStats& stats);
CorpusStats stats_from_json(const std::string& json);

// One utterance per line, trailing newline, UTF-8. read_text_lines validates
// the encoding and drops a trailing empty segment only.
std::vector<std::string> read_text_lines(const std::filesystem::path& path);
void write_text_lines(const std::filesystem::path& path, const std::vector<std::string>& lines);

// Strict UTF-8 validation (rejects overlongs, surrogates, > U+10FFFF).
bool is_valid_utf8(const std::string& bytes);

std::string trim_ws(const std::string& s);

}  // namespace tiltlab
