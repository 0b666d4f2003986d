#include "tiltlab/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "tiltlab/errors.hpp"
#include "tiltlab/rng.hpp"

namespace tiltlab {

namespace {

std::string lower_ascii(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t start = i;
    while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    if (i > start) out.push_back(s.substr(start, i - start));
  }
  return out;
}

// RFC 4180 field splitter that reports the physical line each record starts
// on. Handles quoted fields with doubled quotes and embedded newlines.
struct CsvRow {
  std::vector<std::string> fields;
  std::size_t line = 0;
};

std::vector<CsvRow> parse_csv(const std::string& bytes) {
  std::vector<CsvRow> rows;
  std::size_t line = 1;
  std::size_t i = 0;
  const std::size_t n = bytes.size();
  while (i < n) {
    CsvRow row;
    row.line = line;
    bool row_done = false;
    while (!row_done) {
      std::string field;
      if (i < n && bytes[i] == '"') {
        ++i;
        while (true) {
          if (i >= n) throw ParseError("unterminated quoted field", row.line);
          char c = bytes[i];
          if (c == '"') {
            if (i + 1 < n && bytes[i + 1] == '"') {
              field += '"';
              i += 2;
            } else {
              ++i;
              break;
            }
          } else {
            if (c == '\n') ++line;
            field += c;
            ++i;
          }
        }
        if (i < n && bytes[i] != ',' && bytes[i] != '\n' && bytes[i] != '\r') {
          throw ParseError("unexpected character after closing quote", row.line);
        }
      } else {
        while (i < n && bytes[i] != ',' && bytes[i] != '\n' && bytes[i] != '\r') {
          field += bytes[i];
          ++i;
        }
      }
      row.fields.push_back(std::move(field));
      if (i >= n) {
        row_done = true;
      } else if (bytes[i] == ',') {
        ++i;
      } else {
        if (bytes[i] == '\r') ++i;
        if (i < n && bytes[i] == '\n') {
          ++i;
          ++line;
        }
        row_done = true;
      }
    }
    rows.push_back(std::move(row));
  }
  // a trailing newline produces no phantom row because the outer loop stops at n
  return rows;
}

}  // namespace

std::string register_name(Register r) {
  switch (r) {
    case Register::cds: return "cds";
    case Register::conversational_ads: return "conversational_ads";
    case Register::scripted_ads: return "scripted_ads";
  }
  return "cds";
}

bool is_valid_utf8(const std::string& bytes) {
  std::size_t i = 0;
  const std::size_t n = bytes.size();
  while (i < n) {
    unsigned char c = static_cast<unsigned char>(bytes[i]);
    std::size_t len;
    std::uint32_t cp;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + len > n) return false;
    for (std::size_t k = 1; k < len; ++k) {
      unsigned char cc = static_cast<unsigned char>(bytes[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    if (len == 2 && cp < 0x80) return false;
    if (len == 3 && cp < 0x800) return false;
    if (len == 4 && cp < 0x10000) return false;
    if (cp > 0x10FFFF) return false;
    if (cp >= 0xD800 && cp <= 0xDFFF) return false;
    i += len;
  }
  return true;
}

std::string trim_ws(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::vector<UtteranceRecord> parse_transcript_csv(const std::string& bytes) {
  if (!is_valid_utf8(bytes)) throw ParseError("input is not valid UTF-8");
  auto rows = parse_csv(bytes);
  if (rows.empty()) throw ParseError("missing header row");

  const std::vector<std::string> wanted = {"corpus_name", "transcript_id", "target_child_age",
                                           "speaker_role", "utterance_text"};
  std::unordered_map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < rows[0].fields.size(); ++i) {
    col[trim_ws(rows[0].fields[i])] = i;
  }
  for (const auto& name : wanted) {
    if (!col.count(name)) throw ParseError("header is missing column '" + name + "'", rows[0].line);
  }
  const std::size_t width = rows[0].fields.size();

  std::vector<UtteranceRecord> records;
  records.reserve(rows.size() - 1);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.fields.size() != width) {
      throw ParseError("expected " + std::to_string(width) + " columns, got " +
                           std::to_string(row.fields.size()),
                       row.line);
    }
    UtteranceRecord rec;
    rec.corpus_name = row.fields[col["corpus_name"]];
    rec.transcript_id = row.fields[col["transcript_id"]];
    const std::string age_text = trim_ws(row.fields[col["target_child_age"]]);
    if (!age_text.empty()) {
      std::size_t pos = 0;
      double age = 0;
      try {
        age = std::stod(age_text, &pos);
      } catch (const std::exception&) {
        throw ParseError("unparsable age '" + age_text + "'", row.line);
      }
      if (pos != age_text.size()) throw ParseError("unparsable age '" + age_text + "'", row.line);
      if (age < 0) throw ParseError("negative age " + age_text, row.line);
      rec.target_child_age = age;
    }
    rec.speaker_role = lower_ascii(trim_ws(row.fields[col["speaker_role"]])) == "target_child"
                           ? SpeakerRole::target_child
                           : SpeakerRole::other;
    rec.utterance_text = row.fields[col["utterance_text"]];
    records.push_back(std::move(rec));
  }
  return records;
}

CleanCorpus clean_cds(const std::vector<UtteranceRecord>& records, const CleaningRules& rules) {
  CleanCorpus out;
  out.reg = Register::cds;
  if (!records.empty()) out.language = records.front().corpus_name;
  for (const auto& rec : records) {
    if (rules.drop_target_child && rec.speaker_role == SpeakerRole::target_child) continue;
    if (rec.target_child_age && *rec.target_child_age > rules.max_age_months) continue;
    std::string text = trim_ws(rec.utterance_text);
    if (rules.drop_empty && text.empty()) continue;
    out.utterances.push_back(std::move(text));
  }
  return out;
}

std::vector<UtteranceRecord> age_order(std::vector<UtteranceRecord> records) {
  std::stable_sort(records.begin(), records.end(),
                   [](const UtteranceRecord& a, const UtteranceRecord& b) {
                     if (a.target_child_age && b.target_child_age)
                       return *a.target_child_age < *b.target_child_age;
                     return a.target_child_age.has_value() && !b.target_child_age.has_value();
                   });
  return records;
}

namespace {

// A leading "@NAME:" or "ALL-CAPS-NAME:" chunk identifying the speaker.
bool is_speaker_tag(const std::string& token) {
  if (token.size() < 2 || token.back() != ':') return false;
  std::string name = token.substr(0, token.size() - 1);
  if (name[0] == '@') return name.size() > 1;
  bool has_letter = false;
  for (unsigned char c : name) {
    if (std::isupper(c)) {
      has_letter = true;
    } else if (c == '-' || c == '_' || std::isdigit(c)) {
      // allowed separators
    } else {
      return false;
    }
  }
  return has_letter;
}

}  // namespace

CleanCorpus clean_coca(const std::vector<std::string>& lines, const CocaRules& rules) {
  CleanCorpus out;
  out.reg = Register::conversational_ads;
  std::unordered_set<std::string> fillers;
  for (const auto& f : rules.filler_words) fillers.insert(lower_ascii(f));
  for (const auto& line : lines) {
    auto tokens = split_ws(line);
    std::vector<std::string> kept;
    bool in_bracket = false;
    char close_char = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const std::string& tok = tokens[i];
      if (in_bracket) {
        if (!tok.empty() && tok.back() == close_char) in_bracket = false;
        continue;
      }
      if (i == 0 && rules.strip_speaker_tags && is_speaker_tag(tok)) continue;
      if (rules.drop_at_codes && tok.rfind("@!", 0) == 0) continue;
      if (rules.drop_bracketed && !tok.empty() && (tok.front() == '[' || tok.front() == '(')) {
        close_char = tok.front() == '[' ? ']' : ')';
        if (tok.back() != close_char) in_bracket = true;
        continue;
      }
      if (fillers.count(lower_ascii(tok))) continue;
      kept.push_back(tok);
    }
    if (kept.empty()) continue;
    std::string joined;
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (i) joined += ' ';
      joined += kept[i];
    }
    out.utterances.push_back(std::move(joined));
  }
  return out;
}

CleanCorpus sample_scripted(const std::vector<std::string>& lines, std::size_t n,
                            std::uint64_t seed) {
  if (n > lines.size()) {
    throw std::invalid_argument("sample_scripted: requested " + std::to_string(n) +
                                " lines but only " + std::to_string(lines.size()) +
                                " are available");
  }
  // partial Fisher-Yates over indices, then restore original order
  std::vector<std::size_t> idx(lines.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  CleanCorpus out;
  out.reg = Register::scripted_ads;
  out.utterances.reserve(n);
  for (std::size_t i : idx) out.utterances.push_back(lines[i]);
  return out;
}

CorpusStats compute_stats(const CleanCorpus& corpus,
                          const std::optional<std::set<std::string>>& child_ids) {
  CorpusStats stats;
  stats.n_utterances = corpus.utterances.size();
  std::unordered_set<std::string> vocab;
  for (const auto& utt : corpus.utterances) {
    for (auto& tok : split_ws(lower_ascii(utt))) {
      ++stats.total_tokens;
      vocab.insert(std::move(tok));
    }
  }
  stats.vocabulary = vocab.size();
  stats.avg_sentence_length =
      stats.n_utterances ? static_cast<double>(stats.total_tokens) /
                               static_cast<double>(stats.n_utterances)
                         : 0.0;
  if (child_ids) stats.n_children = child_ids->size();
  return stats;
}

std::string stats_to_json(const CorpusStats& stats) {
  nlohmann::json j;
  j["vocabulary"] = stats.vocabulary;
  j["total_tokens"] = stats.total_tokens;
  j["avg_sentence_length"] = stats.avg_sentence_length;
  if (stats.n_children) j["n_children"] = *stats.n_children;
  j["n_utterances"] = stats.n_utterances;
  return j.dump(2) + "\n";
}

CorpusStats stats_from_json(const std::string& json) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad stats JSON: ") + e.what());
  }
  CorpusStats stats;
  stats.vocabulary = j.at("vocabulary").get<std::size_t>();
  stats.total_tokens = j.at("total_tokens").get<std::size_t>();
  stats.avg_sentence_length = j.at("avg_sentence_length").get<double>();
  stats.n_utterances = j.at("n_utterances").get<std::size_t>();
  if (j.contains("n_children")) stats.n_children = j["n_children"].get<std::size_t>();
  return stats;
}

std::vector<std::string> read_text_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  std::string bytes = buf.str();
  if (!is_valid_utf8(bytes)) throw ParseError(path.string() + " is not valid UTF-8");
  std::vector<std::string> lines;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= bytes.size(); ++i) {
    if (i == bytes.size() || bytes[i] == '\n') {
      std::size_t end = i;
      if (end > start && bytes[end - 1] == '\r') --end;
      if (i < bytes.size() || end > start) lines.push_back(bytes.substr(start, end - start));
      start = i + 1;
    }
  }
  return lines;
}

void write_text_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& line : lines) out << line << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace tiltlab
