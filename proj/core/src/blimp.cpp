#include "tiltlab/blimp.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <stdexcept>
#include <thread>

#include <json.hpp>

namespace tiltlab {

namespace {

std::string fmt(double x, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, x);
  return buf;
}

std::string require_string(const nlohmann::json& j, const char* key, const std::string& file,
                           std::size_t line) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_string() || it->get<std::string>().empty()) {
    throw ParseError(file + ": missing or empty field \"" + std::string(key) + "\"", line);
  }
  return it->get<std::string>();
}

double mean(const std::vector<double>& xs) {
  double s = 0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

// One reusable forward context per checkpoint: the parameter leaves are
// built once and shared by every scoring call (including across threads;
// forward passes only read them).
struct Scorer {
  const Checkpoint& ckpt;
  MlmGraph<float> graph;

  explicit Scorer(const Checkpoint& c) : ckpt(c), graph(checked_graph(c)) {}

  static MlmGraph<float> checked_graph(const Checkpoint& c) {
    c.validate();
    return make_mlm_graph<float>(c.params, {});
  }

  PllResult score(const std::string& sentence, const PllOptions& opts) const {
    PllResult out;
    TokenSeq ids = encode(ckpt.tokenizer, sentence);
    const std::size_t max_len = ckpt.params.config.max_seq_len;
    if (ids.size() > max_len) {
      // same truncation rule as encode(text, max_len): keep bos, cut the
      // tail, keep eos as the final id
      ids.resize(max_len);
      ids.back() = ckpt.tokenizer.eos_id;
      out.truncated = true;
    }

    std::vector<std::size_t> positions;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!ckpt.tokenizer.is_special(ids[i])) positions.push_back(i);
    }
    out.positions = positions.size();
    if (positions.empty()) return out;

    const std::size_t b = positions.size();
    const std::size_t t = ids.size();
    Tensor<TokenId> batch({b, t});
    Tensor<std::uint8_t> pad_mask({b, t}, std::vector<std::uint8_t>(b * t, 1));
    for (std::size_t r = 0; r < b; ++r) {
      for (std::size_t i = 0; i < t; ++i) batch.at({r, i}) = ids[i];
      batch.at({r, positions[r]}) = ckpt.tokenizer.mask_id;
    }

    TensorF logits = mlm_logits(graph, batch, pad_mask).value();
    const std::size_t v = ckpt.params.config.vocab_size;
    double total = 0;
    for (std::size_t r = 0; r < b; ++r) {
      const float* row = logits.data() + (r * t + positions[r]) * v;
      double mx = row[0];
      for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      double sum = 0;
      for (std::size_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
      const double lse = mx + std::log(sum);
      total += static_cast<double>(row[ids[positions[r]]]) - lse;
    }
    out.score = opts.length_normalize ? total / static_cast<double>(b) : total;
    return out;
  }
};

}  // namespace

std::vector<MinimalPair> parse_suite_jsonl(const std::string& bytes, const std::string& filename) {
  std::vector<MinimalPair> pairs;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= bytes.size()) {
    std::size_t end = bytes.find('\n', start);
    if (end == std::string::npos) end = bytes.size();
    ++line_no;
    std::string line = bytes.substr(start, end - start);
    start = end + 1;
    if (end == bytes.size() && line.empty()) break;
    if (trim_ws(line).empty()) continue;

    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      throw ParseError(filename + ": invalid JSON record", line_no);
    }
    MinimalPair pair;
    pair.sentence_good = require_string(j, "sentence_good", filename, line_no);
    pair.sentence_bad = require_string(j, "sentence_bad", filename, line_no);
    pair.paradigm_uid = require_string(j, "UID", filename, line_no);
    pair.phenomenon = require_string(j, "linguistics_term", filename, line_no);
    if (pair.sentence_good == pair.sentence_bad) {
      throw ParseError(filename + ": sentence_good equals sentence_bad", line_no);
    }
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

std::vector<MinimalPair> load_suite(const std::vector<std::filesystem::path>& files) {
  std::vector<MinimalPair> pairs;
  for (const auto& path : files) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError(path.string() + ": cannot open");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    auto chunk = parse_suite_jsonl(bytes, path.string());
    pairs.insert(pairs.end(), std::make_move_iterator(chunk.begin()),
                 std::make_move_iterator(chunk.end()));
  }
  // a uid must mean one phenomenon, even across files
  std::map<std::string, std::string> phenomenon_of;
  for (const auto& p : pairs) {
    auto [it, inserted] = phenomenon_of.emplace(p.paradigm_uid, p.phenomenon);
    if (!inserted && it->second != p.phenomenon) {
      throw ParseError("paradigm " + p.paradigm_uid + " appears under two phenomena: \"" +
                       it->second + "\" and \"" + p.phenomenon + "\"");
    }
  }
  return pairs;
}

PllResult pll_score_detail(const Checkpoint& ckpt, const std::string& sentence,
                           const PllOptions& opts) {
  return Scorer(ckpt).score(sentence, opts);
}

double pll_score(const Checkpoint& ckpt, const std::string& sentence, const PllOptions& opts) {
  return pll_score_detail(ckpt, sentence, opts).score;
}

Verdict judge_pair(const Checkpoint& ckpt, const MinimalPair& pair, const PllOptions& opts) {
  Scorer scorer(ckpt);
  const double good = scorer.score(pair.sentence_good, opts).score;
  const double bad = scorer.score(pair.sentence_bad, opts).score;
  return good > bad ? Verdict::correct : Verdict::incorrect;
}

SuiteResult evaluate(const Checkpoint& ckpt, const std::vector<MinimalPair>& suite,
                     const PllOptions& opts, const std::string& model_id) {
  if (suite.empty()) throw std::invalid_argument("evaluate: suite is empty");
  Scorer scorer(ckpt);

  struct Outcome {
    bool correct = false;
    bool tie = false;
    bool truncated = false;
  };
  std::vector<Outcome> outcomes(suite.size());
  auto score_range = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const PllResult good = scorer.score(suite[i].sentence_good, opts);
      const PllResult bad = scorer.score(suite[i].sentence_bad, opts);
      outcomes[i] = {good.score > bad.score, good.score == bad.score,
                     good.truncated || bad.truncated};
    }
  };

  // pairs are independent against the read-only graph; the reduction below
  // stays in suite order regardless of how scoring was split
  const std::size_t hw = std::thread::hardware_concurrency();
  const std::size_t n_threads = std::min<std::size_t>(hw ? hw : 1, suite.size() / 16);
  if (n_threads > 1) {
    std::vector<std::thread> workers;
    const std::size_t chunk = (suite.size() + n_threads - 1) / n_threads;
    for (std::size_t w = 0; w < n_threads; ++w) {
      const std::size_t lo = w * chunk;
      const std::size_t hi = std::min(suite.size(), lo + chunk);
      if (lo < hi) workers.emplace_back(score_range, lo, hi);
    }
    for (auto& th : workers) th.join();
  } else {
    score_range(0, suite.size());
  }

  std::map<std::string, ParadigmResult> by_uid;
  for (std::size_t i = 0; i < suite.size(); ++i) {
    ParadigmResult& p = by_uid[suite[i].paradigm_uid];
    if (p.n_pairs == 0) {
      p.uid = suite[i].paradigm_uid;
      p.phenomenon = suite[i].phenomenon;
    } else if (p.phenomenon != suite[i].phenomenon) {
      throw std::invalid_argument("evaluate: paradigm " + p.uid +
                                  " carries two phenomenon labels");
    }
    p.n_pairs += 1;
    p.n_correct += outcomes[i].correct ? 1 : 0;
    p.n_ties += outcomes[i].tie ? 1 : 0;
    p.n_truncated += outcomes[i].truncated ? 1 : 0;
  }

  SuiteResult result;
  result.model_id = model_id.empty()
                        ? ckpt.manifest.variant + ":" + ckpt.manifest.stage
                        : model_id;
  std::map<std::string, std::vector<double>> by_phenomenon;
  std::vector<double> paradigm_accs;
  for (auto& [uid, p] : by_uid) {
    p.accuracy = static_cast<double>(p.n_correct) / static_cast<double>(p.n_pairs);
    by_phenomenon[p.phenomenon].push_back(p.accuracy);
    paradigm_accs.push_back(p.accuracy);
    result.paradigms.push_back(p);
  }
  std::vector<double> phenomenon_accs;
  for (const auto& [name, accs] : by_phenomenon) {
    result.phenomenon_accuracy[name] = mean(accs);
    phenomenon_accs.push_back(result.phenomenon_accuracy[name]);
  }
  result.overall = mean(phenomenon_accs);
  result.paradigm_mean = mean(paradigm_accs);
  return result;
}

LanguageEffectReport language_effect(const std::vector<SuiteResult>& results,
                                     const std::string& reference_id) {
  const SuiteResult* reference = nullptr;
  for (const auto& r : results) {
    if (r.model_id == reference_id) {
      reference = &r;
      break;
    }
  }
  if (!reference) {
    throw ConfigError("language_effect: reference model \"" + reference_id +
                      "\" is not among the results");
  }

  LanguageEffectReport report;
  report.reference_id = reference_id;
  for (const auto& r : results) {
    LanguageEffectRow row;
    row.model_id = r.model_id;
    row.overall = 100.0 * r.overall;
    row.delta = 100.0 * (reference->overall - r.overall);
    for (const auto& [name, ref_acc] : reference->phenomenon_accuracy) {
      auto it = r.phenomenon_accuracy.find(name);
      if (it != r.phenomenon_accuracy.end()) {
        row.phenomenon_delta[name] = 100.0 * (ref_acc - it->second);
      }
    }
    report.rows.push_back(std::move(row));
  }
  std::sort(report.rows.begin(), report.rows.end(), [](const auto& a, const auto& b) {
    return a.delta != b.delta ? a.delta < b.delta : a.model_id < b.model_id;
  });
  return report;
}

std::string suite_result_to_json(const SuiteResult& result) {
  nlohmann::json paradigms = nlohmann::json::array();
  for (const auto& p : result.paradigms) {
    paradigms.push_back({{"uid", p.uid},
                         {"phenomenon", p.phenomenon},
                         {"n_pairs", p.n_pairs},
                         {"n_correct", p.n_correct},
                         {"n_ties", p.n_ties},
                         {"n_truncated", p.n_truncated},
                         {"accuracy", p.accuracy}});
  }
  nlohmann::json j = {{"model_id", result.model_id},
                      {"overall", result.overall},
                      {"paradigm_mean", result.paradigm_mean},
                      {"phenomenon_accuracy", result.phenomenon_accuracy},
                      {"paradigms", paradigms}};
  return j.dump(2) + "\n";
}

SuiteResult suite_result_from_json(const std::string& json_text) {
  const auto j = nlohmann::json::parse(json_text, nullptr, false);
  if (j.is_discarded()) throw ParseError("suite result: invalid JSON");
  SuiteResult result;
  try {
    result.model_id = j.at("model_id").get<std::string>();
    result.overall = j.at("overall").get<double>();
    result.paradigm_mean = j.at("paradigm_mean").get<double>();
    result.phenomenon_accuracy =
        j.at("phenomenon_accuracy").get<std::map<std::string, double>>();
    for (const auto& p : j.at("paradigms")) {
      ParadigmResult pr;
      pr.uid = p.at("uid").get<std::string>();
      pr.phenomenon = p.at("phenomenon").get<std::string>();
      pr.n_pairs = p.at("n_pairs").get<std::size_t>();
      pr.n_correct = p.at("n_correct").get<std::size_t>();
      pr.n_ties = p.at("n_ties").get<std::size_t>();
      pr.n_truncated = p.at("n_truncated").get<std::size_t>();
      pr.accuracy = p.at("accuracy").get<double>();
      result.paradigms.push_back(std::move(pr));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("suite result: " + std::string(e.what()));
  }
  return result;
}

std::string paradigm_csv(const SuiteResult& result) {
  std::string out = "uid,phenomenon,n_pairs,accuracy,n_ties,n_truncated\n";
  for (const auto& p : result.paradigms) {
    out += p.uid + "," + p.phenomenon + "," + std::to_string(p.n_pairs) + "," +
           fmt(p.accuracy, 6) + "," + std::to_string(p.n_ties) + "," +
           std::to_string(p.n_truncated) + "\n";
  }
  return out;
}

std::string phenomenon_csv(const SuiteResult& result) {
  std::map<std::string, std::size_t> counts;
  for (const auto& p : result.paradigms) counts[p.phenomenon] += 1;
  std::string out = "phenomenon,n_paradigms,accuracy\n";
  for (const auto& [name, acc] : result.phenomenon_accuracy) {
    out += name + "," + std::to_string(counts[name]) + "," + fmt(acc, 6) + "\n";
  }
  out += "overall," + std::to_string(result.paradigms.size()) + "," + fmt(result.overall, 6) +
         "\n";
  return out;
}

std::string comparison_markdown(const std::vector<SuiteResult>& results) {
  std::set<std::string> phenomena;
  for (const auto& r : results) {
    for (const auto& [name, acc] : r.phenomenon_accuracy) phenomena.insert(name);
  }
  std::string out = "| phenomenon |";
  for (const auto& r : results) out += " " + r.model_id + " |";
  out += "\n|---|";
  for (std::size_t i = 0; i < results.size(); ++i) out += "---:|";
  out += "\n";
  auto row = [&](const std::string& label, auto value_of) {
    out += "| " + label + " |";
    for (const auto& r : results) {
      auto v = value_of(r);
      out += v.second ? " " + fmt(100.0 * v.first, 2) + " |" : " - |";
    }
    out += "\n";
  };
  for (const auto& name : phenomena) {
    row(name, [&](const SuiteResult& r) {
      auto it = r.phenomenon_accuracy.find(name);
      return it != r.phenomenon_accuracy.end() ? std::pair{it->second, true}
                                               : std::pair{0.0, false};
    });
  }
  row("overall (phenomenon mean)", [](const SuiteResult& r) { return std::pair{r.overall, true}; });
  row("overall (paradigm mean)",
      [](const SuiteResult& r) { return std::pair{r.paradigm_mean, true}; });
  return out;
}

std::string language_effect_csv(const LanguageEffectReport& report) {
  std::set<std::string> phenomena;
  for (const auto& r : report.rows) {
    for (const auto& [name, d] : r.phenomenon_delta) phenomena.insert(name);
  }
  std::string out = "model,overall,delta";
  for (const auto& name : phenomena) out += "," + name;
  out += "\n";
  for (const auto& r : report.rows) {
    out += r.model_id + "," + fmt(r.overall, 4) + "," + fmt(r.delta, 4);
    for (const auto& name : phenomena) {
      auto it = r.phenomenon_delta.find(name);
      out += ",";
      if (it != r.phenomenon_delta.end()) out += fmt(it->second, 4);
    }
    out += "\n";
  }
  return out;
}

}  // namespace tiltlab
