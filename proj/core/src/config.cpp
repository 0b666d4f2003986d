#include "tiltlab/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <set>
#include <stdexcept>

#include "tiltlab/corpus.hpp"

namespace tiltlab {

namespace fs = std::filesystem;

const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k = {"variant",      "l1_corpus",    "l2_corpus",
                               "l1_language",  "l2_language",  "l1_register",
                               "l2_register",  "seed",         "bpe_min_frequency",
                               "reuse_l1_tokenizer", "run_dir", "run_id",
                               "suite"};
    for (const char* f : {"n_layers", "n_heads", "d_model", "d_ff", "max_seq_len", "vocab_size",
                          "tie_output_to_embeddings", "init_std", "layer_norm_eps"}) {
      k.insert(std::string("model.") + f);
    }
    for (const char* stage : {"stage1.", "stage2."}) {
      for (const char* f : {"learning_rate", "batch_size", "n_epochs", "max_steps", "mask_prob",
                            "seed", "adam_beta1", "adam_beta2", "adam_eps", "weight_decay"}) {
        k.insert(stage + std::string(f));
      }
    }
    return k;
  }();
  return keys;
}

namespace {

class Values {
 public:
  explicit Values(const KeyValueConfig& config) : config_(config) {}

  bool has(const std::string& key) const { return config_.values.count(key) > 0; }

  std::string str(const std::string& key, const std::string& fallback) const {
    auto it = config_.values.find(key);
    return it == config_.values.end() ? fallback : it->second;
  }

  std::string require(const std::string& key) const {
    auto it = config_.values.find(key);
    if (it == config_.values.end()) {
      throw ConfigError("config: missing required key " + key);
    }
    return it->second;
  }

  std::uint64_t uint(const std::string& key, std::uint64_t fallback) const {
    if (!has(key)) return fallback;
    const std::string& v = config_.values.at(key);
    try {
      std::size_t used = 0;
      const std::uint64_t out = std::stoull(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      throw ConfigError("config: key " + key + " wants an unsigned integer, got \"" + v + "\"");
    }
  }

  double real(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    const std::string& v = config_.values.at(key);
    try {
      std::size_t used = 0;
      const double out = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      throw ConfigError("config: key " + key + " wants a number, got \"" + v + "\"");
    }
  }

  bool flag(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string& v = config_.values.at(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: key " + key + " wants true or false, got \"" + v + "\"");
  }

 private:
  const KeyValueConfig& config_;
};

fs::path resolve_path(const std::string& value, const fs::path& config_dir) {
  fs::path p(value);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("TILTLAB_DATA_ROOT")) {
    return fs::path(root) / p;
  }
  return config_dir / p;
}

CleanCorpus load_corpus_file(const fs::path& path, const std::string& language, Register reg,
                             const std::string& key) {
  CleanCorpus corpus;
  corpus.language = language;
  corpus.reg = reg;
  try {
    corpus.utterances = read_text_lines(path);
  } catch (const std::exception& e) {
    throw ConfigError("config: key " + key +
                      ": cannot load corpus: " + std::string(e.what()));
  }
  return corpus;
}

TrainConfig stage_config(const Values& v, const std::string& prefix, std::uint64_t default_seed) {
  TrainConfig t;
  t.learning_rate = v.real(prefix + "learning_rate", t.learning_rate);
  t.batch_size = v.uint(prefix + "batch_size", t.batch_size);
  t.n_epochs = v.uint(prefix + "n_epochs", t.n_epochs);
  t.max_steps = v.uint(prefix + "max_steps", t.max_steps);
  t.mask_prob = v.real(prefix + "mask_prob", t.mask_prob);
  t.seed = v.uint(prefix + "seed", default_seed);
  t.adam_beta1 = v.real(prefix + "adam_beta1", t.adam_beta1);
  t.adam_beta2 = v.real(prefix + "adam_beta2", t.adam_beta2);
  t.adam_eps = v.real(prefix + "adam_eps", t.adam_eps);
  t.weight_decay = v.real(prefix + "weight_decay", t.weight_decay);
  return t;
}

std::string format_real(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void put_stage(KeyValueConfig& out, const std::string& prefix, const TrainConfig& t) {
  out.values[prefix + "learning_rate"] = format_real(t.learning_rate);
  out.values[prefix + "batch_size"] = std::to_string(t.batch_size);
  out.values[prefix + "n_epochs"] = std::to_string(t.n_epochs);
  out.values[prefix + "max_steps"] = std::to_string(t.max_steps);
  out.values[prefix + "mask_prob"] = format_real(t.mask_prob);
  out.values[prefix + "seed"] = std::to_string(t.seed);
  out.values[prefix + "adam_beta1"] = format_real(t.adam_beta1);
  out.values[prefix + "adam_beta2"] = format_real(t.adam_beta2);
  out.values[prefix + "adam_eps"] = format_real(t.adam_eps);
  out.values[prefix + "weight_decay"] = format_real(t.weight_decay);
}

std::vector<std::string> split_csv_list(const std::string& value) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= value.size()) {
    std::size_t end = value.find(',', start);
    if (end == std::string::npos) end = value.size();
    std::string item = trim_ws(value.substr(start, end - start));
    if (!item.empty()) out.push_back(std::move(item));
    if (end == value.size()) break;
    start = end + 1;
  }
  return out;
}

}  // namespace

KeyValueConfig parse_config(const std::string& bytes, const std::string& filename) {
  KeyValueConfig config;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= bytes.size()) {
    std::size_t end = bytes.find('\n', start);
    if (end == std::string::npos) end = bytes.size();
    ++line_no;
    std::string line = bytes.substr(start, end - start);
    const bool last = end == bytes.size();
    start = end + 1;
    if (last && line.empty()) break;

    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim_ws(line);
    if (line.empty()) continue;

    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError(filename + ": expected key = value", line_no);
    }
    std::string key = trim_ws(line.substr(0, eq));
    std::string value = trim_ws(line.substr(eq + 1));
    if (key.empty()) throw ParseError(filename + ": empty key", line_no);
    if (config.values.count(key)) {
      throw ParseError(filename + ": duplicate key " + key, line_no);
    }
    config.values.emplace(key, std::move(value));
    config.lines.emplace(std::move(key), line_no);
  }
  return config;
}

std::string serialize_config(const KeyValueConfig& config) {
  std::string out;
  for (const auto& [key, value] : config.values) {
    out += key + " = " + value + "\n";
  }
  return out;
}

Register parse_register(const std::string& name) {
  if (name == "cds") return Register::cds;
  if (name == "conversational_ads") return Register::conversational_ads;
  if (name == "scripted_ads") return Register::scripted_ads;
  throw ConfigError("unknown register \"" + name +
                    "\" (expected cds, conversational_ads, or scripted_ads)");
}

RunConfig resolve_run_config(const KeyValueConfig& config, const fs::path& config_dir,
                             std::optional<std::uint64_t> seed_override) {
  for (const auto& [key, value] : config.values) {
    if (!known_config_keys().count(key)) {
      const auto line = config.lines.count(key) ? config.lines.at(key) : 0;
      throw ConfigError("config: unknown key " + key +
                        (line ? " (line " + std::to_string(line) + ")" : ""));
    }
  }
  const Values v(config);
  RunConfig run;

  run.plan.variant = parse_variant(v.require("variant"));
  run.plan.seed = seed_override ? *seed_override : v.uint("seed", 0);
  run.plan.bpe_min_frequency = v.uint("bpe_min_frequency", 2);
  run.plan.reuse_l1_tokenizer = v.flag("reuse_l1_tokenizer", false);

  ModelConfig& mc = run.plan.model_config;
  mc.n_layers = v.uint("model.n_layers", mc.n_layers);
  mc.n_heads = v.uint("model.n_heads", mc.n_heads);
  mc.d_model = v.uint("model.d_model", mc.d_model);
  mc.d_ff = v.uint("model.d_ff", mc.d_ff);
  mc.max_seq_len = v.uint("model.max_seq_len", mc.max_seq_len);
  mc.vocab_size = v.uint("model.vocab_size", 0);
  if (mc.vocab_size == 0) {
    throw ConfigError("config: missing required key model.vocab_size");
  }
  mc.tie_output_to_embeddings = v.flag("model.tie_output_to_embeddings", true);
  mc.init_std = v.real("model.init_std", mc.init_std);
  mc.layer_norm_eps = v.real("model.layer_norm_eps", mc.layer_norm_eps);

  run.plan.stage1_train = stage_config(v, "stage1.", run.plan.seed);
  run.plan.stage2_train = stage_config(v, "stage2.", run.plan.seed);

  run.l2_language = v.str("l2_language", "english");
  run.l2_register = parse_register(v.str("l2_register", "conversational_ads"));
  const fs::path l2_path = resolve_path(v.require("l2_corpus"), config_dir);
  run.plan.l2_corpus = load_corpus_file(l2_path, run.l2_language, run.l2_register, "l2_corpus");

  if (run.plan.variant == Variant::tilt_transfer) {
    run.l1_language = v.str("l1_language", "l1");
    run.l1_register = parse_register(v.str("l1_register", "cds"));
    const fs::path l1_path = resolve_path(v.require("l1_corpus"), config_dir);
    run.plan.l1_corpus = load_corpus_file(l1_path, run.l1_language, run.l1_register, "l1_corpus");
  } else if (v.has("l1_corpus")) {
    throw ConfigError("config: key l1_corpus is only valid for variant tilt_transfer");
  }

  run.run_dir = v.has("run_dir") ? resolve_path(v.require("run_dir"), config_dir) : fs::path();
  run.run_id = v.str("run_id", run.run_dir.empty() ? "run" : run.run_dir.filename().string());
  for (const auto& item : split_csv_list(v.str("suite", ""))) {
    run.suite_files.push_back(resolve_path(item, config_dir));
  }

  run.plan.validate();

  // materialize the full key set so the snapshot alone reproduces the run
  KeyValueConfig& out = run.resolved;
  out.values["variant"] = variant_name(run.plan.variant);
  out.values["seed"] = std::to_string(run.plan.seed);
  out.values["bpe_min_frequency"] = std::to_string(run.plan.bpe_min_frequency);
  out.values["reuse_l1_tokenizer"] = run.plan.reuse_l1_tokenizer ? "true" : "false";
  out.values["l2_corpus"] = fs::absolute(l2_path).string();
  out.values["l2_language"] = run.l2_language;
  out.values["l2_register"] = register_name(run.l2_register);
  if (run.plan.variant == Variant::tilt_transfer) {
    out.values["l1_corpus"] =
        fs::absolute(resolve_path(v.require("l1_corpus"), config_dir)).string();
    out.values["l1_language"] = run.l1_language;
    out.values["l1_register"] = register_name(run.l1_register);
  }
  if (!run.run_dir.empty()) out.values["run_dir"] = fs::absolute(run.run_dir).string();
  out.values["run_id"] = run.run_id;
  if (!run.suite_files.empty()) {
    std::string joined;
    for (const auto& p : run.suite_files) {
      if (!joined.empty()) joined += ",";
      joined += fs::absolute(p).string();
    }
    out.values["suite"] = joined;
  }
  out.values["model.n_layers"] = std::to_string(mc.n_layers);
  out.values["model.n_heads"] = std::to_string(mc.n_heads);
  out.values["model.d_model"] = std::to_string(mc.d_model);
  out.values["model.d_ff"] = std::to_string(mc.d_ff);
  out.values["model.max_seq_len"] = std::to_string(mc.max_seq_len);
  out.values["model.vocab_size"] = std::to_string(mc.vocab_size);
  out.values["model.tie_output_to_embeddings"] = mc.tie_output_to_embeddings ? "true" : "false";
  out.values["model.init_std"] = format_real(mc.init_std);
  out.values["model.layer_norm_eps"] = format_real(mc.layer_norm_eps);
  put_stage(out, "stage1.", run.plan.stage1_train);
  put_stage(out, "stage2.", run.plan.stage2_train);

  return run;
}

}  // namespace tiltlab
