#include "tiltlab/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tiltlab/blimp.hpp"
#include "tiltlab/checkpoint_io.hpp"
#include "tiltlab/errors.hpp"

namespace tiltlab {

namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path, const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(what + ": cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return std::move(buf).str();
}

// Write through a sibling temp file so readers never see a partial artifact
// and a failure mid-write leaves the destination untouched.
void atomic_write(const fs::path& path, const std::string& bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string corpus_text(const CleanCorpus& corpus) {
  std::string out;
  for (const auto& u : corpus.utterances) {
    out += u;
    out += '\n';
  }
  return out;
}

void say(const LogFn& log, const std::string& line) {
  if (log) log(line);
}

// Streams one training stage into run,step,epoch,loss rows. The file only
// appears once the stage produces its first step, so variants that skip a
// stage leave no empty CSV behind.
class LossWriter {
 public:
  LossWriter(fs::path path, std::string run_id, std::string stage, const LogFn& log)
      : path_(std::move(path)), run_id_(std::move(run_id)), stage_(std::move(stage)), log_(log) {}

  void operator()(const StepLoss& s) {
    if (!out_.is_open()) {
      out_.open(path_, std::ios::binary | std::ios::trunc);
      if (!out_) throw std::runtime_error("cannot write " + path_.string());
      out_ << "run,step,epoch,loss\n";
    }
    char buf[128];
    std::snprintf(buf, sizeof buf, ",%zu,%zu,%.8f\n", s.step, s.epoch, s.loss);
    out_ << run_id_ << buf;
    if (log_ && s.step % 50 == 0) {
      char msg[128];
      std::snprintf(msg, sizeof msg, "%s step %zu (epoch %zu) loss %.4f", stage_.c_str(), s.step,
                    s.epoch, s.loss);
      log_(msg);
    }
    last_ = s;
    seen_ = true;
  }

  void finish() {
    if (out_.is_open()) {
      out_.flush();
      if (!out_) throw std::runtime_error("short write to " + path_.string());
      out_.close();
    }
    if (log_ && seen_) {
      char msg[128];
      std::snprintf(msg, sizeof msg, "%s done: %zu steps, final loss %.4f", stage_.c_str(),
                    last_.step, last_.loss);
      log_(msg);
    }
  }

 private:
  fs::path path_;
  std::string run_id_;
  std::string stage_;
  const LogFn& log_;
  std::ofstream out_;
  StepLoss last_{0, 0, 0.0};
  bool seen_ = false;
};

std::string run_json(const RunConfig& run) {
  nlohmann::json j;
  j["run_id"] = run.run_id;
  j["variant"] = variant_name(run.plan.variant);
  j["seed"] = run.plan.seed;
  j["l2_language"] = run.l2_language;
  j["l2_register"] = register_name(run.l2_register);
  if (run.plan.variant == Variant::tilt_transfer) {
    j["l1_language"] = run.l1_language;
    j["l1_register"] = register_name(run.l1_register);
  }
  return j.dump(2) + "\n";
}

// Table 2 column order: scripted ADS, conversational ADS, CDS-trained
// (which is what a transfer run is), random baseline last.
int report_rank(const std::string& variant, const std::string& l2_register) {
  if (variant == "random_baseline") return 3;
  if (variant == "tilt_transfer") return 2;
  if (l2_register == "scripted_ads") return 0;
  if (l2_register == "conversational_ads") return 1;
  return 2;
}

}  // namespace

CorpusKind parse_corpus_kind(const std::string& name) {
  if (name == "cds_csv") return CorpusKind::cds_csv;
  if (name == "coca") return CorpusKind::coca;
  if (name == "scripted") return CorpusKind::scripted;
  throw ConfigError("unknown corpus kind \"" + name +
                    "\" (expected cds_csv, coca, or scripted)");
}

CorpusStats cmd_prepare_corpus(const fs::path& input, const PrepareOptions& options,
                               const fs::path& output_path) {
  CleanCorpus corpus;
  corpus.language = options.language;
  std::optional<std::set<std::string>> child_ids;

  switch (options.kind) {
    case CorpusKind::cds_csv: {
      const auto records = age_order(parse_transcript_csv(read_file(input, "prepare-corpus")));
      corpus = clean_cds(records, options.cds_rules);
      corpus.language = options.language;
      child_ids.emplace();
      for (const auto& r : records) {
        if (!clean_cds({r}, options.cds_rules).utterances.empty()) {
          child_ids->insert(r.transcript_id);
        }
      }
      break;
    }
    case CorpusKind::coca:
      corpus = clean_coca(read_text_lines(input), options.coca_rules);
      corpus.language = options.language;
      break;
    case CorpusKind::scripted:
      corpus = sample_scripted(read_text_lines(input), options.sample_n, options.sample_seed);
      corpus.language = options.language;
      break;
  }

  if (corpus.utterances.empty()) {
    throw ParseError("prepare-corpus: " + input.string() + ": no utterances survived cleaning");
  }

  const CorpusStats stats = compute_stats(corpus, child_ids);
  atomic_write(output_path, corpus_text(corpus));
  fs::path stats_path = output_path;
  stats_path += ".stats.json";
  atomic_write(stats_path, stats_to_json(stats));
  return stats;
}

ExperimentResult cmd_run(const fs::path& config_path, std::optional<std::uint64_t> seed_override,
                         const LogFn& log, const std::map<std::string, std::string>& overrides) {
  const std::string bytes = read_file(config_path, "run");
  KeyValueConfig kv = parse_config(bytes, config_path.filename().string());
  for (const auto& [key, value] : overrides) {
    kv.values[key] = value;
    kv.lines.erase(key);  // the position in the file no longer applies
  }
  const RunConfig run =
      resolve_run_config(kv, fs::absolute(config_path).parent_path(), seed_override);
  if (run.run_dir.empty()) {
    throw ConfigError("config: missing required key run_dir");
  }
  fs::create_directories(run.run_dir);

  try {
    say(log, "run " + run.run_id + ": " + variant_name(run.plan.variant) + ", seed " +
                 std::to_string(run.plan.seed));
    atomic_write(run.run_dir / "config.resolved", serialize_config(run.resolved));
    atomic_write(run.run_dir / "run.json", run_json(run));
    if (run.plan.l1_corpus) {
      atomic_write(run.run_dir / "stats_l1.json", stats_to_json(compute_stats(*run.plan.l1_corpus)));
    }
    atomic_write(run.run_dir / "stats_l2.json", stats_to_json(compute_stats(run.plan.l2_corpus)));

    LossWriter stage1(run.run_dir / "loss_stage1.csv", run.run_id, "stage1", log);
    LossWriter stage2(run.run_dir / "loss_stage2.csv", run.run_id, "stage2", log);
    ExperimentResult result =
        run_experiment(run.plan, [&stage1](const StepLoss& s) { stage1(s); },
                       [&stage2](const StepLoss& s) { stage2(s); });
    stage1.finish();
    stage2.finish();

    write_checkpoint(result.final_ckpt, run.run_dir / "checkpoint");
    if (result.stage1) {
      write_checkpoint(*result.stage1, run.run_dir / "checkpoint_stage1");
    }

    if (!run.suite_files.empty()) {
      const auto suite = load_suite(run.suite_files);
      say(log, "evaluating " + std::to_string(suite.size()) + " pairs");
      const SuiteResult eval = evaluate(result.final_ckpt, suite, {}, run.run_id);
      atomic_write(run.run_dir / "eval_paradigms.csv", paradigm_csv(eval));
      atomic_write(run.run_dir / "eval_phenomena.csv", phenomenon_csv(eval));
      atomic_write(run.run_dir / "eval_result.json", suite_result_to_json(eval));
      atomic_write(run.run_dir / "report.md", comparison_markdown({eval}));
      char msg[128];
      std::snprintf(msg, sizeof msg, "overall %.4f (paradigm mean %.4f)", eval.overall,
                    eval.paradigm_mean);
      say(log, msg);
    }
    say(log, "run " + run.run_id + " complete");
    return result;
  } catch (const std::exception& e) {
    std::ofstream marker(run.run_dir / "FAILED", std::ios::binary | std::ios::trunc);
    marker << e.what() << "\n";
    throw;
  }
}

void cmd_report(const std::vector<fs::path>& run_dirs, const std::string& reference_id,
                const fs::path& out_dir, const LogFn& log) {
  struct Entry {
    int rank;
    std::string label;
    std::string run_id;
    SuiteResult result;
  };
  std::vector<Entry> entries;
  for (const auto& dir : run_dirs) {
    try {
      const auto meta = nlohmann::json::parse(read_file(dir / "run.json", "report"));
      Entry e;
      e.result = suite_result_from_json(read_file(dir / "eval_result.json", "report"));
      e.run_id = meta.at("run_id").get<std::string>();
      const auto variant = meta.at("variant").get<std::string>();
      const auto l2_register = meta.at("l2_register").get<std::string>();
      e.rank = report_rank(variant, l2_register);
      e.label = variant == "tilt_transfer" ? meta.at("l1_language").get<std::string>()
                                           : meta.at("l2_language").get<std::string>();
      entries.push_back(std::move(e));
    } catch (const std::exception& e) {
      say(log, "report: skipping " + dir.string() + ": " + e.what());
    }
  }
  if (entries.empty()) {
    throw ConfigError("report: no run directory had usable evaluation results");
  }

  std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    return std::tie(a.rank, a.label, a.run_id) < std::tie(b.rank, b.label, b.run_id);
  });
  std::vector<SuiteResult> results;
  results.reserve(entries.size());
  for (auto& e : entries) results.push_back(std::move(e.result));

  const std::string reference = reference_id.empty() ? results.front().model_id : reference_id;
  fs::create_directories(out_dir);
  atomic_write(out_dir / "comparison.md", comparison_markdown(results));
  atomic_write(out_dir / "language_effect.csv",
               language_effect_csv(language_effect(results, reference)));
  say(log, "report: " + std::to_string(results.size()) + " models, reference " + reference);
}

void cmd_inspect_checkpoint(const fs::path& ckpt_dir, std::ostream& out) {
  const Checkpoint ckpt = read_checkpoint(ckpt_dir);
  const ModelConfig& mc = ckpt.model_config();

  out << "checkpoint: " << ckpt_dir.string() << "\n";
  out << "variant: " << ckpt.manifest.variant << "\n";
  out << "stage: " << ckpt.manifest.stage << "\n";
  out << "model: n_layers=" << mc.n_layers << " n_heads=" << mc.n_heads
      << " d_model=" << mc.d_model << " d_ff=" << mc.d_ff << " max_seq_len=" << mc.max_seq_len
      << " vocab_size=" << mc.vocab_size
      << (mc.tie_output_to_embeddings ? " tied" : " untied") << "\n";
  out << "tokenizer: " << ckpt.tokenizer.size() << " tokens\n";

  std::size_t values = 0;
  for (const auto& [name, tensor] : ckpt.params.tensors) values += tensor.size();
  out << "parameters: " << values << " values in " << ckpt.params.tensors.size() << " tensors\n";

  out << "bpe: ceiling=" << ckpt.manifest.bpe_vocab_ceiling
      << " min_frequency=" << ckpt.manifest.bpe_min_frequency << "\n";
  out << "seeds:";
  for (const auto& [name, seed] : ckpt.manifest.seeds) out << " " << name << "=" << seed;
  out << "\n";
  out << "corpus digests:\n";
  for (const auto& [name, digest] : ckpt.manifest.corpus_digests) {
    out << "  " << name << ": " << digest << "\n";
  }
  out << "trainable:";
  for (const auto& name : ckpt.manifest.trainable) out << " " << name;
  out << "\n";
  out << "tensors:\n";
  for (const auto& [name, tensor] : ckpt.params.tensors) {
    out << "  " << name << " [";
    for (std::size_t i = 0; i < tensor.shape().size(); ++i) {
      out << (i ? ", " : "") << tensor.shape()[i];
    }
    out << "] " << tensor_digest(tensor).substr(0, 12) << "\n";
  }
}

}  // namespace tiltlab
