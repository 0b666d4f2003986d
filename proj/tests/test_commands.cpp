#include <doctest.h>

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tiltlab/blimp.hpp"
#include "tiltlab/checkpoint_io.hpp"
#include "tiltlab/commands.hpp"
#include "tiltlab/errors.hpp"
#include "support/temp_dir.hpp"

using namespace tiltlab;
using testsupport::TempDir;
using testsupport::slurp;
using testsupport::write_file;

namespace fs = std::filesystem;

namespace {

const std::string kFixtures = TILTLAB_FIXTURE_DIR;

const char* kToyCorpus =
    "the cat sat on the mat\n"
    "a dog ran in the park\n"
    "the bird flew over the house\n"
    "a cat and a dog played\n"
    "the dog sat by the door\n"
    "a bird sang in the tree\n"
    "the cats sat on the wall\n"
    "a dog barked at the cat\n";

const char* kToyL1 =
    "ba duno miko\n"
    "ni suno ba\n"
    "miko duno ba ni\n"
    "suno ba miko\n"
    "ni ba duno\n"
    "miko suno ni ba\n";

const char* kSuiteJsonl =
    R"({"sentence_good": "the cat sat", "sentence_bad": "the cat sats", "UID": "subj_verb_1", "linguistics_term": "agreement"}
{"sentence_good": "a dog ran", "sentence_bad": "a dog runned", "UID": "subj_verb_1", "linguistics_term": "agreement"}
{"sentence_good": "the bird flew", "sentence_bad": "bird the flew", "UID": "word_order_1", "linguistics_term": "word order"}
)";

// Small from_scratch run that finishes in well under a second.
std::string tiny_config(const std::string& run_dir, const std::string& extra = "") {
  return "variant = from_scratch\n"
         "l2_corpus = l2.txt\n"
         "seed = 5\n"
         "bpe_min_frequency = 1\n"
         "model.n_layers = 1\n"
         "model.n_heads = 2\n"
         "model.d_model = 8\n"
         "model.d_ff = 16\n"
         "model.max_seq_len = 16\n"
         "model.vocab_size = " +
         std::to_string(kBpeBaseSize + 10) +
         "\n"
         "stage1.batch_size = 4\n"
         "stage1.max_steps = 4\n"
         "run_dir = " +
         run_dir + "\n" + extra;
}

// run.json + eval_result.json pair, the two files cmd_report consumes.
void fake_run_dir(const fs::path& dir, const std::string& run_id, const std::string& variant,
                  const std::string& l2_register, const std::string& language, double overall) {
  fs::create_directories(dir);
  nlohmann::json meta = {{"run_id", run_id},
                         {"variant", variant},
                         {"seed", 0},
                         {"l2_language", variant == "tilt_transfer" ? "english" : language},
                         {"l2_register", l2_register}};
  if (variant == "tilt_transfer") {
    meta["l1_language"] = language;
    meta["l1_register"] = "cds";
  }
  write_file(dir / "run.json", meta.dump(2) + "\n");

  SuiteResult result;
  result.model_id = run_id;
  result.overall = overall;
  result.paradigm_mean = overall;
  result.phenomenon_accuracy["agreement"] = overall;
  ParadigmResult p;
  p.uid = "subj_verb_1";
  p.phenomenon = "agreement";
  p.n_pairs = 10;
  p.n_correct = static_cast<std::size_t>(overall * 10 + 0.5);
  p.accuracy = overall;
  result.paradigms.push_back(p);
  write_file(dir / "eval_result.json", suite_result_to_json(result));
}

std::vector<std::string> file_lines(const fs::path& path) {
  std::vector<std::string> lines;
  std::istringstream in(slurp(path));
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

}  // namespace

TEST_CASE("prepare-corpus on the cds fixture reproduces the golden cleaning") {
  TempDir dir("tiltlab_cmd_prepare_cds");
  PrepareOptions options;
  options.kind = CorpusKind::cds_csv;

  const auto stats =
      cmd_prepare_corpus(kFixtures + "/childes_small.csv", options, dir.path / "clean.txt");
  CHECK(slurp(dir.path / "clean.txt") == slurp(kFixtures + "/childes_small_clean.golden.txt"));
  CHECK(slurp(dir.path / "clean.txt.stats.json") == stats_to_json(stats));

  CHECK(stats.vocabulary == 46);
  CHECK(stats.total_tokens == 56);
  CHECK(stats.n_utterances == 13);
  CHECK(stats.avg_sentence_length == doctest::Approx(56.0 / 13.0));
  REQUIRE(stats.n_children.has_value());
  CHECK(*stats.n_children == 10);  // every fixture transcript keeps at least one row
}

TEST_CASE("prepare-corpus scripted sampling is exact and deterministic") {
  TempDir dir("tiltlab_cmd_prepare_scripted");
  std::string input;
  for (int i = 0; i < 200; ++i) input += "sentence number " + std::to_string(i) + "\n";
  write_file(dir.path / "wiki.txt", input);

  PrepareOptions options;
  options.kind = CorpusKind::scripted;
  options.sample_n = 50;
  options.sample_seed = 3;

  const auto stats = cmd_prepare_corpus(dir.path / "wiki.txt", options, dir.path / "a.txt");
  CHECK(stats.n_utterances == 50);
  CHECK(!stats.n_children.has_value());
  CHECK(file_lines(dir.path / "a.txt").size() == 50);

  cmd_prepare_corpus(dir.path / "wiki.txt", options, dir.path / "b.txt");
  CHECK(slurp(dir.path / "a.txt") == slurp(dir.path / "b.txt"));

  options.sample_n = 500;  // more than the file holds
  CHECK_THROWS_AS(cmd_prepare_corpus(dir.path / "wiki.txt", options, dir.path / "c.txt"),
                  std::invalid_argument);
  CHECK(!fs::exists(dir.path / "c.txt"));
  CHECK(!fs::exists(dir.path / "c.txt.stats.json"));
}

TEST_CASE("prepare-corpus coca applies the spoken-register cleanup") {
  TempDir dir("tiltlab_cmd_prepare_coca");
  write_file(dir.path / "coca.txt",
             "MR-SMITH: well uh I think [laughter] so\n"
             "[laughter]\n"
             "the meeting starts at nine\n");

  PrepareOptions options;
  options.kind = CorpusKind::coca;
  const auto stats = cmd_prepare_corpus(dir.path / "coca.txt", options, dir.path / "out.txt");
  CHECK(stats.n_utterances == 2);
  CHECK(slurp(dir.path / "out.txt") == "well I think so\nthe meeting starts at nine\n");
}

TEST_CASE("prepare-corpus leaves nothing behind on bad input") {
  TempDir dir("tiltlab_cmd_prepare_empty");
  write_file(dir.path / "empty.csv", "");

  PrepareOptions options;
  options.kind = CorpusKind::cds_csv;
  CHECK_THROWS_AS(cmd_prepare_corpus(dir.path / "empty.csv", options, dir.path / "out.txt"),
                  ParseError);
  CHECK(!fs::exists(dir.path / "out.txt"));
  CHECK(!fs::exists(dir.path / "out.txt.stats.json"));

  CHECK_THROWS_AS(
      cmd_prepare_corpus(dir.path / "missing.csv", options, dir.path / "out.txt"), ConfigError);
  CHECK(!fs::exists(dir.path / "out.txt"));
}

TEST_CASE("unknown corpus kinds are rejected by name") {
  CHECK(parse_corpus_kind("cds_csv") == CorpusKind::cds_csv);
  CHECK(parse_corpus_kind("coca") == CorpusKind::coca);
  CHECK(parse_corpus_kind("scripted") == CorpusKind::scripted);
  CHECK_THROWS_WITH_AS(parse_corpus_kind("podcast"), doctest::Contains("podcast"), ConfigError);
}

TEST_CASE("cmd_run writes the full artifact tree") {
  TempDir dir("tiltlab_cmd_run_tree");
  write_file(dir.path / "l2.txt", kToyCorpus);
  write_file(dir.path / "suite.jsonl", kSuiteJsonl);
  write_file(dir.path / "exp.cfg",
             tiny_config("out", "run_id = twin\nsuite = suite.jsonl\n"));

  std::vector<std::string> log;
  const auto result =
      cmd_run(dir.path / "exp.cfg", std::nullopt, [&](const std::string& s) { log.push_back(s); });
  CHECK(!result.stage1.has_value());

  const fs::path out = dir.path / "out";
  for (const char* name : {"config.resolved", "run.json", "stats_l2.json", "loss_stage1.csv",
                           "eval_paradigms.csv", "eval_phenomena.csv", "eval_result.json",
                           "report.md"}) {
    CAPTURE(name);
    CHECK(fs::exists(out / name));
  }
  CHECK(fs::exists(out / "checkpoint" / "manifest.json"));
  CHECK(!fs::exists(out / "FAILED"));
  CHECK(!fs::exists(out / "stats_l1.json"));
  CHECK(!fs::exists(out / "loss_stage2.csv"));
  CHECK(!fs::exists(out / "checkpoint_stage1"));

  const auto loss = file_lines(out / "loss_stage1.csv");
  REQUIRE(loss.size() == 5);  // header + 4 steps
  CHECK(loss[0] == "run,step,epoch,loss");
  CHECK(loss[1].rfind("twin,1,0,", 0) == 0);
  CHECK(loss[4].rfind("twin,4,", 0) == 0);

  const auto eval = suite_result_from_json(slurp(out / "eval_result.json"));
  CHECK(eval.model_id == "twin");
  CHECK(eval.paradigms.size() == 2);

  const auto meta = nlohmann::json::parse(slurp(out / "run.json"));
  CHECK(meta.at("run_id") == "twin");
  CHECK(meta.at("variant") == "from_scratch");
  CHECK(meta.at("seed") == 5);
  CHECK(!log.empty());

  // the produced checkpoint loads, verifies, and describes itself
  std::ostringstream inspect;
  cmd_inspect_checkpoint(out / "checkpoint", inspect);
  const std::string text = inspect.str();
  CHECK(text.find("variant: from_scratch") != std::string::npos);
  CHECK(text.find("stage: L2") != std::string::npos);
  CHECK(text.find("token_embeddings") != std::string::npos);
  CHECK(text.find("tokenizer: ") != std::string::npos);

  // damage is caught on inspection
  const fs::path blob = out / "checkpoint" / "tensors" / "final_ln_gain.bin";
  std::string bytes = slurp(blob);
  bytes[bytes.size() - 1] ^= 0x01;
  write_file(blob, bytes);
  std::ostringstream sink;
  CHECK_THROWS_AS(cmd_inspect_checkpoint(out / "checkpoint", sink), CorruptionError);
}

TEST_CASE("cmd_run output does not depend on where it runs") {
  TempDir dir("tiltlab_cmd_run_det");
  write_file(dir.path / "l2.txt", kToyCorpus);
  write_file(dir.path / "suite.jsonl", kSuiteJsonl);
  write_file(dir.path / "a.cfg", tiny_config("out_a", "run_id = twin\nsuite = suite.jsonl\n"));
  write_file(dir.path / "b.cfg", tiny_config("out_b", "run_id = twin\nsuite = suite.jsonl\n"));

  cmd_run(dir.path / "a.cfg");
  cmd_run(dir.path / "b.cfg");

  const fs::path a = dir.path / "out_a";
  const fs::path b = dir.path / "out_b";
  for (const char* name :
       {"run.json", "stats_l2.json", "loss_stage1.csv", "eval_paradigms.csv",
        "eval_phenomena.csv", "eval_result.json", "report.md", "checkpoint/manifest.json",
        "checkpoint/tokenizer.json", "checkpoint/tensors/token_embeddings.bin",
        "checkpoint/tensors/final_ln_gain.bin"}) {
    CAPTURE(name);
    CHECK(slurp(a / name) == slurp(b / name));
  }
  // only the run directory itself may differ in the snapshot
  CHECK(slurp(a / "config.resolved") != slurp(b / "config.resolved"));
}

TEST_CASE("cmd_run tilt_transfer keeps both stages") {
  TempDir dir("tiltlab_cmd_run_tilt");
  write_file(dir.path / "l1.txt", kToyL1);
  write_file(dir.path / "l2.txt", kToyCorpus);
  write_file(dir.path / "exp.cfg",
             "variant = tilt_transfer\n"
             "l1_corpus = l1.txt\n"
             "l1_language = toy\n"
             "l2_corpus = l2.txt\n"
             "seed = 5\n"
             "bpe_min_frequency = 1\n"
             "model.n_layers = 1\n"
             "model.n_heads = 2\n"
             "model.d_model = 8\n"
             "model.d_ff = 16\n"
             "model.max_seq_len = 16\n"
             "model.vocab_size = " +
                 std::to_string(kBpeBaseSize + 10) +
                 "\n"
                 "stage1.batch_size = 4\n"
                 "stage1.max_steps = 2\n"
                 "stage2.batch_size = 4\n"
                 "stage2.max_steps = 2\n"
                 "run_dir = out\n");

  const auto result = cmd_run(dir.path / "exp.cfg");
  REQUIRE(result.stage1.has_value());

  const fs::path out = dir.path / "out";
  CHECK(fs::exists(out / "stats_l1.json"));
  CHECK(fs::exists(out / "loss_stage1.csv"));
  CHECK(fs::exists(out / "loss_stage2.csv"));

  const auto stage1 = read_checkpoint(out / "checkpoint_stage1");
  const auto final_ckpt = read_checkpoint(out / "checkpoint");
  CHECK(stage1.manifest.stage == "L1");
  CHECK(final_ckpt.manifest.stage == "L2");
  CHECK(final_ckpt.manifest.variant == "tilt_transfer");
  // the headline invariant, through the serialized artifacts
  CHECK(tensor_digest(stage1.params.tensors.at("final_ln_gain")) ==
        tensor_digest(final_ckpt.params.tensors.at("final_ln_gain")));
}

TEST_CASE("cmd_run failures leave a FAILED marker next to partial artifacts") {
  TempDir dir("tiltlab_cmd_run_failed");
  write_file(dir.path / "l2.txt", kToyCorpus);
  write_file(dir.path / "exp.cfg", tiny_config("out", "suite = nonexistent.jsonl\n"));

  CHECK_THROWS(cmd_run(dir.path / "exp.cfg"));
  const fs::path out = dir.path / "out";
  REQUIRE(fs::exists(out / "FAILED"));
  CHECK(slurp(out / "FAILED").find("nonexistent.jsonl") != std::string::npos);
  CHECK(fs::exists(out / "checkpoint" / "manifest.json"));  // training had finished
  CHECK(!fs::exists(out / "eval_result.json"));
}

TEST_CASE("cmd_run validates before touching the filesystem") {
  TempDir dir("tiltlab_cmd_run_invalid");
  write_file(dir.path / "l2.txt", kToyCorpus);

  write_file(dir.path / "no_run_dir.cfg",
             "variant = from_scratch\nl2_corpus = l2.txt\nmodel.vocab_size = 300\n");
  CHECK_THROWS_WITH_AS(cmd_run(dir.path / "no_run_dir.cfg"), doctest::Contains("run_dir"),
                       ConfigError);

  write_file(dir.path / "no_l1.cfg",
             "variant = tilt_transfer\nl2_corpus = l2.txt\nmodel.vocab_size = 300\n"
             "run_dir = out\n");
  CHECK_THROWS_WITH_AS(cmd_run(dir.path / "no_l1.cfg"), doctest::Contains("l1_corpus"),
                       ConfigError);
  CHECK(!fs::exists(dir.path / "out"));

  CHECK_THROWS_WITH_AS(cmd_run(dir.path / "missing.cfg"), doctest::Contains("cannot open"),
                       ConfigError);
}

TEST_CASE("cmd_report orders models like the paper tables and subtracts deltas") {
  TempDir dir("tiltlab_cmd_report");
  fake_run_dir(dir.path / "cds_run", "tilt_de", "tilt_transfer", "cds", "german", 0.60);
  fake_run_dir(dir.path / "wiki_run", "wiki", "from_scratch", "scripted_ads", "english", 0.70);
  fake_run_dir(dir.path / "rand_run", "rand", "random_baseline", "cds", "english", 0.50);
  fake_run_dir(dir.path / "conv_run", "conv", "from_scratch", "conversational_ads", "english",
               0.65);

  const std::vector<fs::path> runs = {dir.path / "cds_run", dir.path / "wiki_run",
                                      dir.path / "rand_run", dir.path / "conv_run"};
  cmd_report(runs, "", dir.path / "report");

  const std::string md = slurp(dir.path / "report" / "comparison.md");
  CHECK(md.find("| phenomenon | wiki | conv | tilt_de | rand |") != std::string::npos);

  const auto csv = file_lines(dir.path / "report" / "language_effect.csv");
  REQUIRE(csv.size() == 5);
  CHECK(csv[0] == "model,overall,delta,agreement");
  CHECK(csv[1] == "wiki,70.0000,0.0000,0.0000");
  CHECK(csv[2] == "conv,65.0000,5.0000,5.0000");
  CHECK(csv[3] == "tilt_de,60.0000,10.0000,10.0000");
  CHECK(csv[4] == "rand,50.0000,20.0000,20.0000");
}

TEST_CASE("cmd_report honors an explicit reference and skips unusable runs") {
  TempDir dir("tiltlab_cmd_report_ref");
  fake_run_dir(dir.path / "a", "a", "from_scratch", "scripted_ads", "english", 0.70);
  fake_run_dir(dir.path / "b", "b", "from_scratch", "conversational_ads", "english", 0.65);
  fs::create_directories(dir.path / "broken");  // no run.json at all

  std::vector<std::string> warnings;
  cmd_report({dir.path / "a", dir.path / "broken", dir.path / "b"}, "b", dir.path / "report",
             [&](const std::string& s) { warnings.push_back(s); });

  bool warned = false;
  for (const auto& w : warnings) warned = warned || w.find("broken") != std::string::npos;
  CHECK(warned);

  const auto csv = file_lines(dir.path / "report" / "language_effect.csv");
  REQUIRE(csv.size() == 3);
  CHECK(csv[1] == "a,70.0000,-5.0000,-5.0000");  // better than the reference
  CHECK(csv[2] == "b,65.0000,0.0000,0.0000");

  CHECK_THROWS_AS(cmd_report({dir.path / "broken"}, "", dir.path / "r2"), ConfigError);
}
