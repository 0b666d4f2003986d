#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "tiltlab/config.hpp"
#include "tiltlab/errors.hpp"
#include "support/temp_dir.hpp"

using namespace tiltlab;
using testsupport::TempDir;
using testsupport::write_file;

namespace {

// Scoped environment override; resolve_run_config consults TILTLAB_DATA_ROOT.
struct EnvVar {
  std::string name;
  EnvVar(const std::string& n, const std::string& value) : name(n) {
    setenv(name.c_str(), value.c_str(), 1);
  }
  ~EnvVar() { unsetenv(name.c_str()); }
};

const char* kCorpusText = "the cat sat on the mat\na dog ran\nthe dog sat here\n";

std::string minimal_config(const std::string& extra = "") {
  return "variant = from_scratch\n"
         "l2_corpus = l2.txt\n"
         "model.vocab_size = 300\n" +
         extra;
}

}  // namespace

TEST_CASE("parse_config reads keys, comments, and blank lines") {
  const std::string text =
      "# experiment\n"
      "\n"
      "variant = from_scratch   # trailing comment\n"
      "  seed=7\n"
      "l2_corpus = path with spaces.txt\n";
  const auto config = parse_config(text, "exp.cfg");
  CHECK(config.values.at("variant") == "from_scratch");
  CHECK(config.values.at("seed") == "7");
  CHECK(config.values.at("l2_corpus") == "path with spaces.txt");
  CHECK(config.lines.at("seed") == 4);
}

TEST_CASE("parse_config rejects malformed lines with their position") {
  CHECK_THROWS_WITH_AS(parse_config("variant from_scratch\n", "x.cfg"),
                       doctest::Contains("line 1"), ParseError);
  CHECK_THROWS_WITH_AS(parse_config("= 3\n", "x.cfg"), doctest::Contains("empty key"),
                       ParseError);
  CHECK_THROWS_WITH_AS(parse_config("seed = 1\nseed = 2\n", "x.cfg"),
                       doctest::Contains("duplicate key seed"), ParseError);
  try {
    parse_config("a = 1\nb = 2\njunk\n", "x.cfg");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
}

TEST_CASE("serialize_config is the sorted canonical form and round trips") {
  KeyValueConfig config;
  config.values = {{"seed", "7"}, {"variant", "from_scratch"}, {"l2_corpus", "x.txt"}};
  const std::string text = serialize_config(config);
  CHECK(text == "l2_corpus = x.txt\nseed = 7\nvariant = from_scratch\n");
  CHECK(parse_config(text, "round").values == config.values);
}

TEST_CASE("resolve_run_config fills documented defaults") {
  TempDir dir("tiltlab_cfg_defaults");
  write_file(dir.path / "l2.txt", kCorpusText);

  const auto run = resolve_run_config(parse_config(minimal_config(), "exp.cfg"), dir.path);
  CHECK(run.plan.variant == Variant::from_scratch);
  CHECK(run.plan.seed == 0);
  CHECK(run.plan.bpe_min_frequency == 2);
  CHECK(run.plan.reuse_l1_tokenizer == false);
  CHECK(run.plan.l2_corpus.utterances.size() == 3);
  CHECK(run.plan.l2_corpus.language == "english");
  CHECK(run.l2_register == Register::conversational_ads);
  CHECK(run.run_id == "run");
  CHECK(run.run_dir.empty());
  CHECK(run.suite_files.empty());

  // paper-scale model and trainer defaults
  CHECK(run.plan.model_config.n_layers == 8);
  CHECK(run.plan.model_config.n_heads == 8);
  CHECK(run.plan.model_config.d_model == 256);
  CHECK(run.plan.model_config.d_ff == 1024);
  CHECK(run.plan.model_config.max_seq_len == 128);
  CHECK(run.plan.model_config.vocab_size == 300);
  CHECK(run.plan.model_config.tie_output_to_embeddings == true);
  CHECK(run.plan.stage1_train.learning_rate == 1e-4);
  CHECK(run.plan.stage1_train.batch_size == 16);
  CHECK(run.plan.stage1_train.n_epochs == 10);
  CHECK(run.plan.stage1_train.max_steps == 260);
  CHECK(run.plan.stage1_train.mask_prob == 0.15);
  CHECK(run.plan.stage2_train.seed == 0);
}

TEST_CASE("stage seeds default to the experiment seed but stay overridable") {
  TempDir dir("tiltlab_cfg_seeds");
  write_file(dir.path / "l2.txt", kCorpusText);

  const std::string text = minimal_config("seed = 9\nstage2.seed = 4\n");
  const auto run = resolve_run_config(parse_config(text, "exp.cfg"), dir.path);
  CHECK(run.plan.seed == 9);
  CHECK(run.plan.stage1_train.seed == 9);
  CHECK(run.plan.stage2_train.seed == 4);

  const auto forced = resolve_run_config(parse_config(text, "exp.cfg"), dir.path, 31);
  CHECK(forced.plan.seed == 31);
  CHECK(forced.plan.stage1_train.seed == 31);  // follows the override
  CHECK(forced.plan.stage2_train.seed == 4);   // explicit key wins
}

TEST_CASE("unknown and ill-typed keys are named") {
  TempDir dir("tiltlab_cfg_bad");
  write_file(dir.path / "l2.txt", kCorpusText);

  CHECK_THROWS_WITH_AS(
      resolve_run_config(parse_config(minimal_config("learning_rate = 1\n"), "e"), dir.path),
      doctest::Contains("unknown key learning_rate"), ConfigError);
  CHECK_THROWS_WITH_AS(
      resolve_run_config(parse_config(minimal_config("seed = soon\n"), "e"), dir.path),
      doctest::Contains("key seed"), ConfigError);
  CHECK_THROWS_WITH_AS(
      resolve_run_config(parse_config(minimal_config("seed = 7x\n"), "e"), dir.path),
      doctest::Contains("key seed"), ConfigError);
  CHECK_THROWS_WITH_AS(
      resolve_run_config(parse_config(minimal_config("reuse_l1_tokenizer = maybe\n"), "e"),
                         dir.path),
      doctest::Contains("reuse_l1_tokenizer"), ConfigError);
  CHECK_THROWS_WITH_AS(
      resolve_run_config(parse_config(minimal_config("stage1.mask_prob = dense\n"), "e"),
                         dir.path),
      doctest::Contains("stage1.mask_prob"), ConfigError);
}

TEST_CASE("required keys are enforced by name") {
  TempDir dir("tiltlab_cfg_required");
  write_file(dir.path / "l2.txt", kCorpusText);

  CHECK_THROWS_WITH_AS(
      resolve_run_config(parse_config("l2_corpus = l2.txt\nmodel.vocab_size = 300\n", "e"),
                         dir.path),
      doctest::Contains("variant"), ConfigError);
  CHECK_THROWS_WITH_AS(
      resolve_run_config(parse_config("variant = from_scratch\nl2_corpus = l2.txt\n", "e"),
                         dir.path),
      doctest::Contains("model.vocab_size"), ConfigError);
  CHECK_THROWS_WITH_AS(
      resolve_run_config(parse_config("variant = from_scratch\nmodel.vocab_size = 300\n", "e"),
                         dir.path),
      doctest::Contains("l2_corpus"), ConfigError);
}

TEST_CASE("l1 keys belong to tilt_transfer only") {
  TempDir dir("tiltlab_cfg_l1");
  write_file(dir.path / "l1.txt", "ba duno miko\nni suno ba\n");
  write_file(dir.path / "l2.txt", kCorpusText);

  // tilt without l1_corpus names the key
  CHECK_THROWS_WITH_AS(
      resolve_run_config(
          parse_config("variant = tilt_transfer\nl2_corpus = l2.txt\nmodel.vocab_size = 300\n",
                       "e"),
          dir.path),
      doctest::Contains("l1_corpus"), ConfigError);
  // l1_corpus on another variant is rejected
  CHECK_THROWS_WITH_AS(
      resolve_run_config(parse_config(minimal_config("l1_corpus = l1.txt\n"), "e"), dir.path),
      doctest::Contains("l1_corpus"), ConfigError);

  const std::string tilt =
      "variant = tilt_transfer\n"
      "l1_corpus = l1.txt\n"
      "l1_language = quechua\n"
      "l1_register = cds\n"
      "l2_corpus = l2.txt\n"
      "model.vocab_size = 300\n";
  const auto run = resolve_run_config(parse_config(tilt, "e"), dir.path);
  REQUIRE(run.plan.l1_corpus.has_value());
  CHECK(run.plan.l1_corpus->utterances.size() == 2);
  CHECK(run.plan.l1_corpus->language == "quechua");
  CHECK(run.l1_register == Register::cds);
}

TEST_CASE("missing corpus files point at the key") {
  TempDir dir("tiltlab_cfg_nofile");
  CHECK_THROWS_WITH_AS(
      resolve_run_config(parse_config(minimal_config(), "e"), dir.path),
      doctest::Contains("l2_corpus"), ConfigError);
}

TEST_CASE("relative paths prefer TILTLAB_DATA_ROOT when set") {
  TempDir root("tiltlab_cfg_dataroot");
  TempDir elsewhere("tiltlab_cfg_elsewhere");
  write_file(root.path / "l2.txt", kCorpusText);

  {
    EnvVar env("TILTLAB_DATA_ROOT", root.path.string());
    const auto run = resolve_run_config(parse_config(minimal_config(), "e"), elsewhere.path);
    CHECK(run.plan.l2_corpus.utterances.size() == 3);
  }
  // without the variable the config directory anchors the path, and it is empty
  CHECK_THROWS_AS(resolve_run_config(parse_config(minimal_config(), "e"), elsewhere.path),
                  ConfigError);
}

TEST_CASE("suite lists and run directory resolve relative to the config") {
  TempDir dir("tiltlab_cfg_paths");
  write_file(dir.path / "l2.txt", kCorpusText);
  const std::string text = minimal_config(
      "run_dir = out/run_a\n"
      "suite = a.jsonl, sub/b.jsonl\n");
  const auto run = resolve_run_config(parse_config(text, "e"), dir.path);
  CHECK(run.run_dir == dir.path / "out/run_a");
  CHECK(run.run_id == "run_a");
  REQUIRE(run.suite_files.size() == 2);
  CHECK(run.suite_files[0] == dir.path / "a.jsonl");
  CHECK(run.suite_files[1] == dir.path / "sub/b.jsonl");
}

TEST_CASE("the resolved snapshot reproduces the run from anywhere") {
  TempDir dir("tiltlab_cfg_snapshot");
  write_file(dir.path / "l2.txt", kCorpusText);
  const std::string text = minimal_config(
      "seed = 13\n"
      "run_dir = out\n"
      "stage1.max_steps = 6\n"
      "model.n_layers = 1\n");

  const auto run = resolve_run_config(parse_config(text, "exp.cfg"), dir.path);
  // every key the run depends on is explicit in the snapshot
  const std::string snapshot = serialize_config(run.resolved);
  TempDir other("tiltlab_cfg_snapshot_other");
  const auto rerun = resolve_run_config(parse_config(snapshot, "snapshot"), other.path);

  CHECK(rerun.resolved.values == run.resolved.values);
  CHECK(rerun.plan.seed == 13);
  CHECK(rerun.plan.model_config.n_layers == 1);
  CHECK(rerun.plan.stage1_train.max_steps == 6);
  CHECK(rerun.plan.l2_corpus.utterances == run.plan.l2_corpus.utterances);
  CHECK(rerun.run_id == "out");
}

TEST_CASE("parse_register accepts exactly the three registers") {
  CHECK(parse_register("cds") == Register::cds);
  CHECK(parse_register("conversational_ads") == Register::conversational_ads);
  CHECK(parse_register("scripted_ads") == Register::scripted_ads);
  CHECK_THROWS_WITH_AS(parse_register("radio"), doctest::Contains("radio"), ConfigError);
}
