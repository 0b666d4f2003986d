#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tiltlab/bpe.hpp"
#include "tiltlab/corpus.hpp"
#include "tiltlab/model.hpp"
#include "tiltlab/trainer.hpp"

// The experiment matrix. Three ways to arrive at an L2 model:
//   tilt_transfer   pretrain on L1, graft a fresh L2 vocabulary onto the
//                   trained body, fine-tune with everything except the
//                   lexical tensors frozen
//   random_baseline random body, L2 tokenizer, same freeze mask, one stage
//   from_scratch    ordinary training on L2, nothing frozen
// The invariant that makes the comparison meaningful: every frozen tensor
// is bit-identical across the stage boundary.

namespace tiltlab {

enum class Variant { tilt_transfer, random_baseline, from_scratch };

std::string variant_name(Variant v);
Variant parse_variant(const std::string& name);  // throws ConfigError on unknown names

struct ExperimentPlan {
  Variant variant = Variant::from_scratch;
  std::optional<CleanCorpus> l1_corpus;  // required iff variant = tilt_transfer
  CleanCorpus l2_corpus;
  ModelConfig model_config;  // vocab_size is the BPE ceiling; the trained tokenizer sets the real V
  TrainConfig stage1_train;
  TrainConfig stage2_train;
  std::uint64_t seed = 0;
  std::size_t bpe_min_frequency = 2;
  // Keep the L1 vocabulary at transfer and unfreeze its embeddings in
  // place instead of grafting a fresh one.
  bool reuse_l1_tokenizer = false;

  void validate() const;
};

// Provenance carried with every checkpoint. corpus_digests keys are "l1"
// and/or "l2"; seeds keys are "experiment" and, after grafting, "graft".
// trainable is the name set the latest training stage was allowed to touch.
struct Manifest {
  std::string variant;
  std::string stage;  // "L1" for stage-1 artifacts, "L2" for final ones
  std::map<std::string, std::string> corpus_digests;
  std::map<std::string, std::uint64_t> seeds;
  std::vector<std::string> trainable;
  // Tokenizer-training inputs, kept so grafting retrains consistently.
  std::size_t bpe_vocab_ceiling = 0;
  std::size_t bpe_min_frequency = 2;
};

struct Checkpoint {
  ParameterSet params;
  BpeModel tokenizer;
  Manifest manifest;

  const ModelConfig& model_config() const { return params.config; }
  void validate() const;  // tokenizer size must equal the parameter vocab
};

// Output of graft_l2_vocab, consumed by tilt_finetune.
struct GraftResult {
  ParameterSet params;
  FreezeMask mask;
  BpeModel tokenizer;
  Manifest manifest;
};

// Both checkpoints of a run; stage1 is present only for tilt_transfer.
struct ExperimentResult {
  std::optional<Checkpoint> stage1;
  Checkpoint final_ckpt;
};

// sha256 of the corpus in its one-utterance-per-line text form, and of a
// tensor's raw payload. These back the manifest and the freeze checks.
std::string corpus_digest(const CleanCorpus& corpus);
std::string tensor_digest(const TensorF& tensor);

using StepCallback = std::function<void(const StepLoss&)>;

// Stage 1 of tilt_transfer: tokenizer + model trained on l1, no freezing.
Checkpoint pretrain_l1(const ExperimentPlan& plan, const StepCallback& on_step = {});

// Trains a fresh tokenizer on l2 and rebuilds the lexical tensors
// (token_embeddings, mlm_out_bias, and mlm_out_w when untied) at the new
// vocabulary size with seeded Normal(0, init_std^2) draws. Every other
// tensor is copied from ckpt unchanged.
GraftResult graft_l2_vocab(const Checkpoint& ckpt, const CleanCorpus& l2_corpus,
                           std::uint64_t seed);

// Stage 2: trains under the graft's freeze mask, then verifies the frozen
// tensors are still bit-identical to the grafted input. A violation throws
// std::logic_error; it means the trainer is broken, not the inputs.
Checkpoint tilt_finetune(const GraftResult& grafted, const CleanCorpus& l2_corpus,
                         const TrainConfig& stage2_train, const StepCallback& on_step = {});

// Fresh seeded model, L2 tokenizer, training from init with everything but
// the lexical tensors frozen. No L1 stage.
Checkpoint random_baseline(const ExperimentPlan& plan, const StepCallback& on_step = {});

// Tokenizer + model trained on l2 with no freezing.
Checkpoint from_scratch(const ExperimentPlan& plan, const StepCallback& on_step = {});

// Dispatches on plan.variant and runs all stages. on_stage1 sees pretrain
// (or the single from_scratch stage); on_stage2 sees fine-tuning (or the
// single random_baseline stage).
ExperimentResult run_experiment(const ExperimentPlan& plan, const StepCallback& on_stage1 = {},
                                const StepCallback& on_stage2 = {});

}  // namespace tiltlab
