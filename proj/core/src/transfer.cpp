#include "tiltlab/transfer.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>

#include "tiltlab/digest.hpp"

namespace tiltlab {

namespace {

bool bits_equal(const TensorF& a, const TensorF& b) {
  if (a.shape() != b.shape()) return false;
  if (a.size() == 0) return true;
  return std::memcmp(a.storage().data(), b.storage().data(), a.size() * sizeof(float)) == 0;
}

std::vector<std::string> sorted_names(const FreezeMask& mask) {
  return {mask.trainable.begin(), mask.trainable.end()};
}

// The tensors whose leading axis is the vocabulary. These are rebuilt at
// grafting; everything else crosses the stage boundary untouched.
bool is_lexical(const std::string& name) {
  return name == "token_embeddings" || name == "mlm_out_bias" ||
         name == modeldetail::kLexicalOutW;
}

Checkpoint train_single_stage(const ExperimentPlan& plan, FreezePolicy policy,
                              const TrainConfig& train_config, const std::string& stage,
                              const StepCallback& on_step) {
  BpeModel tokenizer = train_bpe(plan.l2_corpus, plan.model_config.vocab_size,
                                 plan.bpe_min_frequency);
  ModelConfig config = plan.model_config;
  config.vocab_size = tokenizer.size();
  ParameterSet params = init_params(config, plan.seed);
  FreezeMask mask = resolve_freeze(params, policy);
  TrainResult result = train(params, plan.l2_corpus, tokenizer, train_config, mask, on_step);

  Checkpoint ckpt;
  ckpt.params = std::move(result.params);
  ckpt.tokenizer = std::move(tokenizer);
  ckpt.manifest.variant = variant_name(plan.variant);
  ckpt.manifest.stage = stage;
  ckpt.manifest.corpus_digests["l2"] = corpus_digest(plan.l2_corpus);
  ckpt.manifest.seeds["experiment"] = plan.seed;
  ckpt.manifest.trainable = sorted_names(mask);
  ckpt.manifest.bpe_vocab_ceiling = plan.model_config.vocab_size;
  ckpt.manifest.bpe_min_frequency = plan.bpe_min_frequency;
  ckpt.validate();
  return ckpt;
}

}  // namespace

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::tilt_transfer: return "tilt_transfer";
    case Variant::random_baseline: return "random_baseline";
    case Variant::from_scratch: return "from_scratch";
  }
  throw std::logic_error("variant_name: unhandled variant");
}

Variant parse_variant(const std::string& name) {
  if (name == "tilt_transfer") return Variant::tilt_transfer;
  if (name == "random_baseline") return Variant::random_baseline;
  if (name == "from_scratch") return Variant::from_scratch;
  throw ConfigError("unknown variant \"" + name +
                    "\" (expected tilt_transfer, random_baseline, or from_scratch)");
}

void ExperimentPlan::validate() const {
  model_config.validate();
  stage1_train.validate();
  stage2_train.validate();
  if (variant == Variant::tilt_transfer) {
    if (!l1_corpus) {
      throw ConfigError("experiment plan: variant tilt_transfer requires l1_corpus");
    }
    if (l1_corpus->utterances.empty()) {
      throw ConfigError("experiment plan: l1_corpus is empty");
    }
  } else {
    if (l1_corpus) {
      throw ConfigError("experiment plan: l1_corpus is only valid for variant tilt_transfer");
    }
    if (reuse_l1_tokenizer) {
      throw ConfigError("experiment plan: reuse_l1_tokenizer is only valid for tilt_transfer");
    }
  }
  if (l2_corpus.utterances.empty()) {
    throw ConfigError("experiment plan: l2_corpus is empty");
  }
  if (bpe_min_frequency == 0) {
    throw ConfigError("experiment plan: bpe_min_frequency must be positive");
  }
}

void Checkpoint::validate() const {
  params.config.validate();
  if (tokenizer.size() != params.config.vocab_size) {
    throw CorruptionError("checkpoint: tokenizer has " + std::to_string(tokenizer.size()) +
                          " tokens but the model vocab is " +
                          std::to_string(params.config.vocab_size));
  }
}

std::string corpus_digest(const CleanCorpus& corpus) {
  std::string text;
  for (const auto& u : corpus.utterances) {
    text += u;
    text += '\n';
  }
  return sha256_hex(text);
}

std::string tensor_digest(const TensorF& tensor) {
  return sha256_hex(tensor.storage().data(), tensor.size() * sizeof(float));
}

Checkpoint pretrain_l1(const ExperimentPlan& plan, const StepCallback& on_step) {
  plan.validate();
  if (plan.variant != Variant::tilt_transfer) {
    throw ConfigError("pretrain_l1: plan variant must be tilt_transfer");
  }
  const CleanCorpus& l1 = *plan.l1_corpus;
  BpeModel tokenizer = train_bpe(l1, plan.model_config.vocab_size, plan.bpe_min_frequency);
  ModelConfig config = plan.model_config;
  config.vocab_size = tokenizer.size();
  ParameterSet params = init_params(config, plan.seed);
  FreezeMask mask = resolve_freeze(params, FreezePolicy::none);
  TrainResult result = train(params, l1, tokenizer, plan.stage1_train, mask, on_step);

  Checkpoint ckpt;
  ckpt.params = std::move(result.params);
  ckpt.tokenizer = std::move(tokenizer);
  ckpt.manifest.variant = variant_name(plan.variant);
  ckpt.manifest.stage = "L1";
  ckpt.manifest.corpus_digests["l1"] = corpus_digest(l1);
  ckpt.manifest.seeds["experiment"] = plan.seed;
  ckpt.manifest.trainable = sorted_names(mask);
  ckpt.manifest.bpe_vocab_ceiling = plan.model_config.vocab_size;
  ckpt.manifest.bpe_min_frequency = plan.bpe_min_frequency;
  ckpt.validate();
  return ckpt;
}

GraftResult graft_l2_vocab(const Checkpoint& ckpt, const CleanCorpus& l2_corpus,
                           std::uint64_t seed) {
  ckpt.validate();
  const std::size_t ceiling = ckpt.manifest.bpe_vocab_ceiling
                                  ? ckpt.manifest.bpe_vocab_ceiling
                                  : ckpt.params.config.vocab_size;
  BpeModel tokenizer = train_bpe(l2_corpus, ceiling, ckpt.manifest.bpe_min_frequency);

  GraftResult out;
  out.params.config = ckpt.params.config;
  out.params.config.vocab_size = tokenizer.size();
  const std::size_t v = tokenizer.size();
  const std::size_t d = out.params.config.d_model;
  const double std_dev = out.params.config.init_std;
  for (const auto& [name, tensor] : ckpt.params.tensors) {
    if (is_lexical(name)) continue;
    out.params.tensors.emplace(name, tensor);
  }
  out.params.tensors.emplace("token_embeddings", seeded_gaussian({v, d}, seed,
                                                                 "token_embeddings", std_dev));
  out.params.tensors.emplace("mlm_out_bias", seeded_gaussian({v}, seed, "mlm_out_bias", std_dev));
  if (!out.params.config.tie_output_to_embeddings) {
    out.params.tensors.emplace(modeldetail::kLexicalOutW,
                               seeded_gaussian({v, d}, seed, modeldetail::kLexicalOutW, std_dev));
  }
  out.mask = resolve_freeze(out.params, FreezePolicy::all_but_word_embeddings);
  out.tokenizer = std::move(tokenizer);
  out.manifest = ckpt.manifest;
  out.manifest.corpus_digests["l2"] = corpus_digest(l2_corpus);
  out.manifest.seeds["graft"] = seed;
  out.manifest.trainable = sorted_names(out.mask);
  return out;
}

Checkpoint tilt_finetune(const GraftResult& grafted, const CleanCorpus& l2_corpus,
                         const TrainConfig& stage2_train, const StepCallback& on_step) {
  TrainResult result =
      train(grafted.params, l2_corpus, grafted.tokenizer, stage2_train, grafted.mask, on_step);
  for (const auto& [name, before] : grafted.params.tensors) {
    if (grafted.mask.trainable.count(name)) continue;
    if (!bits_equal(before, result.params.tensors.at(name))) {
      throw std::logic_error("internal error: frozen tensor " + name +
                             " changed during fine-tuning");
    }
  }
  Checkpoint ckpt;
  ckpt.params = std::move(result.params);
  ckpt.tokenizer = grafted.tokenizer;
  ckpt.manifest = grafted.manifest;
  ckpt.manifest.stage = "L2";
  ckpt.validate();
  return ckpt;
}

Checkpoint random_baseline(const ExperimentPlan& plan, const StepCallback& on_step) {
  plan.validate();
  if (plan.variant != Variant::random_baseline) {
    throw ConfigError("random_baseline: plan variant must be random_baseline");
  }
  return train_single_stage(plan, FreezePolicy::all_but_word_embeddings, plan.stage2_train,
                            "L2", on_step);
}

Checkpoint from_scratch(const ExperimentPlan& plan, const StepCallback& on_step) {
  plan.validate();
  if (plan.variant != Variant::from_scratch) {
    throw ConfigError("from_scratch: plan variant must be from_scratch");
  }
  return train_single_stage(plan, FreezePolicy::none, plan.stage1_train, "L2", on_step);
}

ExperimentResult run_experiment(const ExperimentPlan& plan, const StepCallback& on_stage1,
                                const StepCallback& on_stage2) {
  plan.validate();
  switch (plan.variant) {
    case Variant::tilt_transfer: {
      ExperimentResult result;
      result.stage1 = pretrain_l1(plan, on_stage1);
      if (plan.reuse_l1_tokenizer) {
        // Open-question mode: keep the L1 vocabulary, unfreeze its
        // embeddings in place, skip re-initialization.
        GraftResult kept;
        kept.params = result.stage1->params;
        kept.mask = resolve_freeze(kept.params, FreezePolicy::all_but_word_embeddings);
        kept.tokenizer = result.stage1->tokenizer;
        kept.manifest = result.stage1->manifest;
        kept.manifest.corpus_digests["l2"] = corpus_digest(plan.l2_corpus);
        kept.manifest.trainable = sorted_names(kept.mask);
        result.final_ckpt = tilt_finetune(kept, plan.l2_corpus, plan.stage2_train, on_stage2);
      } else {
        GraftResult grafted = graft_l2_vocab(*result.stage1, plan.l2_corpus,
                                             mix_seed(plan.seed, 0x67726166));
        result.final_ckpt = tilt_finetune(grafted, plan.l2_corpus, plan.stage2_train, on_stage2);
      }
      return result;
    }
    case Variant::random_baseline:
      return {std::nullopt, random_baseline(plan, on_stage2)};
    case Variant::from_scratch:
      return {std::nullopt, from_scratch(plan, on_stage1)};
  }
  throw std::logic_error("run_experiment: unhandled variant");
}

}  // namespace tiltlab
