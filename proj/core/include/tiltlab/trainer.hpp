#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "tiltlab/autodiff.hpp"
#include "tiltlab/bpe.hpp"
#include "tiltlab/corpus.hpp"
#include "tiltlab/errors.hpp"
#include "tiltlab/model.hpp"
#include "tiltlab/tensor.hpp"

// Masked-LM training: batch construction with mask-only corruption, Adam with
// bias correction restricted to trainable tensors, and the epoch/step-capped
// loop. Everything is seeded; two runs with the same inputs produce the same
// parameters and the same loss trace.

namespace tiltlab {

// Label value for positions that do not contribute to the loss.
inline constexpr TokenId kIgnoreId = -100;

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 16;
  std::size_t n_epochs = 10;
  std::size_t max_steps = 260;
  double mask_prob = 0.15;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const {
    if (learning_rate <= 0) throw ConfigError("train config: learning_rate must be > 0");
    if (mask_prob <= 0 || mask_prob >= 1) {
      throw ConfigError("train config: mask_prob must be in (0,1)");
    }
    if (batch_size == 0) throw ConfigError("train config: batch_size must be > 0");
  }
};

struct MaskedBatch {
  Tensor<TokenId> input_ids;       // [B,T], masked positions hold the mask id
  Tensor<TokenId> labels;          // [B,T], original ids at masked positions, else kIgnoreId
  Tensor<std::uint8_t> pad_mask;   // [B,T], 1 = real token
};

// First/second moments exist only for trainable names; created lazily on the
// first step that touches them.
struct AdamState {
  std::map<std::string, TensorF> m;
  std::map<std::string, TensorF> v;
  std::uint64_t step = 0;
};

struct StepLoss {
  std::size_t step;   // 1-based optimizer step
  std::size_t epoch;  // 0-based epoch the step belongs to
  double loss;
};

struct TrainResult {
  ParameterSet params;
  std::vector<StepLoss> trace;
};

// Shuffles sequence order with a generator seeded from (seed, epoch), masks
// each non-special position independently with probability mask_prob
// (re-drawing any sequence that ends up with zero masks), and pads each batch
// to its longest member. Corruption is mask-only: no random-token or
// keep-original substitution.
std::vector<MaskedBatch> make_masked_batches(const std::vector<TokenSeq>& corpus_ids,
                                             const TrainConfig& config, std::uint64_t epoch);

// Mean cross entropy over labelled positions.
template <typename T>
ag::Var<T> mlm_loss(const ag::Var<T>& logits, const Tensor<TokenId>& labels) {
  return ag::cross_entropy(logits, labels, kIgnoreId);
}

// One Adam update over the trainable names, in place. Frozen tensors are not
// touched at all. Weight decay is decoupled (applied directly to the
// parameter, not through the moments). Throws std::invalid_argument when a
// trainable name has no gradient.
void adam_step(ParameterSet& params, const ag::Gradients<float>& grads, AdamState& state,
               const FreezeMask& mask, const TrainConfig& config);

// Encodes the corpus, then loops epochs over make_masked_batches until either
// n_epochs or max_steps optimizer steps, whichever comes first. on_step fires
// after every optimizer step, in order. Throws std::runtime_error naming the
// step if the loss ever goes non-finite.
TrainResult train(const ParameterSet& params, const CleanCorpus& corpus,
                  const BpeModel& tokenizer, const TrainConfig& config, const FreezeMask& mask,
                  const std::function<void(const StepLoss&)>& on_step = {});

}  // namespace tiltlab
