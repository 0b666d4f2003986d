#include "tiltlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "tiltlab/rng.hpp"

namespace tiltlab {

namespace {

bool maskable(TokenId id) { return id >= static_cast<TokenId>(kBpeSpecialCount); }

}  // namespace

std::vector<MaskedBatch> make_masked_batches(const std::vector<TokenSeq>& corpus_ids,
                                             const TrainConfig& config, std::uint64_t epoch) {
  config.validate();
  Rng rng(mix_seed(config.seed, epoch));
  std::vector<std::size_t> order(corpus_ids.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);

  std::vector<MaskedBatch> batches;
  const TokenId pad = 0, mask = 4;
  for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
    const std::size_t b = std::min(config.batch_size, order.size() - start);
    std::size_t t = 0;
    for (std::size_t i = 0; i < b; ++i) t = std::max(t, corpus_ids[order[start + i]].size());

    MaskedBatch batch;
    batch.input_ids = Tensor<TokenId>::full({b, t}, pad);
    batch.labels = Tensor<TokenId>::full({b, t}, kIgnoreId);
    batch.pad_mask = Tensor<std::uint8_t>({b, t});
    for (std::size_t i = 0; i < b; ++i) {
      const TokenSeq& seq = corpus_ids[order[start + i]];
      bool any_eligible = false;
      for (TokenId id : seq) any_eligible = any_eligible || maskable(id);
      std::vector<bool> masked(seq.size(), false);
      if (any_eligible) {
        bool got_one = false;
        while (!got_one) {
          for (std::size_t j = 0; j < seq.size(); ++j) {
            masked[j] = maskable(seq[j]) && rng.uniform() < config.mask_prob;
            got_one = got_one || masked[j];
          }
        }
      }
      for (std::size_t j = 0; j < seq.size(); ++j) {
        batch.input_ids.at({i, j}) = masked[j] ? mask : seq[j];
        batch.labels.at({i, j}) = masked[j] ? seq[j] : kIgnoreId;
        batch.pad_mask.at({i, j}) = 1;
      }
      for (std::size_t j = seq.size(); j < t; ++j) batch.pad_mask.at({i, j}) = 0;
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

void adam_step(ParameterSet& params, const ag::Gradients<float>& grads, AdamState& state,
               const FreezeMask& mask, const TrainConfig& config) {
  state.step += 1;
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (const std::string& name : mask.trainable) {
    auto git = grads.find(name);
    if (git == grads.end()) {
      throw std::invalid_argument("adam_step: missing gradient for trainable parameter " + name);
    }
    TensorF& p = params.tensors.at(name);
    const TensorF& g = git->second;
    if (g.shape() != p.shape()) {
      throw std::invalid_argument("adam_step: gradient shape " + TensorF::shape_str(g.shape()) +
                                  " != parameter shape " + TensorF::shape_str(p.shape()) +
                                  " for " + name);
    }
    TensorF& m = state.m.try_emplace(name, TensorF(p.shape())).first->second;
    TensorF& v = state.v.try_emplace(name, TensorF(p.shape())).first->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
      const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double update = (mi / bc1) / (std::sqrt(vi / bc2) + config.adam_eps);
      double pi = static_cast<double>(p[i]);
      pi -= config.learning_rate * (update + config.weight_decay * pi);
      p[i] = static_cast<float>(pi);
    }
  }
}

TrainResult train(const ParameterSet& params, const CleanCorpus& corpus,
                  const BpeModel& tokenizer, const TrainConfig& config, const FreezeMask& mask,
                  const std::function<void(const StepLoss&)>& on_step) {
  config.validate();
  if (corpus.utterances.empty()) throw std::invalid_argument("train: corpus is empty");
  validate_freeze(params, mask);

  std::vector<TokenSeq> ids;
  ids.reserve(corpus.utterances.size());
  for (const std::string& u : corpus.utterances) {
    ids.push_back(encode(tokenizer, u, params.config.max_seq_len));
  }

  TrainResult result;
  result.params = params;
  AdamState state;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.n_epochs && step < config.max_steps; ++epoch) {
    auto batches = make_masked_batches(ids, config, epoch);
    for (const MaskedBatch& batch : batches) {
      if (step >= config.max_steps) break;
      auto graph = make_mlm_graph<float>(result.params, mask.trainable);
      auto logits = mlm_logits(graph, batch.input_ids, batch.pad_mask);
      auto loss = mlm_loss(logits, batch.labels);
      const double loss_value = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(loss_value)) {
        throw std::runtime_error("train: non-finite loss at step " + std::to_string(step + 1));
      }
      auto grads = ag::backward(loss, graph.leaves());
      adam_step(result.params, grads, state, mask, config);
      ++step;
      StepLoss entry{step, epoch, loss_value};
      result.trace.push_back(entry);
      if (on_step) on_step(entry);
    }
  }
  return result;
}

}  // namespace tiltlab
