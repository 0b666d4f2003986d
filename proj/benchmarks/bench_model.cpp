#include <benchmark/benchmark.h>

#include <cstdint>
#include <string>

#include "tiltlab/blimp.hpp"
#include "tiltlab/model.hpp"
#include "tiltlab/rng.hpp"
#include "tiltlab/transfer.hpp"

using namespace tiltlab;

namespace {

ModelConfig bench_config(std::size_t n_layers, std::size_t vocab) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.n_heads = 4;
  c.d_model = 64;
  c.d_ff = 256;
  c.max_seq_len = 64;
  c.vocab_size = vocab;
  return c;
}

Tensor<TokenId> random_ids(std::size_t batch, std::size_t len, std::size_t vocab,
                           std::uint64_t seed) {
  Tensor<TokenId> ids({batch, len});
  Rng rng(seed);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    ids[i] = static_cast<TokenId>(kBpeSpecialCount + rng.below(vocab - kBpeSpecialCount));
  }
  return ids;
}

void bm_forward_mlm(benchmark::State& state) {
  const auto layers = static_cast<std::size_t>(state.range(0));
  const auto config = bench_config(layers, 512);
  const auto params = init_params(config, 1);
  const auto ids = random_ids(8, 32, config.vocab_size, 2);
  const auto pad = Tensor<std::uint8_t>::full({8, 32}, 1);
  for (auto _ : state) {
    auto logits = forward_mlm(params, ids, pad);
    benchmark::DoNotOptimize(logits.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * 8 * 32);
}

void bm_pll_score(benchmark::State& state) {
  CleanCorpus corpus;
  corpus.language = "english";
  corpus.reg = Register::conversational_ads;
  corpus.utterances = {"the cat sat on the mat", "a dog ran in the park",
                       "the bird flew over the house", "a cat and a dog played"};

  Checkpoint ckpt;
  ckpt.tokenizer = train_bpe(corpus, kBpeBaseSize + 40, 1);
  auto config = bench_config(2, ckpt.tokenizer.size());
  ckpt.params = init_params(config, 3);
  ckpt.manifest.variant = "from_scratch";
  ckpt.manifest.stage = "L2";

  const std::string sentence = "the dog sat on the mat in the park";
  for (auto _ : state) {
    benchmark::DoNotOptimize(pll_score(ckpt, sentence));
  }
}

}  // namespace

BENCHMARK(bm_forward_mlm)->Arg(2)->Arg(8)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_pll_score)->Unit(benchmark::kMillisecond);
