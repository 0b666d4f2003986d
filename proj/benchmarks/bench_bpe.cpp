#include <benchmark/benchmark.h>

#include <string>
#include <vector>

#include "tiltlab/bpe.hpp"
#include "tiltlab/corpus.hpp"
#include "tiltlab/rng.hpp"

using namespace tiltlab;

namespace {

// A synthetic corpus with CDS-like word-frequency skew: a small core
// vocabulary repeated often plus a long tail of rarer words.
CleanCorpus synthetic_corpus(std::size_t n_sentences, std::uint64_t seed) {
  static const char* kCore[] = {"the", "a",  "you",   "want", "look", "at",  "ball",
                                "dog", "it", "is",    "that", "what", "this", "one",
                                "see", "go", "there", "good", "yes",  "no"};
  CleanCorpus corpus;
  corpus.language = "english";
  corpus.reg = Register::cds;
  Rng rng(seed);
  for (std::size_t s = 0; s < n_sentences; ++s) {
    std::string sentence;
    const std::size_t words = 3 + rng.below(8);
    for (std::size_t w = 0; w < words; ++w) {
      if (!sentence.empty()) sentence += ' ';
      if (rng.below(10) < 8) {
        sentence += kCore[rng.below(20)];
      } else {
        sentence += "word" + std::to_string(rng.below(400));
      }
    }
    corpus.utterances.push_back(std::move(sentence));
  }
  return corpus;
}

void bm_bpe_train(benchmark::State& state) {
  const auto corpus = synthetic_corpus(static_cast<std::size_t>(state.range(0)), 11);
  for (auto _ : state) {
    auto model = train_bpe(corpus, kBpeBaseSize + 200, 2);
    benchmark::DoNotOptimize(model.size());
  }
}

void bm_bpe_encode(benchmark::State& state) {
  const auto corpus = synthetic_corpus(2000, 11);
  const auto model = train_bpe(corpus, kBpeBaseSize + 200, 2);
  std::size_t bytes = 0;
  for (const auto& u : corpus.utterances) bytes += u.size();

  std::size_t i = 0;
  for (auto _ : state) {
    auto ids = encode(model, corpus.utterances[i % corpus.utterances.size()]);
    benchmark::DoNotOptimize(ids.data());
    ++i;
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(bytes / corpus.utterances.size()));
}

void bm_bpe_round_trip(benchmark::State& state) {
  const auto corpus = synthetic_corpus(2000, 11);
  const auto model = train_bpe(corpus, kBpeBaseSize + 200, 2);
  std::size_t i = 0;
  for (auto _ : state) {
    const auto& text = corpus.utterances[i % corpus.utterances.size()];
    auto back = decode(model, encode(model, text));
    benchmark::DoNotOptimize(back.data());
    ++i;
  }
}

}  // namespace

BENCHMARK(bm_bpe_train)->Arg(500)->Arg(2000)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_bpe_encode);
BENCHMARK(bm_bpe_round_trip);
