#include <benchmark/benchmark.h>

#include <random>
#include <string>
#include <vector>

#include "hembed/encoder.hpp"
#include "hembed/retrieval.hpp"
#include "hembed/synthetic.hpp"
#include "hembed/tokenizer.hpp"

using namespace hembed;

namespace {

std::vector<double> unit(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> g;
  std::vector<double> v(dim);
  double n = 0.0;
  for (auto& x : v) {
    x = g(rng);
    n += x * x;
  }
  for (auto& x : v) x /= std::sqrt(n);
  return v;
}

void BM_Search(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto mode = state.range(1) ? retrieval::IndexMode::int8 : retrieval::IndexMode::float32;
  std::mt19937_64 rng(1);
  retrieval::VectorIndex index(64, mode);
  for (std::size_t i = 0; i < n; ++i) index.add("d" + std::to_string(i), unit(rng, 64));
  const auto q = unit(rng, 64);
  for (auto _ : state) benchmark::DoNotOptimize(index.search(q, 10));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n));
}
BENCHMARK(BM_Search)->Args({1000, 0})->Args({10000, 0})->Args({10000, 1})->Args({100000, 0});

void BM_EncoderEmbed(benchmark::State& state) {
  encoder::EncoderConfig c;
  c.vocab_size = 2000;
  c.n_layers = static_cast<std::size_t>(state.range(1));
  const auto w = encoder::EncoderWeights::init(c, 3);
  std::mt19937_64 rng(2);
  std::vector<int> ids(static_cast<std::size_t>(state.range(0)));
  for (auto& id : ids) id = static_cast<int>(8 + rng() % 1992);
  for (auto _ : state) benchmark::DoNotOptimize(encoder::embed_ids(c, w, ids));
}
BENCHMARK(BM_EncoderEmbed)->Args({16, 2})->Args({64, 2})->Args({128, 2})->Args({128, 4});

void BM_ViterbiEncode(benchmark::State& state) {
  synthetic::ToyConfig tc;
  tc.train_docs = 500;
  const auto toy = synthetic::make_toy_corpus(tc);
  std::vector<std::string> texts;
  for (const auto& r : toy.train) texts.push_back(r.text);
  const auto model = tokenizer::train_unigram(texts, {});
  std::size_t i = 0;
  for (auto _ : state) benchmark::DoNotOptimize(tokenizer::encode(model, texts[i++ % texts.size()]));
}
BENCHMARK(BM_ViterbiEncode);

}  // namespace
BENCHMARK_MAIN();
