#include <benchmark/benchmark.h>

#include <vector>

#include "mantis/conditioner.hpp"
#include "mantis/kernels.hpp"
#include "mantis/model.hpp"
#include "mantis/ops.hpp"
#include "mantis/rng.hpp"

namespace {

using namespace mantis;

std::vector<float> random_vec(std::size_t n, Rng& rng) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

void BM_GemmNN(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const auto a = random_vec(n * n, rng), b = random_vec(n * n, rng);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    std::fill(c.begin(), c.end(), 0.0f);
    kernels::gemm_nn(a.data(), b.data(), c.data(), n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 2 * n * n * n));
}
BENCHMARK(BM_GemmNN)->Arg(64)->Arg(128)->Arg(256);

void BM_Attention(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  const std::size_t d = 64;
  Rng rng(2);
  const auto q = Tensor<float>::from({t, d}, random_vec(t * d, rng));
  const auto k = Tensor<float>::from({t, d}, random_vec(t * d, rng));
  const auto v = Tensor<float>::from({t, d}, random_vec(t * d, rng));
  std::vector<std::uint8_t> mask(t * t, 0);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j <= i; ++j) mask[i * t + j] = 1;
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(attention(q, k, v, mask, 4).data().data());
}
BENCHMARK(BM_Attention)->Arg(32)->Arg(64)->Arg(128);

void BM_TrainStepSample(benchmark::State& state) {
  ModelConfig cfg;
  cfg.vocab_size = 600;
  DecoderLM<float> model(cfg, 3);
  Rng rng(4);
  ConditioningBundle b;
  for (int i = 0; i < 3; ++i) {
    Image img{24, 24, 1, random_vec(24 * 24, rng)};
    b.images.push_back(img);
  }
  for (int i = 0; i < 5; ++i) b.name_ids.push_back(static_cast<int>(rng.below(500)));
  for (int i = 0; i < 22; ++i) b.target_ids.push_back(static_cast<int>(rng.below(500)));
  const SpecialTokens sp{596, 597, 598, 599};
  const PreparedInput in = prepare_input(b, sp, cfg);
  for (auto _ : state) {
    Rng drop(5);
    const auto loss = model.loss(in, b, ForwardOptions{true, &drop, false});
    backward(loss);
  }
}
BENCHMARK(BM_TrainStepSample)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
