#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "kvc/analysis.hpp"
#include "kvc/controller.hpp"
#include "kvc/model.hpp"
#include "kvc/policies.hpp"
#include "kvc/stats.hpp"
#include "kvc/tensor.hpp"

namespace {

kvc::ModelConfig bench_config() {
    kvc::ModelConfig c;
    c.n_layers = 4;
    c.n_heads = 8;
    c.n_kv_heads = 2;
    c.head_dim = 64;
    c.hidden_dim = 512;
    c.ffn_dim = 1024;
    c.vocab_size = 1024;
    c.max_position = 8192;
    return c;
}

const kvc::Model& bench_model() {
    static const kvc::Model model = kvc::random_model(bench_config(), {.seed = 1});
    return model;
}

/// Prefilled cache plus the statistics a compression pass needs.
struct Prefilled {
    explicit Prefilled(std::size_t n, kvc::PolicyId policy = kvc::PolicyId::ExpectedAttention)
        : cache(bench_model().make_cache()), config([&] {
              kvc::CompressionConfig c;
              c.policy = policy;
              c.ratio = 0.5;
              return c;
          }()),
          observers(bench_model(), config) {
        const auto tokens = kvc::random_tokens(n, bench_model().config().vocab_size, n);
        bench_model().forward(tokens, cache, &observers.list);
    }

    kvc::KvCache cache;
    kvc::CompressionConfig config;
    kvc::PrefillObservers observers;
};

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    std::mt19937 rng(0);
    std::normal_distribution<float> nd;
    kvc::Tensor a({n, n}), b({n, n});
    for (auto& x : a.data()) x = nd(rng);
    for (auto& x : b.data()) x = nd(rng);
    for (auto _ : state) {
        benchmark::DoNotOptimize(kvc::matmul(a, b));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

void BM_Prefill(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto tokens = kvc::random_tokens(n, bench_model().config().vocab_size, 3);
    for (auto _ : state) {
        auto cache = bench_model().make_cache();
        benchmark::DoNotOptimize(bench_model().forward(tokens, cache));
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Prefill)->Arg(128)->Arg(512)->Unit(benchmark::kMillisecond);

void BM_DecodeStep(benchmark::State& state) {
    Prefilled pre(static_cast<std::size_t>(state.range(0)));
    const std::vector<kvc::TokenId> next{7};
    for (auto _ : state) {
        state.PauseTiming();
        auto cache = pre.cache;
        state.ResumeTiming();
        benchmark::DoNotOptimize(bench_model().forward(next, cache));
    }
}
BENCHMARK(BM_DecodeStep)->Arg(512)->Arg(2048)->Unit(benchmark::kMicrosecond);

void BM_ExpectedAttentionScores(benchmark::State& state) {
    Prefilled pre(static_cast<std::size_t>(state.range(0)));
    const auto inputs = pre.observers.inputs();
    for (auto _ : state) {
        benchmark::DoNotOptimize(kvc::score_layer(bench_model(), pre.cache, 0, pre.config, inputs, 0));
    }
    state.SetItemsProcessed(state.iterations() * state.range(0) * 2);
}
BENCHMARK(BM_ExpectedAttentionScores)->Arg(512)->Arg(2048)->Unit(benchmark::kMicrosecond);

void BM_CompressPrefill(benchmark::State& state) {
    const auto policy = static_cast<kvc::PolicyId>(state.range(1));
    Prefilled pre(static_cast<std::size_t>(state.range(0)), policy);
    state.SetLabel(std::string(kvc::policy_name(policy)));
    for (auto _ : state) {
        state.PauseTiming();
        auto cache = pre.cache;
        state.ResumeTiming();
        benchmark::DoNotOptimize(kvc::compress_prefill(bench_model(), cache, pre.observers.inputs(), pre.config));
    }
}
BENCHMARK(BM_CompressPrefill)
    ->ArgsProduct({{1024},
                   {static_cast<int>(kvc::PolicyId::ExpectedAttention), static_cast<int>(kvc::PolicyId::KNorm),
                    static_cast<int>(kvc::PolicyId::Tova), static_cast<int>(kvc::PolicyId::SnapKv),
                    static_cast<int>(kvc::PolicyId::KeyDiff)}})
    ->Unit(benchmark::kMillisecond);

void BM_HeadAdaptiveAllocation(benchmark::State& state) {
    const auto heads = static_cast<std::size_t>(state.range(0));
    const auto len = static_cast<std::size_t>(state.range(1));
    std::mt19937 rng(5);
    std::uniform_real_distribution<float> u;
    std::vector<kvc::ScoreVector> scores(heads, kvc::ScoreVector(len));
    for (auto& h : scores)
        for (auto& x : h) x = u(rng);
    const std::size_t budget = kvc::layer_budget(heads * len, 0.75);
    for (auto _ : state) {
        benchmark::DoNotOptimize(kvc::allocate_head_adaptive(scores, budget, 1));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(heads * len));
}
BENCHMARK(BM_HeadAdaptiveAllocation)->Args({2, 1024})->Args({8, 4096})->Unit(benchmark::kMicrosecond);

void BM_QueryMomentsUpdate(benchmark::State& state) {
    const auto d = static_cast<std::size_t>(state.range(0));
    kvc::QueryMoments m(d);
    std::vector<float> q(d, 0.5f);
    for (auto _ : state) {
        m.update(q);
    }
    state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_QueryMomentsUpdate)->Arg(64)->Arg(128);

} // namespace

BENCHMARK_MAIN();
