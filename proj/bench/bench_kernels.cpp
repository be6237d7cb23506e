// Serial reference gradient vs the chunked OpenMP kernel on a desk-sized batch.

#include "lol/distribution.hpp"
#include "lol/kernels.hpp"
#include "lol/network.hpp"

#include <benchmark/benchmark.h>
#include <omp.h>

namespace {

struct Fixture {
    lol::Dataset ds;
    lol::Network net;

    Fixture(int m, int d, int n) {
        const auto params = lol::make_params(d, 0.25, 0.2, {.r = 0.1}, 1);
        lol::Rng data_rng(2);
        ds = lol::generate_dataset(params, n, data_rng);
        lol::Rng init_rng(3);
        net = lol::init_network(m, d, 0.05, init_rng);
    }
};

Fixture& fixture(int m) {
    static Fixture f256(256, 100, 1600);
    static Fixture f1024(1024, 100, 1600);
    static Fixture f4096(4096, 100, 1600);
    return m == 256 ? f256 : m == 1024 ? f1024 : f4096;
}

void BM_ReferenceGradient(benchmark::State& state) {
    Fixture& f = fixture(static_cast<int>(state.range(0)));
    const std::vector<double> coeff(f.ds.size(), -0.5 / static_cast<double>(f.ds.size()));
    for (auto _ : state) {
        auto g = lol::reference::gradient(f.net, f.net.weights, f.ds.examples(), coeff);
        benchmark::DoNotOptimize(g.w.data());
    }
}

void BM_KernelGradient(benchmark::State& state) {
    Fixture& f = fixture(static_cast<int>(state.range(0)));
    omp_set_num_threads(static_cast<int>(state.range(1)));
    const lol::CompiledBatch batch = lol::compile_batch(f.ds, 1);
    lol::BatchEvaluator eval(batch);
    const lol::Vector coeff = lol::Vector::Constant(batch.n, -0.5 / batch.n);
    for (auto _ : state) {
        eval.forward(f.net);
        auto g = eval.backward(f.net, coeff);
        benchmark::DoNotOptimize(g.w.data());
    }
}

}  // namespace

BENCHMARK(BM_ReferenceGradient)->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_KernelGradient)
    ->ArgsProduct({{256, 1024, 4096}, {1, 2, 4}})
    ->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
