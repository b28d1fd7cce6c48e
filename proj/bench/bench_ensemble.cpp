#include <benchmark/benchmark.h>

#include "ntkorders/mc_ensemble.hpp"

using namespace ntkorders;

namespace {

const InputSet& inputs() {
    static const InputSet x(std::vector<std::vector<double>>{{-0.9895229339599609, -0.5992491841316223},
                                                             {-0.17877478897571564, 2.253682851791382},
                                                             {1.0237634181976318, -0.4618060886859894},
                                                             {-0.5364212393760681, 1.9298086166381836}});
    return x;
}

std::vector<Observable> observables(int layer) {
    std::vector<Observable> obs;
    for (auto k : {ObservableKind::K, ObservableKind::Theta, ObservableKind::V4, ObservableKind::D, ObservableKind::F,
                   ObservableKind::A, ObservableKind::B})
        obs.push_back({k, layer});
    return obs;
}

void BM_parallel(benchmark::State& state) {
    const int width = static_cast<int>(state.range(0));
    const auto spec = make_uniform_spec(2, width, 3, make_activation(ActivationKind::relu), 2.0, 1);
    EnsembleOptions opts;
    opts.n_net = 128;
    opts.workers = static_cast<int>(state.range(1));
    for (auto _ : state) benchmark::DoNotOptimize(run_ensemble(spec, inputs(), observables(3), opts));
    state.SetItemsProcessed(state.iterations() * opts.n_net);
}

void BM_serial_reference(benchmark::State& state) {
    const int width = static_cast<int>(state.range(0));
    const auto spec = make_uniform_spec(2, width, 3, make_activation(ActivationKind::relu), 2.0, 1);
    EnsembleOptions opts;
    opts.n_net = 128;
    for (auto _ : state) benchmark::DoNotOptimize(run_ensemble_reference(spec, inputs(), observables(3), opts));
    state.SetItemsProcessed(state.iterations() * opts.n_net);
}

}  // namespace

BENCHMARK(BM_parallel)->Args({16, 1})->Args({64, 1})->Args({64, 4})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_serial_reference)->Args({16, 1})->Args({64, 1})->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
