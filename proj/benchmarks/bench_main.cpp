#include <benchmark/benchmark.h>

#include "uninpaint/corruption.hpp"
#include "uninpaint/data.hpp"
#include "uninpaint/nets.hpp"
#include "uninpaint/rng.hpp"
#include "uninpaint/training.hpp"

using namespace uninpaint;

namespace {

ModelSpecs specs_for(std::int64_t which) {
    return which == 0 ? toy_specs() : desk_specs(64);
}

ObservationSet observations(const ModelSpecs& specs, std::int64_t n) {
    const auto res = specs.generator.resolution;
    torch::manual_seed(0);
    auto clean = torch::rand({n, specs.generator.image_channels, res, res});
    return corrupt_once(clean, MeasurementConfig::drop_pixel(0.5), 0, false);
}

} // namespace

// Generator forward pass in eval mode; arg 0 = toy specs, 1 = desk specs.
static void BM_GeneratorForward(benchmark::State& st) {
    torch::set_num_threads(1);
    const auto specs = specs_for(st.range(0));
    const auto batch = st.range(1);
    Generator g(specs.generator);
    g->eval();
    auto set = observations(specs, batch);
    auto z = normal_rows(0, Stream::Latent, 0, batch, specs.generator.z_dim);
    torch::NoGradGuard ng;
    for (auto _ : st) {
        benchmark::DoNotOptimize(g->forward(set.y, set.mask, z));
    }
    st.SetItemsProcessed(st.iterations() * batch);
}
BENCHMARK(BM_GeneratorForward)->Args({0, 32})->Args({1, 8})->Unit(benchmark::kMillisecond);

// One full update (D, then G and E) with both encoding losses on.
static void BM_TrainUpdate(benchmark::State& st) {
    torch::set_num_threads(1);
    const auto specs = specs_for(st.range(0));
    TrainConfig cfg;
    cfg.batch_size = st.range(1);
    cfg.accumulation_steps = 1;
    cfg.measurement = MeasurementConfig::drop_pixel(0.5);
    auto state = make_train_state(specs, cfg);
    auto set = observations(specs, cfg.batch_size);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(cfg.batch_size));
    for (std::size_t i = 0; i < idx.size(); ++i) {
        idx[i] = static_cast<std::int64_t>(i);
    }
    const auto batch = set.batch(idx);
    for (auto _ : st) {
        benchmark::DoNotOptimize(train_update(state, std::span(&batch, 1), cfg));
    }
    st.SetItemsProcessed(st.iterations() * cfg.batch_size);
}
BENCHMARK(BM_TrainUpdate)->Args({0, 32})->Args({1, 8})->Unit(benchmark::kMillisecond);

// Mask sampling for both corruption processes at 64x64.
static void BM_SampleMask(benchmark::State& st) {
    const auto cfg = st.range(0) == 0 ? MeasurementConfig::patch(1, 32) : MeasurementConfig::drop_pixel(0.9);
    auto engine = stream_engine(0, Stream::FreshMask);
    for (auto _ : st) {
        benchmark::DoNotOptimize(sample_mask(cfg, 64, 64, engine));
    }
}
BENCHMARK(BM_SampleMask)->Arg(0)->Arg(1);
BENCHMARK_MAIN();
