#include <benchmark/benchmark.h>

#include <random>

#include "pmg/generator.hpp"
#include "pmg/llm.hpp"
#include "pmg/metrics.hpp"

using namespace pmg;

namespace {

Image random_image(std::uint64_t seed, std::size_t size) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image img(3, size, size);
    for (double& v : img.pixels.data) v = u(rng);
    return img;
}

const GeneratorModels& models() {
    static const GeneratorModels m = GeneratorModels::create({});
    return m;
}

void BM_Denoise(benchmark::State& state) {
    const Image noisy = random_image(1, 16);
    const ConditionSequence cond = models().encoder.encode({"red", "cotton", "striped", "shirt"});
    for (auto _ : state) benchmark::DoNotOptimize(models().denoiser.denoise(noisy, cond));
}
BENCHMARK(BM_Denoise);

void BM_Generate(benchmark::State& state) {
    const ConditionSequence cond = models().encoder.encode({"red", "cotton", "striped", "shirt"});
    std::uint64_t seed = 0;
    for (auto _ : state) benchmark::DoNotOptimize(generate(models(), cond, seed++));
}
BENCHMARK(BM_Generate);

void BM_Ssim(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Image a = random_image(2, n), b = random_image(3, n);
    for (auto _ : state) benchmark::DoNotOptimize(ssim(a, b));
}
BENCHMARK(BM_Ssim)->Arg(16)->Arg(64);

void BM_PerceptualDistance(benchmark::State& state) {
    const ToyLpipsFeatures features;
    const Image a = random_image(4, 16), b = random_image(5, 16);
    for (auto _ : state) benchmark::DoNotOptimize(perceptual_distance(a, b, features));
}
BENCHMARK(BM_PerceptualDistance);

void BM_SoftEmbeddings(benchmark::State& state) {
    const ToyLanguageModel lm;
    const TrainableState s = TrainableState::initialize({}, 1);
    const std::string prompt =
        "### Principle: recommend clothes\n### Human: His history is: 1. red, cotton, summer, sporty, striped, shirt; "
        "2. red, cotton, summer, sporty, striped, skirt\n### Assistant:";
    for (auto _ : state) benchmark::DoNotOptimize(soft_preference_embeddings(lm, s, prompt));
}
BENCHMARK(BM_SoftEmbeddings);

}  // namespace

BENCHMARK_MAIN();
