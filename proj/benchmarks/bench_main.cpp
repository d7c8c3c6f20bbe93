#include <benchmark/benchmark.h>

#include <random>

#include "t3/image.hpp"
#include "t3/model.hpp"
#include "t3/ops.hpp"
#include "t3/synthgel.hpp"

using namespace t3;

namespace {

Tensor<float> random_tensor(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor<float>(shape, std::move(v));
}

ModelSpec nano() {
  ModelSpec s;
  s.size = size_config("nano");
  s.sensors = {"gel"};
  s.share_map = {{"gel", "gel"}};
  s.tasks = {standard_task("object_cls"), standard_task("pose3")};
  return s;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(196)->Arg(512);

void BM_Conv3x3(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto x = random_tensor({1, c, 14, 14}, 3), k = random_tensor({c, c, 3, 3}, 4);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, k));
}
BENCHMARK(BM_Conv3x3)->Arg(64)->Arg(128);

void BM_NanoForward(benchmark::State& state) {
  const auto model = T3Model<float>::assemble(nano(), 1);
  const auto x = random_tensor({static_cast<std::size_t>(state.range(0)), 3, 224, 224}, 5);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(model.forward("gel", "object_cls", {x}));
}
BENCHMARK(BM_NanoForward)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_NanoTrainStep(benchmark::State& state) {
  auto model = T3Model<float>::assemble(nano(), 1);
  const auto x = random_tensor({8, 3, 224, 224}, 6);
  const std::vector<int> labels{0, 1, 2, 3, 4, 5, 0, 1};
  for (auto _ : state) {
    model.zero_grad();
    const auto loss = cross_entropy(model.forward("gel", "object_cls", {x}), std::span<const int>(labels));
    loss.backward();
  }
}
BENCHMARK(BM_NanoTrainStep)->Unit(benchmark::kMillisecond);

void BM_RenderFrame(benchmark::State& state) {
  const auto style = default_styles(1)[0];
  const Image flat = flat_image(style);
  int i = 0;
  for (auto _ : state) {
    const Contact c{i % kNumProbes, 0.1 * (i % 20) - 1.0, 0.5, 1.0};
    benchmark::DoNotOptimize(render(style, flat, c));
    ++i;
  }
}
BENCHMARK(BM_RenderFrame)->Unit(benchmark::kMicrosecond);

void BM_JpegRoundtrip(benchmark::State& state) {
  const auto style = default_styles(1)[0];
  const Image img = render(style, flat_image(style), Contact{2, 0.0, 0.0, 1.2});
  for (auto _ : state) benchmark::DoNotOptimize(decode_jpeg(encode_jpeg(img)));
}
BENCHMARK(BM_JpegRoundtrip)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
