#include <benchmark/benchmark.h>

#include "rangevit/ops.hpp"
#include "rangevit/pointops.hpp"
#include "rangevit/scene.hpp"

using namespace rangevit;

namespace {

Tensor<float> randn(Shape shape, Rng& rng) {
  std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return Tensor<float>::from_data(std::move(shape), std::move(v));
}

std::vector<float> random_cloud(int64_t n, double extent, Rng& rng) {
  std::vector<float> xyz(static_cast<size_t>(n) * 3);
  for (auto& v : xyz) v = static_cast<float>(rng.uniform(-extent, extent));
  return xyz;
}

}  // namespace

static void BM_Conv3x3(benchmark::State& state) {
  Rng rng(1);
  const Tensor<float> x = randn({1, 32, 16, 128}, rng);
  const Tensor<float> w = randn({32, 32, 3, 3}, rng);
  const Tensor<float> b = randn({32}, rng);
  Conv2dOpts opts;
  opts.pad = {1, 1};
  for (auto _ : state) {
    Tensor<float> y = conv2d(x, w, b, opts);
    benchmark::DoNotOptimize(y.value().data());
  }
  state.SetItemsProcessed(state.iterations() * x.numel());
}
BENCHMARK(BM_Conv3x3)->Unit(benchmark::kMillisecond);

static void BM_AttentionBlock(benchmark::State& state) {
  const int64_t t = state.range(0), d = 384, dff = 4 * d;
  Rng rng(2);
  const Tensor<float> tokens = randn({t, d}, rng);
  AttentionParams<float> p;
  p.ln1_gain = Tensor<float>::full({d}, 1.0f);
  p.ln1_bias = Tensor<float>::zeros({d});
  p.qkv_weight = randn({3 * d, d}, rng);
  p.qkv_bias = Tensor<float>::zeros({3 * d});
  p.proj_weight = randn({d, d}, rng);
  p.proj_bias = Tensor<float>::zeros({d});
  p.ln2_gain = Tensor<float>::full({d}, 1.0f);
  p.ln2_bias = Tensor<float>::zeros({d});
  p.fc1_weight = randn({dff, d}, rng);
  p.fc1_bias = Tensor<float>::zeros({dff});
  p.fc2_weight = randn({d, dff}, rng);
  p.fc2_bias = Tensor<float>::zeros({d});
  p.heads = 6;
  for (auto _ : state) {
    Tensor<float> y = attention_block(tokens, p);
    benchmark::DoNotOptimize(y.value().data());
  }
  state.SetItemsProcessed(state.iterations() * t);
}
BENCHMARK(BM_AttentionBlock)->Arg(193)->Arg(769)->Unit(benchmark::kMillisecond);

static void BM_RadiusNeighbors(benchmark::State& state) {
  const int64_t n = state.range(0);
  Rng rng(3);
  const auto xyz = random_cloud(n, 8.0, rng);
  for (auto _ : state) {
    NeighborIndex idx = radius_neighbors(xyz, xyz, 1.2, 32);
    benchmark::DoNotOptimize(idx.lists.data());
  }
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_RadiusNeighbors)->Arg(4096)->Arg(16384)->Unit(benchmark::kMillisecond);

static void BM_KPConv(benchmark::State& state) {
  const int64_t n = state.range(0);
  Rng rng(4);
  const auto xyz = random_cloud(n, 8.0, rng);
  const NeighborIndex idx = radius_neighbors(xyz, xyz, 1.2, 32);
  const KernelDisposition disp = KernelDisposition::make(15, 1.2);
  const Tensor<float> features = randn({n, 32}, rng);
  const Tensor<float> weights = randn({15, 32, 32}, rng);
  for (auto _ : state) {
    Tensor<float> y = kpconv(features, xyz, xyz, idx, disp, weights);
    benchmark::DoNotOptimize(y.value().data());
  }
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_KPConv)->Arg(4096)->Unit(benchmark::kMillisecond);

static void BM_SphericalProjection(benchmark::State& state) {
  SceneSpec spec;
  spec.beams = 32;
  spec.width = 256;
  spec.seed = 7;
  const PointCloud cloud = generate_scene(spec);
  for (auto _ : state) {
    RangeImage image = spherical_project(cloud, spec.fov, spec.beams, spec.width);
    benchmark::DoNotOptimize(image.features.data());
  }
  state.SetItemsProcessed(state.iterations() * cloud.size());
}
BENCHMARK(BM_SphericalProjection)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
