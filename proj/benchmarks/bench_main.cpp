#include <benchmark/benchmark.h>

#include <vector>

#include "vkn/harness.hpp"
#include "vkn/losses.hpp"
#include "vkn/metrics.hpp"
#include "vkn/synthdata.hpp"
#include "vkn/tracker.hpp"

namespace {

using namespace vkn;

SceneSpec bench_spec(int size) {
  SceneSpec s;
  s.seed = 3;
  s.num_frames = 4;
  s.height = size;
  s.width = size;
  s.num_things = 3;
  s.min_size = size / 6;
  s.max_size = size / 4;
  return s;
}

void BM_ForwardFrame(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0));
  const RunConfig cfg = run_preset("default");
  const auto model = build_model(cfg);
  const SyntheticVideo v = generate_video(bench_spec(size));
  const Tensor image = video_tensors(v).front();
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(model->forward_frame(image, nullptr));
}
BENCHMARK(BM_ForwardFrame)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_TrackVideo(benchmark::State& state) {
  const RunConfig cfg = run_preset("default");
  const auto model = build_model(cfg);
  const SyntheticVideo v = generate_video(bench_spec(64));
  const std::vector<Tensor> frames = video_tensors(v);
  for (auto _ : state) benchmark::DoNotOptimize(step_video(*model, frames, v.gt.classes, cfg.tracker));
  state.SetItemsProcessed(state.iterations() * static_cast<long long>(frames.size()));
}
BENCHMARK(BM_TrackVideo)->Unit(benchmark::kMillisecond);

void BM_Hungarian(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(5);
  Tensor cost({n, n});
  for (double& x : cost.storage()) x = rng.uniform(-1.0, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(match_from_costs(cost));
}
BENCHMARK(BM_Hungarian)->RangeMultiplier(2)->Range(4, 64);

void BM_VideoMetrics(benchmark::State& state) {
  SceneSpec spec = bench_spec(64);
  spec.num_frames = static_cast<int>(state.range(0));
  const SyntheticVideo gt = generate_video(spec);
  spec.seed = 4;  // a different scene stands in for the prediction
  const SyntheticVideo pred = generate_video(spec);
  for (auto _ : state) {
    MetricAccumulator acc(gt.gt.classes);
    acc.add_video(pred.gt, gt.gt);
    benchmark::DoNotOptimize(acc.report());
  }
}
BENCHMARK(BM_VideoMetrics)->Arg(4)->Arg(16)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
