// Serial reference vs OpenMP kernels on a shared posterior.

#include <benchmark/benchmark.h>

#include "onebox/model_eval.hpp"
#include "onebox/predictive.hpp"

using namespace onebox;

namespace {

struct Fixture {
  CycleSchedule s = standard_schedule(3, 15, 20, 10, 1);
  MeasurementSeries y;
  PosteriorSamples ps;
  PredictionRequest req;
  DrawMatrix ll;

  Fixture() {
    MechParams p;
    p.G = 1000;
    p.Q = 20;
    y = simulate_experiment(p, ModelKind::Model101, s, 0.05, {}, 10, 3).series;
    ChainConfig cfg;
    cfg.n_burn = 500;
    cfg.n_keep = 4000;
    ps = run_chain(y, s, ModelKind::Model101, PriorSpec{}, cfg);
    for (double t = 0; t <= s.horizon() + 15; t += 1) req.z_times.push_back(t);
    ll = pointwise_loglik_serial(ps, y);
  }
};

const Fixture& fx() {
  static const Fixture f;
  return f;
}

void BM_loglik_serial(benchmark::State& st) {
  for (auto _ : st) benchmark::DoNotOptimize(pointwise_loglik_serial(fx().ps, fx().y));
}
void BM_loglik_parallel(benchmark::State& st) {
  for (auto _ : st) benchmark::DoNotOptimize(pointwise_loglik(fx().ps, fx().y));
}
void BM_waic_serial(benchmark::State& st) {
  for (auto _ : st) benchmark::DoNotOptimize(waic_serial(fx().ll));
}
void BM_waic_parallel(benchmark::State& st) {
  for (auto _ : st) benchmark::DoNotOptimize(waic(fx().ll));
}
void BM_smooth_serial(benchmark::State& st) {
  for (auto _ : st) benchmark::DoNotOptimize(smooth_latent_serial(fx().ps, fx().s, fx().req));
}
void BM_smooth_parallel(benchmark::State& st) {
  for (auto _ : st) benchmark::DoNotOptimize(smooth_latent(fx().ps, fx().s, fx().req));
}
void BM_predict_serial(benchmark::State& st) {
  for (auto _ : st)
    benchmark::DoNotOptimize(predict_observations_serial(fx().ps, fx().s, fx().req));
}
void BM_predict_parallel(benchmark::State& st) {
  for (auto _ : st) benchmark::DoNotOptimize(predict_observations(fx().ps, fx().s, fx().req));
}

}  // namespace

BENCHMARK(BM_loglik_serial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_loglik_parallel)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_waic_serial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_waic_parallel)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_smooth_serial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_smooth_parallel)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_predict_serial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_predict_parallel)->Unit(benchmark::kMillisecond);

int main(int argc, char** argv) {
  fx();  // build the shared posterior outside the timed loops
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
