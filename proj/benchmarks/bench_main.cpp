#include <benchmark/benchmark.h>

#include <cmath>
#include <string>

#include "vqc/config.hpp"
#include "vqc/training.hpp"

namespace {

using namespace vqc;

RunConfig desk_config() {
  RunConfig cfg = load_run_config(std::string(VQC_SOURCE_DIR) + "/configs/desk_single_ris.json");
  cfg.train.threads = 1;
  return cfg;
}

void BM_RisSteering(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  double mu = 0.3;
  for (auto _ : state) {
    benchmark::DoNotOptimize(ris_steering(mu, 0.7, n, 4, 1.0));
    mu += 1e-6;
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_RisSteering)->Arg(16)->Arg(64)->Arg(256);

void BM_MeasureBatch(benchmark::State& state) {
  const RunConfig cfg = desk_config();
  const auto batch = static_cast<std::size_t>(state.range(0));
  const auto episodes = make_episodes(cfg.layout, cfg.pilot(), cfg.train.rician_factor,
                                      cfg.model.T, 1, 0, batch, StreamTag::train);
  const auto channels = compile_channels(episodes);
  std::vector<Complex> noise(batch);
  for (auto _ : state) {
    ad::Tape tape;
    const ad::Var w = tape.constant(ad::Array(batch, 2 * cfg.layout.M, 1.0 / std::sqrt(2.0)));
    const ad::Var theta = tape.leaf(ad::Array(batch, 2 * cfg.layout.N, 0.5));
    const ad::Var y = measure_batch(w, std::span<const ad::Var>(&theta, 1), channels, cfg.pilot(),
                                    noise);
    benchmark::DoNotOptimize(y.value().data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_MeasureBatch)->Arg(64)->Arg(256);

void BM_TrainStep(benchmark::State& state) {
  RunConfig cfg = desk_config();
  cfg.train.threads = static_cast<std::size_t>(state.range(0));
  TrainState train_state = init_train_state(cfg.model, cfg.layout, cfg.train.seed);
  const auto batch = make_episodes(cfg.layout, cfg.pilot(), cfg.train.rician_factor,
                                   cfg.model.T, 1, 0, cfg.train.batch_size, StreamTag::train);
  for (auto _ : state) {
    benchmark::DoNotOptimize(train_step(train_state, batch, cfg.model, cfg.train, cfg.pilot()));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch.size()));
}
BENCHMARK(BM_TrainStep)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
