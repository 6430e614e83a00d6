#include <benchmark/benchmark.h>

#include <random>

#include "flowibr/model.hpp"
#include "flowibr/synthdata.hpp"
#include "flowibr/trainer.hpp"

using namespace flowibr;
using diff::Matrix;

namespace {

Matrix random_points(Eigen::Index n) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Matrix p(n, 3);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
  p.col(2).array() += 3.0;
  return p;
}

FlowField make_field() {
  FlowFieldConfig cfg;
  cfg.num_frames = 12;
  return FlowField(cfg, 1);
}

}  // namespace

static void BM_FlowEvalBatch(benchmark::State& state) {
  const FlowField field = make_field();
  const Matrix pts = random_points(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(field.eval_batch(pts, 4.0));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_FlowEvalBatch)->Arg(256)->Arg(4096);

static void BM_FlowTapeBackward(benchmark::State& state) {
  const FlowField field = make_field();
  FlowField scratch = make_field();
  const Matrix pts = random_points(state.range(0));
  for (auto _ : state) {
    diff::Tape tape;
    const auto b = field.bind(tape);
    const diff::Var out = field.eval(tape, b, tape.constant(pts), 4);
    tape.backward(tape.sum(tape.square(out)), scratch.params());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_FlowTapeBackward)->Arg(256)->Arg(4096);

static void BM_RenderImage(benchmark::State& state) {
  const SceneSpec spec = make_scene("plane-slide", 6, 48, 27);
  const Dataset data = generate_dataset(spec, 2);
  TrainConfig cfg;
  cfg.model.flow.num_frames = spec.num_frames;
  cfg.finalize();
  const Model model(cfg.model, 0);
  RenderOptions ro;
  ro.samples = static_cast<int>(state.range(0));
  for (auto _ : state) {
    benchmark::DoNotOptimize(render_image(model, data.frames, spec.camera(3), 3.0, ro));
  }
  state.SetItemsProcessed(state.iterations() * 48 * 27);
}
BENCHMARK(BM_RenderImage)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

static void BM_TrainStep(benchmark::State& state) {
  const SceneSpec spec = make_scene("plane-slide", 6, 96, 54);
  const Dataset data = generate_dataset(spec, 2);
  TrainConfig cfg;
  cfg.model.flow.num_frames = spec.num_frames;
  cfg.rays_per_step = 128;
  cfg.subsample_schedule = {{0, 6}};
  cfg.finalize();
  Model model(cfg.model, 0);
  const Level level = build_level(data, 6);
  std::int64_t step = 0;
  for (auto _ : state) {
    std::mt19937_64 rng = step_rng(cfg.seed, step);
    const RayBatch batch = sample_ray_batch(level, cfg, step, rng);
    benchmark::DoNotOptimize(train_step(model, level, cfg, step, batch, rng));
    ++step;
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
