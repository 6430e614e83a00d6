#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "flowibr/evaluation.hpp"
#include "flowibr/trainer.hpp"
#include "test_support.hpp"

using namespace flowibr;
namespace fs = std::filesystem;

namespace {

// Static wall seen by one fixed camera at every frame: true optical flow is zero.
Dataset static_dataset() {
  SceneSpec s;
  s.width = 48;
  s.height = 36;
  s.num_frames = 4;
  s.cameras.assign(4, CameraMatrix::from_pinhole(45, 45, 23.5, 17.5, 48, 36));
  Primitive wall;
  wall.center = Vec3(0, 0, 3.5);
  wall.half_u = 10;
  wall.half_v = 10;
  s.primitives.push_back(wall);
  return generate_dataset(s, 3);
}

const Dataset& small_dynamic() {
  static const Dataset d = generate_dataset(make_scene("plane-slide", 5, 48, 36, 1.0, 2), 3);
  return d;
}

TrainConfig small_config(std::int64_t steps) {
  TrainConfig c;
  c.total_steps = steps;
  c.rays_per_step = 64;
  c.samples_per_ray = 8;
  c.subsample_schedule = {{0, 6}};
  c.source_schedule = {{0, 2}};
  c.checkpoint_every = 0;
  c.model.flow.width = 16;
  c.model.flow.encoding.frequencies = 3;
  c.model.flow.window = 3;
  return c;
}

Model make_model(const TrainConfig& c, const Dataset& d) {
  ModelConfig m = c.model;
  m.flow.num_frames = d.num_frames();
  m.ibr.near = d.spec.near;
  m.ibr.far = d.spec.far;
  return Model(m, c.seed);
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("flowibr_trainer_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(SelectSources, Examples) {
  EXPECT_EQ(select_sources(5, 2, 10), (std::vector<int>{4, 6}));
  EXPECT_EQ(select_sources(1, 3, 10), (std::vector<int>{2, 3, 4}));
  EXPECT_EQ(select_sources(5, 4, 10), (std::vector<int>{3, 4, 6, 7}));
  EXPECT_EQ(select_sources(5, 3, 10), (std::vector<int>{3, 4, 6}));
  EXPECT_EQ(select_sources(2, 20, 4), (std::vector<int>{1, 3, 4}));
}

TEST(SelectSources, NeverIncludesTarget) {
  for (int t = 1; t <= 12; ++t)
    for (int k = 1; k <= 11; ++k) {
      const auto s = select_sources(t, k, 12);
      EXPECT_EQ(static_cast<int>(s.size()), std::min(k, 11));
      EXPECT_EQ(std::count(s.begin(), s.end(), t), 0);
      EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
    }
}

TEST(SamplePixels, UnmaskedAndFullyMaskedAreUniform) {
  for (std::uint8_t fill : {0, 1}) {
    const Mask m(10, 10, fill);
    std::mt19937_64 rng(fill);
    std::vector<int> hits(100, 0);
    for (int i = 0; i < 2000; ++i)
      for (Pixel p : sample_pixels(m, 5, 5.0, rng)) ++hits[p.y * 10 + p.x];
    // 100 draws per pixel expected, binomial sd about 10.
    for (int h : hits) {
      EXPECT_GT(h, 50);
      EXPECT_LT(h, 150);
    }
  }
}

TEST(SamplePixels, BoostedFractionMatchesBinomial) {
  Mask m(100, 100);
  for (int y = 0; y < 100; ++y)
    for (int x = 0; x < 50; ++x) m.at(x, y) = 1;
  std::mt19937_64 rng(42);
  int masked = 0, total = 0;
  for (int rep = 0; rep < 400; ++rep) {
    for (Pixel p : sample_pixels(m, 10, 5.0, rng)) {
      masked += m.at(p.x, p.y);
      ++total;
    }
  }
  const double p = 5.0 / 6.0;
  const double sigma = std::sqrt(p * (1 - p) / total);
  EXPECT_NEAR(static_cast<double>(masked) / total, p, 3 * sigma);
}

TEST(SamplePixels, WithoutReplacementAndCappedAtPixelCount) {
  const Mask m(4, 3);
  std::mt19937_64 rng(1);
  const auto all = sample_pixels(m, 100, 5.0, rng);
  EXPECT_EQ(all.size(), 12u);
  std::set<int> seen;
  for (Pixel p : all) seen.insert(p.y * 4 + p.x);
  EXPECT_EQ(seen.size(), 12u);
}

TEST(TrainConfig, DefaultSchedules) {
  TrainConfig c;
  c.finalize();
  EXPECT_EQ(c.subsample_schedule, (Schedule{{0, 12}, {2000, 10}, {4000, 8}, {6000, 6}}));
  EXPECT_EQ(c.source_schedule, (Schedule{{0, 2}, {1600, 4}, {3200, 6}, {4800, 10}}));
  EXPECT_EQ(c.subsample_at(1999), 12);
  EXPECT_EQ(c.subsample_at(2000), 10);
  EXPECT_EQ(c.subsample_at(7999), 6);
  EXPECT_EQ(c.sources_at(4800), 10);
}

TEST(TrainConfig, SchedulesAreMonotone) {
  TrainConfig c;
  c.total_steps = 777;
  c.finalize();
  for (std::int64_t s = 1; s < 777; ++s) {
    EXPECT_LE(c.subsample_at(s), c.subsample_at(s - 1));
    EXPECT_GE(c.sources_at(s), c.sources_at(s - 1));
  }
}

TEST(TrainConfig, SingleEntryScheduleIsConstantResolution) {
  const TrainConfig c = train_config_from_json(R"({"subsample_schedule": [[0, 6]]})");
  EXPECT_EQ(c.subsample_at(0), 6);
  EXPECT_EQ(c.subsample_at(7999), 6);
}

TEST(TrainConfig, RejectsBadSchedulesAtLoad) {
  EXPECT_THROW(train_config_from_json(R"({"subsample_schedule": [[0, 12], [10, 10], [5, 8]]})"),
               std::invalid_argument);
  EXPECT_THROW(train_config_from_json(R"({"subsample_schedule": [[5, 12]]})"), std::invalid_argument);
  EXPECT_THROW(train_config_from_json(R"({"subsample_schedule": [[0, 7]]})"), std::invalid_argument);
  EXPECT_THROW(train_config_from_json(R"({"subsample_schedule": [[0, 4]]})"), std::invalid_argument);
  EXPECT_THROW(train_config_from_json(R"({"subsample_schedule": [[0, 6], [10, 8]]})"),
               std::invalid_argument);
  EXPECT_THROW(train_config_from_json(R"({"source_schedule": [[0, 4], [10, 2]]})"),
               std::invalid_argument);
  EXPECT_THROW(train_config_from_json(R"({"no_such_field": 1})"), std::invalid_argument);
}

TEST(TrainConfig, JsonRoundTrip) {
  TrainConfig c = small_config(321);
  c.weights.alpha_slow = 0.25;
  c.lr_backbone = 3e-6;
  c.finalize();
  const TrainConfig r = train_config_from_json(train_config_to_json(c));
  EXPECT_EQ(r.total_steps, 321);
  EXPECT_EQ(r.weights.alpha_slow, 0.25);
  EXPECT_EQ(r.lr_backbone, 3e-6);
  EXPECT_EQ(r.subsample_schedule, c.subsample_schedule);
  EXPECT_EQ(r.model.flow.width, 16);
  EXPECT_EQ(train_config_to_json(r), train_config_to_json(c));
}

TEST(TrainConfig, LearningRateHalves) {
  TrainConfig c;
  c.finalize();
  EXPECT_EQ(c.lr_flow_at(0), 1e-3);
  EXPECT_EQ(c.lr_flow_at(1999), 1e-3);
  EXPECT_EQ(c.lr_flow_at(2000), 5e-4);
  EXPECT_EQ(c.lr_backbone_at(4000), 2.5e-6);
}

TEST(LossNormalizers, AreMeansOverTheirElements) {
  const LossComponents n = loss_normalizers(10, 4, 2);
  EXPECT_DOUBLE_EQ(n.rgb, 1.0 / 30);
  EXPECT_DOUBLE_EQ(n.of, 1.0 / 40);
  EXPECT_DOUBLE_EQ(n.cyc, 1.0 / 240);
  EXPECT_DOUBLE_EQ(n.temp, 1.0 / 120);
  EXPECT_DOUBLE_EQ(n.slow, 1.0 / 240);
  EXPECT_DOUBLE_EQ(n.spat, 1.0 / 480);
}

TEST(BuildLevel, AveragesImagesAndScalesFlows) {
  const Dataset& d = small_dynamic();
  const Level lv = build_level(d, 6);
  EXPECT_EQ(lv.width, 8);
  EXPECT_EQ(lv.height, 6);
  double expect = 0.0;
  for (int dy = 0; dy < 6; ++dy)
    for (int dx = 0; dx < 6; ++dx) expect += d.frame(2).image.at(12 + dx, 6 + dy, 1);
  EXPECT_NEAR(lv.frames[1].image.at(2, 1, 1), expect / 36, 1e-6);
  // Any-hit downsampled masks.
  for (int y = 0; y < lv.height; ++y)
    for (int x = 0; x < lv.width; ++x) {
      bool any = false;
      for (int dy = 0; dy < 6; ++dy)
        for (int dx = 0; dx < 6; ++dx) any |= d.masks[2].at(x * 6 + dx, y * 6 + dy) != 0;
      EXPECT_EQ(lv.masks[2].at(x, y) != 0, any);
    }
  // A block whose fine flows are all defined averages them and divides by f.
  int checked = 0;
  for (int y = 0; y < lv.height; ++y)
    for (int x = 0; x < lv.width; ++x) {
      Vec2 acc = Vec2::Zero();
      int n = 0;
      for (int dy = 0; dy < 6; ++dy)
        for (int dx = 0; dx < 6; ++dx)
          if (auto o = d.flow(3, 4, x * 6 + dx, y * 6 + dy)) acc += *o, ++n;
      if (n != 36) continue;
      const auto coarse = lv.flow(3, 4, x, y);
      ASSERT_TRUE(coarse);
      EXPECT_LT((*coarse - acc / 216.0).norm(), 1e-12);
      ++checked;
    }
  EXPECT_GT(checked, 10);
}

TEST(SampleRayBatch, ConstantRayBudget) {
  const Dataset d = generate_dataset(make_scene("plane-slide", 12, 96, 54), 5);
  TrainConfig c;
  c.rays_per_step = 100;
  c.subsample_schedule = {{0, 6}};
  c.source_schedule = {{0, 2}, {10, 3}, {20, 4}, {30, 6}};
  c.finalize();
  const Level lv = build_level(d, 6);
  for (std::int64_t step = 0; step < 40; ++step) {
    std::mt19937_64 rng = step_rng(1, step);
    const RayBatch b = sample_ray_batch(lv, c, step, rng);
    const int k = static_cast<int>(b.sources.size());
    EXPECT_LE(k, c.sources_at(step));
    for (int s : b.sources) EXPECT_LE(std::abs(s - b.target), 5);
    EXPECT_EQ(static_cast<int>(b.pixels.size()), 100 / k);
    EXPECT_LE(100 - k * static_cast<int>(b.pixels.size()), k - 1);
    EXPECT_EQ(b.gt_flows.size(), b.sources.size());
    EXPECT_EQ(b.colors.rows(), static_cast<Eigen::Index>(b.pixels.size()));
  }
}

TEST(StepRng, DependsOnSeedAndStep) {
  EXPECT_EQ(step_rng(3, 7)(), step_rng(3, 7)());
  EXPECT_NE(step_rng(3, 7)(), step_rng(3, 8)());
  EXPECT_NE(step_rng(3, 7)(), step_rng(4, 7)());
}

TEST(TrainStep, StaticSceneKeepsFlowNearZero) {
  // Default model and batch; a fixed camera makes the zero field an exact optimum.
  const Dataset d = static_dataset();
  TrainConfig c;
  c.total_steps = 100;
  c.subsample_schedule = {{0, 6}};
  c.source_schedule = {{0, 2}};
  c.checkpoint_every = 0;
  c.model.flow.window = 3;
  c.finalize();
  Model m = make_model(c, d);
  run_schedule(m, c, d);
  double worst = 0.0;
  std::mt19937_64 rng(0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    const Vec3 p(u(rng), u(rng), 3.5 + 1.5 * u(rng));
    const FlowPair f = m.flow.eval(p, 1 + i % 4);
    worst = std::max({worst, f.forward.cwiseAbs().maxCoeff(), f.backward.cwiseAbs().maxCoeff()});
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(TrainStep, SmallStepDescends) {
  const Dataset& d = small_dynamic();
  TrainConfig c = small_config(10);
  c.jitter_samples = false;
  c.lr_flow = 1e-6;
  c.lr_backbone = 1e-6;
  c.finalize();
  Model m = make_model(c, d);
  m.flow = flowibr::testing::random_field(5, d.num_frames(), 3, 16, 0.1, 3);
  const Level lv = build_level(d, 6);
  std::mt19937_64 rng = step_rng(0, 0);
  const RayBatch b = sample_ray_batch(lv, c, 0, rng);
  std::mt19937_64 r1(1), r2(1);
  const double before = train_step(m, lv, c, 0, b, r1).total;
  const double after = evaluate_batch(m, lv, c, 0, b, r2).total;
  EXPECT_LT(after, before);
}

TEST(RunSchedule, SameSeedGivesIdenticalTraces) {
  const Dataset& d = small_dynamic();
  TrainConfig c = small_config(12);
  c.finalize();
  Model a = make_model(c, d), b = make_model(c, d);
  const fs::path da = scratch("trace_a"), db = scratch("trace_b");
  const RunResult ra = run_schedule(a, c, d, {da, std::nullopt, std::nullopt, {}});
  const RunResult rb = run_schedule(b, c, d, {db, std::nullopt, std::nullopt, {}});
  ASSERT_EQ(ra.log.size(), 12u);
  for (std::size_t i = 0; i < ra.log.size(); ++i) EXPECT_EQ(ra.log[i].total, rb.log[i].total);
  EXPECT_EQ(slurp(da / "metrics.csv"), slurp(db / "metrics.csv"));
  EXPECT_TRUE(a.flow.params().bitwise_equal(b.flow.params()));
  EXPECT_TRUE(fs::exists(da / "final.bin"));
  fs::remove_all(da);
  fs::remove_all(db);
}

TEST(RunSchedule, ThreadCountDoesNotChangeResults) {
  const Dataset& d = small_dynamic();
  TrainConfig c = small_config(4);
  c.chunk_rays = 4;
  c.finalize();
  Model a = make_model(c, d), b = make_model(c, d);
  setenv("FLOWIBR_THREADS", "1", 1);
  run_schedule(a, c, d);
  setenv("FLOWIBR_THREADS", "3", 1);
  run_schedule(b, c, d);
  unsetenv("FLOWIBR_THREADS");
  EXPECT_TRUE(a.flow.params().bitwise_equal(b.flow.params()));
  EXPECT_TRUE(a.ibr.params().bitwise_equal(b.ibr.params()));
}

TEST(RunSchedule, LogsScheduleTransitions) {
  const Dataset& d = small_dynamic();
  TrainConfig c = small_config(6);
  c.subsample_schedule = {{0, 12}, {2, 8}, {4, 6}};
  c.source_schedule = {{0, 2}, {3, 4}};
  c.finalize();
  Model m = make_model(c, d);
  const RunResult r = run_schedule(m, c, d);
  const std::vector<int> f = {12, 12, 8, 8, 6, 6};
  for (int s = 0; s < 6; ++s) {
    EXPECT_EQ(r.log[s].factor, f[s]);
    EXPECT_EQ(r.log[s].step, s);
  }
  EXPECT_EQ(r.log[2].sources, 2);
  EXPECT_GE(r.log[3].sources, 3);
}

TEST(RunSchedule, ResumeIsBitwiseIdentical) {
  const Dataset& d = small_dynamic();
  TrainConfig c = small_config(10);
  c.checkpoint_every = 4;
  c.finalize();
  const fs::path full = scratch("full"), part = scratch("part");
  Model a = make_model(c, d);
  run_schedule(a, c, d, {full, std::nullopt, std::nullopt, {}});
  ASSERT_TRUE(fs::exists(full / "ckpt_000004.bin"));
  ASSERT_TRUE(fs::exists(full / "ckpt_000008.bin"));

  Model b = make_model(c, d);
  const RunResult first = run_schedule(b, c, d, {part, std::nullopt, 6, {}});
  EXPECT_EQ(first.steps_done, 6);
  Model resumed = make_model(c, d);
  const RunResult second = run_schedule(resumed, c, d, {part, full / "ckpt_000004.bin", std::nullopt, {}});
  EXPECT_EQ(second.steps_done, 10);
  EXPECT_TRUE(resumed.flow.params().bitwise_equal(a.flow.params()));
  EXPECT_TRUE(resumed.ibr.params().bitwise_equal(a.ibr.params()));
  EXPECT_EQ(slurp(part / "metrics.csv"), slurp(full / "metrics.csv"));
  fs::remove_all(full);
  fs::remove_all(part);
}

TEST(RunSchedule, MovingObjectDoesNotCollapseToZeroFlow) {
  const SceneSpec s = make_scene("plane-slide", 12, 96, 54);
  const Dataset d = generate_dataset(s);
  TrainConfig c;
  c.total_steps = 1500;
  c.subsample_schedule = {{0, 6}};
  c.source_schedule = {{0, 4}};
  c.checkpoint_every = 0;
  c.model.flow.num_frames = s.num_frames;
  c.model.flow.encoding.frequencies = 4;
  c.finalize();
  Model m(c.model, c.seed);
  const RunResult r = run_schedule(m, c, d);
  // Average the logged masked-ray flow over the last 200 steps to smooth batch noise.
  double mean = 0.0;
  for (std::size_t i = r.log.size() - 200; i < r.log.size(); ++i) mean += r.log[i].mean_flow_masked / 200.0;
  const double truth = evaluate_flow_recovery(m.flow, s, {3, 6, 9}).mean_gt_displacement;
  EXPECT_GT(truth, 0.0);
  EXPECT_GT(mean, 0.5 * truth);
}
