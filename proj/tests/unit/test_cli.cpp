#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "flowibr/image_io.hpp"
#include "flowibr/metrics.hpp"
#include "flowibr/model.hpp"
#include "flowibr/synthdata.hpp"
#include "flowibr_cli/commands.hpp"

using namespace flowibr;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("flowibr_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// One small dataset plus a short training run shared by the render/eval/flowviz tests.
class Trained : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = scratch("trained");
    data_ = root_ / "data";
    run_dir_ = root_ / "run";
    ASSERT_EQ(run({"synth", "--scene", "plane-slide", "--frames", "6", "--width", "48", "--height", "36",
                   "--window", "3", "--out", data_.string()}).code, 0);
    {
      std::ofstream cfg(root_ / "cfg.json");
      cfg << R"({"rays_per_step": 64, "samples_per_ray": 8, "checkpoint_every": 2,
                 "flow": {"width": 16, "frequencies": 3, "window": 3}})";
    }
    const Result r = run({"train", "--data", data_.string(), "--config", (root_ / "cfg.json").string(),
                          "--out", run_dir_.string(), "--steps", "4", "--quiet"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static fs::path root_, data_, run_dir_;
};

fs::path Trained::root_, Trained::data_, Trained::run_dir_;

}  // namespace

TEST(Cli, NoArgumentsIsUsageError) {
  EXPECT_EQ(run({}).code, cli::kUsage);
  EXPECT_EQ(run({"bogus"}).code, cli::kUsage);
}

TEST(Cli, HelpSucceeds) {
  const Result r = run({"--help"});
  EXPECT_EQ(r.code, cli::kOk);
  EXPECT_NE(r.out.find("synth"), std::string::npos);
}

TEST(CliSynth, WritesTwelveFramesWithFlowAndMasks) {
  const fs::path out = scratch("synth12");
  const Result r = run({"synth", "--scene", "plane-slide", "--frames", "12", "--out", out.string()});
  ASSERT_EQ(r.code, cli::kOk) << r.err;
  const Dataset d = read_dataset(out);
  EXPECT_EQ(d.num_frames(), 12);
  EXPECT_EQ(d.spec.name, "plane-slide");
  for (int t = 1; t <= 12; ++t) {
    char name[32];
    std::snprintf(name, sizeof name, "flow_%04d.f64", t);
    EXPECT_TRUE(fs::exists(out / name));
    std::snprintf(name, sizeof name, "mask_%04d.pgm", t);
    EXPECT_TRUE(fs::exists(out / name));
  }
  EXPECT_GT(d.masks[5].count(), 0u);
  fs::remove_all(out);
}

TEST(CliSynth, SingleFrameIsConfigErrorAndWritesNothing) {
  const fs::path out = scratch("synth1");
  const Result r = run({"synth", "--frames", "1", "--out", out.string()});
  EXPECT_EQ(r.code, cli::kUsage);
  EXPECT_FALSE(r.err.empty());
  EXPECT_FALSE(fs::exists(out));
}

TEST(CliSynth, SameSeedGivesIdenticalBytes) {
  const fs::path a = scratch("seed_a"), b = scratch("seed_b");
  for (const fs::path& p : {a, b}) {
    ASSERT_EQ(run({"synth", "--scene", "two-objects", "--frames", "3", "--width", "32", "--height", "24",
                   "--seed", "5", "--out", p.string()}).code, 0);
  }
  int files = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename()));
    ++files;
  }
  EXPECT_GT(files, 10);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(CliSynth, RefusesNonEmptyDirectoryWithoutForce) {
  const fs::path out = scratch("force");
  fs::create_directories(out);
  std::ofstream(out / "keep.txt") << "x";
  EXPECT_EQ(run({"synth", "--frames", "2", "--width", "16", "--height", "16", "--out", out.string()}).code,
            cli::kUsage);
  EXPECT_FALSE(fs::exists(out / "manifest.json"));
  EXPECT_EQ(run({"synth", "--frames", "2", "--width", "16", "--height", "16", "--out", out.string(),
                 "--force"}).code, cli::kOk);
  EXPECT_TRUE(fs::exists(out / "manifest.json"));
  fs::remove_all(out);
}

TEST(CliTrain, BadConfigFailsBeforeWritingOutputs) {
  const fs::path root = scratch("badcfg");
  fs::create_directories(root);
  ASSERT_EQ(run({"synth", "--frames", "3", "--width", "24", "--height", "18", "--out", (root / "d").string()}).code, 0);
  std::ofstream(root / "cfg.json") << R"({"subsample_schedule": [[0, 5]]})";
  const Result r = run({"train", "--data", (root / "d").string(), "--config", (root / "cfg.json").string(),
                        "--out", (root / "run").string()});
  EXPECT_NE(r.code, cli::kOk);
  EXPECT_FALSE(fs::exists(root / "run"));
  fs::remove_all(root);
}

TEST_F(Trained, TrainWritesCheckpointsAndMetrics) {
  EXPECT_TRUE(fs::exists(run_dir_ / "ckpt_000002.bin"));
  EXPECT_TRUE(fs::exists(run_dir_ / "final.bin"));
  EXPECT_TRUE(fs::exists(run_dir_ / "config.json"));
  std::ifstream csv(run_dir_ / "metrics.csv");
  std::string header, line;
  std::getline(csv, header);
  EXPECT_EQ(header.rfind("step,total,rgb,of,cyc,temp,slow,spat,f,sources", 0), 0u);
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 4);
}

TEST_F(Trained, ResumeReproducesTheFinalCheckpoint) {
  const fs::path other = root_ / "resumed";
  fs::create_directories(other);
  fs::copy_file(run_dir_ / "metrics.csv", other / "metrics.csv");
  const Result r = run({"train", "--data", data_.string(), "--config", (root_ / "cfg.json").string(),
                        "--out", other.string(), "--steps", "4", "--quiet", "--resume",
                        (run_dir_ / "ckpt_000002.bin").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(other / "final.bin"), slurp(run_dir_ / "final.bin"));
  EXPECT_EQ(slurp(other / "metrics.csv"), slurp(run_dir_ / "metrics.csv"));
}

TEST_F(Trained, RenderAtTrainingFrameMatchesTheLibrary) {
  const fs::path img = root_ / "frame3.ppm";
  const Result r = run({"render", "--ckpt", (run_dir_ / "final.bin").string(), "--data", data_.string(),
                        "--pose", "3", "--time", "3", "--out", img.string(), "--depth",
                        (root_ / "d.f64").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.find("continuous"), std::string::npos);
  const Image got = io::read_ppm(img);
  const Dataset d = read_dataset(data_);
  EXPECT_EQ(got.width, 48);
  EXPECT_GT(psnr(got, d.frame(3).image), 20.0);
  EXPECT_EQ(io::read_f64(root_ / "d.f64").size(), 48u * 36u);
}

TEST_F(Trained, ContinuousTimeUsesTheFractionalPath) {
  const Result r = run({"render", "--ckpt", (run_dir_ / "final.bin").string(), "--data", data_.string(),
                        "--pose", "heldout", "--time", "3.5", "--out", (root_ / "t35.ppm").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("(continuous)"), std::string::npos);
}

TEST_F(Trained, SingleSampleIsValid) {
  const Result r = run({"render", "--ckpt", (run_dir_ / "final.bin").string(), "--data", data_.string(),
                        "--pose", "2", "--time", "2", "--samples", "1", "--out", (root_ / "s1.ppm").string(),
                        "--depth", (root_ / "s1.f64").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(io::read_f64(root_ / "s1.f64"), std::vector<double>(48 * 36, 3.5));
  const Image got = io::read_ppm(root_ / "s1.ppm");
  for (float v : got.data) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST_F(Trained, RenderRejectsMalformedPose) {
  const fs::path img = root_ / "bad.ppm";
  const Result r = run({"render", "--ckpt", (run_dir_ / "final.bin").string(), "--data", data_.string(),
                        "--pose", "1,2,3", "--out", img.string()});
  EXPECT_EQ(r.code, cli::kUsage);
  EXPECT_FALSE(fs::exists(img));
}

TEST_F(Trained, EvalWritesPerFrameAndMeanRows) {
  const fs::path csv = root_ / "eval.csv";
  const Result r = run({"eval", "--ckpt", (run_dir_ / "final.bin").string(), "--data", data_.string(),
                        "--samples", "8", "--out", csv.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "frame,psnr,ssim,dynamic_psnr,dynamic_ssim");
  int rows = 0;
  std::string last;
  while (std::getline(in, line)) ++rows, last = line;
  EXPECT_EQ(rows, 7);
  EXPECT_EQ(last.rfind("mean,", 0), 0u);
  EXPECT_NE(r.out.find("mean"), std::string::npos);
}

TEST_F(Trained, FlowvizWritesBothDirections) {
  const fs::path out = root_ / "viz";
  const Result r = run({"flowviz", "--ckpt", (run_dir_ / "final.bin").string(), "--data", data_.string(),
                        "--frames", "2", "--samples", "8", "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(out / "flow_fwd_0002.ppm"));
  EXPECT_TRUE(fs::exists(out / "flow_bwd_0002.ppm"));
}

TEST(FlowToColor, ZeroFieldIsUniformNeutral) {
  const std::vector<Vec2> zero(20, Vec2::Zero());
  const Image img = flow_to_color(zero, 5, 4);
  for (float v : img.data) EXPECT_EQ(v, 1.0f);
}

TEST(FlowToColor, ConstantFlowIsASingleHue) {
  const std::vector<Vec2> right(20, Vec2(2.0, 0.0));
  const Image img = flow_to_color(right, 5, 4);
  for (int i = 1; i < 20; ++i)
    for (int c = 0; c < 3; ++c) EXPECT_EQ(img.data[i * 3 + c], img.data[c]);
  EXPECT_FALSE(img.data[0] == 1.0f && img.data[1] == 1.0f && img.data[2] == 1.0f);
  // Opposite directions land on different hues.
  const std::vector<Vec2> left(20, Vec2(-2.0, 0.0));
  const Image opp = flow_to_color(left, 5, 4);
  EXPECT_NE(opp.data[0] + 2 * opp.data[1] + 4 * opp.data[2], img.data[0] + 2 * img.data[1] + 4 * img.data[2]);
}

TEST(FlowToColor, InverseFlowsGetOpposingHues) {
  // s_b = -s_f everywhere: the projected forward and backward flows point apart.
  const SceneSpec s = make_scene("plane-slide", 4, 32, 18);
  const Dataset d = generate_dataset(s, 1);
  ModelConfig cfg;
  cfg.flow.num_frames = 4;
  cfg.flow.window = 1;
  Model m(cfg, 0);
  m.flow.set_constant(Vec3(0.05, 0.02, 0.0), Vec3(-0.05, -0.02, 0.0));
  RenderOptions ro;
  ro.samples = 8;
  const FlowRender fr = render_flow(m, d.frames, s.camera(2), 2.0, ro);
  int compared = 0;
  for (std::size_t i = 0; i < fr.forward.size(); ++i) {
    if (!fr.valid.data[i]) continue;
    EXPECT_LT(fr.forward[i].dot(fr.backward[i]), 0.0);
    ++compared;
  }
  EXPECT_GT(compared, 100);
  const Image a = flow_to_color(fr.forward, fr.width, fr.height, &fr.valid);
  const Image b = flow_to_color(fr.backward, fr.width, fr.height, &fr.valid);
  // Hue by atan2 on the opponent-colour plane; opposite directions sit about half a turn apart.
  auto hue = [](const Image& img, std::size_t i) {
    const double r = img.data[3 * i], g = img.data[3 * i + 1], bl = img.data[3 * i + 2];
    return std::atan2(std::sqrt(3.0) * (g - bl), 2 * r - g - bl);
  };
  const std::size_t centre = fr.width * (fr.height / 2) + fr.width / 2;
  ASSERT_TRUE(fr.valid.data[centre]);
  double diff = std::abs(hue(a, centre) - hue(b, centre));
  diff = std::min(diff, 2 * M_PI - diff);
  EXPECT_GT(diff, 0.75 * M_PI);
}
