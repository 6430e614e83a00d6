#include "flowibr_cli/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>
#include <json.hpp>

#include "flowibr/image_io.hpp"
#include "flowibr/metrics.hpp"
#include "flowibr/model.hpp"
#include "flowibr/parallel.hpp"
#include "flowibr/synthdata.hpp"
#include "flowibr/trainer.hpp"

namespace flowibr::cli {

namespace fs = std::filesystem;

namespace {

/// Thrown for problems detected before any output exists.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

bool non_empty_dir(const fs::path& p) {
  return fs::exists(p) && (!fs::is_directory(p) || !fs::is_empty(p));
}

std::string numbered(const std::string& stem, int n, const std::string& ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_%04d.", n);
  return stem + buf + ext;
}

Dataset load_data(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw UsageError("data directory " + dir.string() + " does not exist");
  return read_dataset(dir);
}

/// Model matching a checkpoint: architecture from config.json beside the
/// checkpoint when present, else from the checkpoint header.
Model load_model(const fs::path& ckpt, const Dataset& data, const std::optional<fs::path>& config_path) {
  if (!fs::is_regular_file(ckpt)) throw UsageError("checkpoint " + ckpt.string() + " does not exist");
  const CheckpointHeader h = read_checkpoint_header(ckpt);
  TrainConfig cfg;
  const fs::path beside = ckpt.parent_path() / "config.json";
  if (config_path) cfg = load_train_config(*config_path);
  else if (fs::is_regular_file(beside)) cfg = load_train_config(beside);
  else {
    cfg.model.flow.depth = h.depth;
    cfg.model.flow.width = h.width;
    cfg.model.flow.encoding.frequencies = h.frequencies;
    cfg.model.ibr.hidden = h.ibr_hidden;
  }
  cfg.model.flow.num_frames = data.num_frames();
  cfg.model.ibr.near = data.spec.near;
  cfg.model.ibr.far = data.spec.far;
  Model m(cfg.model, h.seed);
  m.load(ckpt);
  return m;
}

CameraMatrix parse_pose(const std::string& pose, const Dataset& data) {
  if (pose == "heldout") {
    if (data.spec.heldout_cameras.empty()) throw UsageError("dataset has no held-out camera");
    return data.spec.heldout_cameras.front();
  }
  std::string text = pose;
  std::replace(text.begin(), text.end(), ',', ' ');
  std::istringstream in(text);
  std::vector<double> v;
  for (double x; in >> x;) v.push_back(x);
  if (!in.eof()) throw UsageError("--pose: expected a frame index, 'heldout' or 12 numbers");
  if (v.size() == 1 && v[0] == static_cast<int>(v[0])) {
    const int f = static_cast<int>(v[0]);
    if (f < 1 || f > data.num_frames()) throw UsageError("--pose: frame index outside the sequence");
    return data.spec.camera(f);
  }
  if (v.size() != 12) throw UsageError("--pose: expected a frame index, 'heldout' or 12 numbers");
  const CameraMatrix& ref = data.spec.camera(1);
  try {
    return CameraMatrix::from_rows(ref.intrinsics_rows(), v, ref.width(), ref.height());
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("--pose: ") + e.what());
  }
}

void check_time(double time, const Dataset& data) {
  if (!(time >= 1.0 && time <= data.num_frames())) {
    throw UsageError("--time must lie in [1, " + std::to_string(data.num_frames()) + "]");
  }
}

// --- subcommands ---------------------------------------------------------------

struct SynthArgs {
  std::string scene = "plane-slide";
  int frames = 12;
  int width = 96;
  int height = 54;
  double dt = 1.0;
  std::uint64_t seed = 0;
  int window = 5;
  std::string out;
  bool force = false;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  SceneSpec spec;
  try {
    spec = make_scene(a.scene, a.frames, a.width, a.height, a.dt, a.seed);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (a.window < 1) throw UsageError("--window must be >= 1");
  if (non_empty_dir(a.out) && !a.force) throw UsageError("output " + a.out + " exists and is not empty (use --force)");
  const Dataset d = generate_dataset(spec, a.window);
  write_dataset(d, a.out);
  out << "wrote " << d.num_frames() << " frames of '" << spec.name << "' to " << a.out << '\n';
  return kOk;
}

struct TrainArgs {
  std::string data, config, out, resume;
  std::optional<std::int64_t> steps;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  TrainConfig cfg;
  try {
    std::string text = "{}";
    if (!a.config.empty()) {
      std::ifstream in(a.config);
      if (!in) throw std::invalid_argument("cannot read config " + a.config);
      std::stringstream ss;
      ss << in.rdbuf();
      text = ss.str();
    }
    if (a.steps) {
      // Schedules left implicit in the file rescale with the new step count.
      nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
      if (j.is_discarded() || !j.is_object()) throw std::invalid_argument("config is not a JSON object");
      j["total_steps"] = *a.steps;
      text = j.dump();
    }
    cfg = train_config_from_json(text);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const Dataset data = load_data(a.data);
  cfg.model.flow.num_frames = data.num_frames();
  cfg.model.ibr.near = data.spec.near;
  cfg.model.ibr.far = data.spec.far;
  if (!a.resume.empty() && !fs::is_regular_file(a.resume)) throw UsageError("--resume: no such checkpoint " + a.resume);
  Model model(cfg.model, cfg.seed);

  fs::create_directories(a.out);
  {
    std::ofstream c(fs::path(a.out) / "config.json");
    c << train_config_to_json(cfg) << '\n';
  }
  RunOptions opts;
  opts.out_dir = a.out;
  if (!a.resume.empty()) opts.resume = fs::path(a.resume);
  if (!a.quiet) {
    opts.on_step = [&out, every = std::max<std::int64_t>(1, cfg.total_steps / 20)](const StepStats& s) {
      if (s.step % every == 0) {
        out << "step " << s.step << " loss " << s.total << " rgb " << s.components.rgb << " f " << s.factor
            << " sources " << s.sources << '\n';
      }
    };
  }
  const RunResult r = run_schedule(model, cfg, data, opts);
  out << "trained to step " << r.steps_done << "; outputs in " << a.out << '\n';
  return kOk;
}

struct RenderArgs {
  std::string ckpt, data, config, pose = "1", out, depth;
  double time = 1.0;
  int sources = 4;
  int samples = 32;
  bool no_flow = false;
};

int cmd_render(const RenderArgs& a, std::ostream& out) {
  if (a.samples < 1) throw UsageError("--samples must be >= 1");
  if (a.sources < 2) throw UsageError("--sources must be >= 2");
  const Dataset data = load_data(a.data);
  const CameraMatrix cam = parse_pose(a.pose, data);
  check_time(a.time, data);
  const Model model = load_model(a.ckpt, data, a.config.empty() ? std::nullopt : std::optional<fs::path>(a.config));
  RenderOptions ro;
  ro.max_sources = a.sources;
  ro.samples = a.samples;
  ro.flow_compensation = !a.no_flow;
  const RenderResult r = render_image(model, data.frames, cam, a.time, ro);
  io::write_ppm(a.out, r.image);
  if (!a.depth.empty()) io::write_f64(a.depth, r.depth);
  out << "rendered t=" << a.time << (r.continuous_time ? " (continuous)" : "") << " from sources";
  for (int s : r.sources) out << ' ' << s;
  out << " -> " << a.out << '\n';
  return kOk;
}

struct EvalArgs {
  std::string ckpt, data, config, out;
  int sources = 4;
  int samples = 32;
  bool no_flow = false;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const Dataset data = load_data(a.data);
  if (data.heldout.empty()) throw UsageError("dataset has no held-out views");
  const Model model = load_model(a.ckpt, data, a.config.empty() ? std::nullopt : std::optional<fs::path>(a.config));
  RenderOptions ro;
  ro.max_sources = a.sources;
  ro.samples = a.samples;
  ro.flow_compensation = !a.no_flow;
  std::ostringstream csv;
  csv << "frame,psnr,ssim,dynamic_psnr,dynamic_ssim\n";
  double sp = 0, ss = 0, sdp = 0, sds = 0;
  int n = 0, nd = 0;
  auto fmt = [](double v) {
    char b[40];
    std::snprintf(b, sizeof b, "%.6f", v);
    return std::string(b);
  };
  for (std::size_t i = 0; i < data.heldout.size(); ++i) {
    const Observation& gt = data.heldout[i];
    const RenderResult r = render_image(model, data.frames, gt.camera, gt.t, ro);
    const double p = psnr(r.image, gt.image);
    const double s = ssim(r.image, gt.image);
    const auto dyn = dynamic_region_metrics(r.image, gt.image, data.heldout_masks.at(i));
    csv << gt.t << ',' << fmt(p) << ',' << fmt(s) << ',' << (dyn ? fmt(dyn->psnr) : "undefined") << ','
        << (dyn ? fmt(dyn->ssim) : "undefined") << '\n';
    sp += p;
    ss += s;
    ++n;
    if (dyn) {
      sdp += dyn->psnr;
      sds += dyn->ssim;
      ++nd;
    }
  }
  csv << "mean," << fmt(sp / n) << ',' << fmt(ss / n) << ',' << (nd ? fmt(sdp / nd) : "undefined") << ','
      << (nd ? fmt(sds / nd) : "undefined") << '\n';
  out << csv.str();
  if (!a.out.empty()) {
    std::ofstream f(a.out);
    if (!f) throw std::runtime_error("cannot write " + a.out);
    f << csv.str();
  }
  return kOk;
}

struct FlowvizArgs {
  std::string ckpt, data, config, out, pose = "heldout";
  std::vector<int> frames;
  int sources = 4;
  int samples = 32;
  bool force = false;
};

int cmd_flowviz(const FlowvizArgs& a, std::ostream& out) {
  const Dataset data = load_data(a.data);
  std::vector<int> frames = a.frames;
  if (frames.empty()) {
    for (int t = 1; t <= data.num_frames(); ++t) frames.push_back(t);
  }
  for (int t : frames) {
    if (t < 1 || t > data.num_frames()) throw UsageError("--frames: frame outside the sequence");
  }
  const CameraMatrix cam = parse_pose(a.pose, data);
  if (non_empty_dir(a.out) && !a.force) throw UsageError("output " + a.out + " exists and is not empty (use --force)");
  const Model model = load_model(a.ckpt, data, a.config.empty() ? std::nullopt : std::optional<fs::path>(a.config));
  RenderOptions ro;
  ro.max_sources = a.sources;
  ro.samples = a.samples;
  fs::create_directories(a.out);
  for (int t : frames) {
    const FlowRender f = render_flow(model, data.frames, cam, t, ro);
    io::write_ppm(fs::path(a.out) / numbered("flow_fwd", t, "ppm"),
                  flow_to_color(f.forward, f.width, f.height, &f.valid));
    io::write_ppm(fs::path(a.out) / numbered("flow_bwd", t, "ppm"),
                  flow_to_color(f.backward, f.width, f.height, &f.valid));
  }
  out << "wrote " << 2 * frames.size() << " flow images to " << a.out << '\n';
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"flowibr: flow-compensated image-based rendering of dynamic scenes"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "flowibr 0.1.0");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic dynamic dataset");
  s->add_option("--scene", synth.scene, "plane-slide | sphere-orbit | two-objects")->capture_default_str();
  s->add_option("--frames", synth.frames, "Number of frames T")->capture_default_str();
  s->add_option("--width", synth.width)->capture_default_str();
  s->add_option("--height", synth.height)->capture_default_str();
  s->add_option("--dt", synth.dt, "Time between frames")->capture_default_str();
  s->add_option("--seed", synth.seed)->capture_default_str();
  s->add_option("--window", synth.window, "Frame offsets with ground-truth flow")->capture_default_str();
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_flag("--force", synth.force, "Write into a non-empty directory");

  TrainArgs train;
  std::int64_t steps = -1;
  auto* t = app.add_subcommand("train", "Optimize the flow field and backbone on a dataset");
  t->add_option("--data", train.data, "Dataset directory")->required();
  t->add_option("--config", train.config, "JSON training config");
  t->add_option("--out", train.out, "Output directory")->required();
  t->add_option("--resume", train.resume, "Checkpoint to resume from");
  t->add_option("--steps", steps, "Override total_steps (schedules rescale)");
  t->add_flag("--quiet", train.quiet);

  RenderArgs render;
  auto* r = app.add_subcommand("render", "Render a view at a continuous time");
  r->add_option("--ckpt", render.ckpt)->required();
  r->add_option("--data", render.data)->required();
  r->add_option("--config", render.config, "Training config (default: config.json next to the checkpoint)");
  r->add_option("--pose", render.pose, "Frame index, 'heldout', or 12 numbers [R|t] row-major")->capture_default_str();
  r->add_option("--time", render.time, "Time in frame units, continuous")->capture_default_str();
  r->add_option("--sources", render.sources)->capture_default_str();
  r->add_option("--samples", render.samples)->capture_default_str();
  r->add_option("--out", render.out, "Output PPM")->required();
  r->add_option("--depth", render.depth, "Optional depth raster (f64)");
  r->add_flag("--no-flow", render.no_flow, "Disable flow compensation");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Held-out view PSNR/SSIM, full image and dynamic region");
  e->add_option("--ckpt", eval.ckpt)->required();
  e->add_option("--data", eval.data)->required();
  e->add_option("--config", eval.config);
  e->add_option("--sources", eval.sources)->capture_default_str();
  e->add_option("--samples", eval.samples)->capture_default_str();
  e->add_option("--out", eval.out, "Metrics CSV");
  e->add_flag("--no-flow", eval.no_flow, "Disable flow compensation");

  FlowvizArgs viz;
  auto* v = app.add_subcommand("flowviz", "Color-coded projected scene flow");
  v->add_option("--ckpt", viz.ckpt)->required();
  v->add_option("--data", viz.data)->required();
  v->add_option("--config", viz.config);
  v->add_option("--frames", viz.frames, "Frames to visualize (default all)");
  v->add_option("--pose", viz.pose)->capture_default_str();
  v->add_option("--sources", viz.sources)->capture_default_str();
  v->add_option("--samples", viz.samples)->capture_default_str();
  v->add_option("--out", viz.out, "Output directory")->required();
  v->add_flag("--force", viz.force);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& pe) {
    return app.exit(pe, out, err) == 0 ? kOk : kUsage;
  }
  if (steps >= 0) train.steps = steps;

  try {
    if (*s) return cmd_synth(synth, out);
    if (*t) return cmd_train(train, out);
    if (*r) return cmd_render(render, out);
    if (*e) return cmd_eval(eval, out);
    if (*v) return cmd_flowviz(viz, out);
  } catch (const UsageError& ue) {
    err << "error: " << ue.what() << '\n';
    return kUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kFailure;
  }
  return kUsage;
}

}  // namespace flowibr::cli
