#include "flowibr/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <tuple>

#include "flowibr/parallel.hpp"

namespace flowibr {

using diff::Matrix;
using diff::Tape;
using diff::Var;

Model::Model(const ModelConfig& config, std::uint64_t seed_in)
    : flow(config.flow, seed_in), ibr(config.ibr, seed_in ^ 0x9e3779b97f4a7c15ULL), seed(seed_in) {}

CheckpointHeader Model::header(std::int64_t step) const {
  CheckpointHeader h;
  h.depth = flow.config().depth;
  h.width = flow.config().width;
  h.input_size = flow.input_size();
  h.ibr_hidden = ibr.config().hidden;
  h.frequencies = flow.config().encoding.frequencies;
  h.num_frames = flow.config().num_frames;
  h.seed = seed;
  h.step = step;
  return h;
}

void Model::save(const std::filesystem::path& path, std::int64_t step) const {
  save_checkpoint(path, header(step), flow.params(), ibr.params());
}

std::int64_t Model::load(const std::filesystem::path& path) {
  const CheckpointHeader expect = header(0);
  const CheckpointHeader got = read_checkpoint_header(path);
  if (got.depth != expect.depth || got.width != expect.width || got.input_size != expect.input_size ||
      got.ibr_hidden != expect.ibr_hidden || got.frequencies != expect.frequencies ||
      got.num_frames != expect.num_frames) {
    throw std::runtime_error("checkpoint " + path.string() + " was written for a different model");
  }
  const CheckpointHeader h = load_checkpoint(path, flow.params(), ibr.params());
  seed = h.seed;
  return h.step;
}

// ---------------------------------------------------------------------------

std::vector<int> select_sources(int target, int max_sources, int num_frames) {
  if (num_frames < 2) throw std::invalid_argument("select_sources: need at least two frames");
  if (target < 1 || target > num_frames) throw std::out_of_range("select_sources: target frame outside sequence");
  if (max_sources < 1) throw std::invalid_argument("select_sources: max_sources must be >= 1");
  std::vector<int> frames;
  for (int f = 1; f <= num_frames; ++f) {
    if (f != target) frames.push_back(f);
  }
  std::stable_sort(frames.begin(), frames.end(), [target](int a, int b) {
    return std::abs(a - target) < std::abs(b - target);
  });
  frames.resize(std::min<std::size_t>(frames.size(), static_cast<std::size_t>(max_sources)));
  std::sort(frames.begin(), frames.end());
  return frames;
}

std::vector<int> render_sources(double time, int max_sources, int num_frames, int window) {
  if (num_frames < 1) throw std::invalid_argument("render_sources: empty sequence");
  if (max_sources < 1) throw std::invalid_argument("render_sources: max_sources must be >= 1");
  if (!(time >= 1.0 && time <= num_frames)) throw std::out_of_range("render_sources: time outside [1, T]");
  std::vector<std::pair<long long, int>> ranked;
  for (int f = 1; f <= num_frames; ++f) {
    const double d = std::abs(f - time);
    if (d > window) continue;
    ranked.emplace_back(std::llround(d * 1000.0), f);
  }
  std::sort(ranked.begin(), ranked.end());
  std::vector<int> out;
  for (std::size_t i = 0; i < ranked.size() && static_cast<int>(i) < max_sources; ++i) {
    out.push_back(ranked[i].second);
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct ChunkResult {
  std::vector<std::size_t> pixels;
  Matrix color;    // R x 3
  Matrix depth;    // R x 1
  Matrix weights;  // RN x 1
  Matrix points;   // RN x 3
  std::vector<std::uint8_t> ray_valid;
};

std::vector<SourceView> make_views(std::span<const Observation> frames, const std::vector<int>& ids) {
  std::vector<SourceView> views;
  for (int f : ids) {
    const Observation& o = frames[f - 1];
    views.push_back({&o.image, o.camera, f});
  }
  return views;
}

ChunkResult render_chunk(const Model& model, const std::vector<SourceView>& views,
                         const CameraMatrix& camera, double time, const RenderOptions& options,
                         std::size_t begin, std::size_t end) {
  const int n = options.samples;
  const auto& cfg = model.ibr.config();
  ChunkResult out;
  const auto rays = static_cast<Eigen::Index>(end - begin);
  Matrix points(rays * n, 3);
  Matrix dist(rays * n, 1);
  for (std::size_t p = begin; p < end; ++p) {
    const Pixel px{static_cast<int>(p % camera.width()), static_cast<int>(p / camera.width())};
    const Ray ray = cast_ray(camera, px, time);
    if (n == 1) {
      // Degenerate single sample at the middle of the depth range.
      const double l = 0.5 * (cfg.near + cfg.far);
      points.row(p - begin) = (ray.origin + l * ray.direction).transpose();
      dist(p - begin, 0) = l;
    } else {
      const RaySampleSet s = sample_along_ray(ray, cfg.near, cfg.far, n);
      for (int k = 0; k < n; ++k) {
        const Eigen::Index i = static_cast<Eigen::Index>(p - begin) * n + k;
        points.row(i) = s.base_points[k].transpose();
        dist(i, 0) = s.distances[k];
      }
    }
    out.pixels.push_back(p);
  }
  Tape tape;
  const Var pts = tape.constant(points);
  std::vector<Var> bent;
  if (options.flow_compensation) {
    const auto fb = model.flow.bind(tape);
    std::vector<int> targets;
    for (const auto& v : views) targets.push_back(v.frame);
    const BentSamples b = bend_samples(tape, model.flow, fb, pts, time, targets);
    for (const auto& v : views) bent.push_back(b.positions.at(v.frame));
  } else {
    bent.assign(views.size(), pts);
  }
  const auto ib = model.ibr.bind(tape);
  const RayRender r = render_rays_ibr(tape, model.ibr, ib, views, bent, dist, n);
  out.color = tape.value(r.color);
  out.depth = tape.value(r.depth);
  out.weights = tape.value(r.weights);
  out.points = std::move(points);
  out.ray_valid = r.ray_valid;
  return out;
}

template <typename Fn>
void for_each_chunk(const CameraMatrix& camera, const RenderOptions& options, Fn&& fn) {
  if (options.samples < 1) throw std::invalid_argument("render: samples must be >= 1");
  if (options.chunk_rays < 1) throw std::invalid_argument("render: chunk_rays must be >= 1");
  const std::size_t total = static_cast<std::size_t>(camera.width()) * camera.height();
  const std::size_t chunk = static_cast<std::size_t>(options.chunk_rays);
  const std::size_t count = (total + chunk - 1) / chunk;
  parallel_for(count, [&](std::size_t c) { fn(c * chunk, std::min(total, (c + 1) * chunk)); });
}

std::vector<int> sources_for(const Model& model, std::span<const Observation> frames, double time,
                             const RenderOptions& options) {
  const int t_count = static_cast<int>(frames.size());
  if (t_count != model.flow.config().num_frames) {
    throw std::invalid_argument("render: frame count differs from the model");
  }
  auto ids = render_sources(time, options.max_sources, t_count, model.flow.config().window);
  if (ids.size() < 2) throw std::invalid_argument("render: fewer than two sources available");
  return ids;
}

}  // namespace

RenderResult render_image(const Model& model, std::span<const Observation> frames,
                          const CameraMatrix& camera, double time, const RenderOptions& options) {
  RenderResult out;
  out.sources = sources_for(model, frames, time, options);
  out.continuous_time = std::floor(time) != time;
  const auto views = make_views(frames, out.sources);
  out.image = Image(camera.width(), camera.height(), 3);
  out.depth.assign(static_cast<std::size_t>(camera.width()) * camera.height(),
                   std::numeric_limits<double>::quiet_NaN());
  out.renderable = Mask(camera.width(), camera.height());
  for_each_chunk(camera, options, [&](std::size_t begin, std::size_t end) {
    const ChunkResult c = render_chunk(model, views, camera, time, options, begin, end);
    for (std::size_t r = 0; r < c.pixels.size(); ++r) {
      if (!c.ray_valid[r]) continue;
      const std::size_t p = c.pixels[r];
      for (int ch = 0; ch < 3; ++ch) out.image.data[p * 3 + ch] = static_cast<float>(c.color(r, ch));
      out.depth[p] = c.depth(r, 0);
      out.renderable.data[p] = 1;
    }
  });
  return out;
}

FlowRender render_flow(const Model& model, std::span<const Observation> frames,
                       const CameraMatrix& camera, double time, const RenderOptions& options) {
  const auto views = make_views(frames, sources_for(model, frames, time, options));
  FlowRender out;
  out.width = camera.width();
  out.height = camera.height();
  const std::size_t total = static_cast<std::size_t>(out.width) * out.height;
  out.forward.assign(total, Vec2::Zero());
  out.backward.assign(total, Vec2::Zero());
  out.valid = Mask(out.width, out.height);
  const int n = options.samples;
  for_each_chunk(camera, options, [&](std::size_t begin, std::size_t end) {
    const ChunkResult c = render_chunk(model, views, camera, time, options, begin, end);
    const Matrix flows = model.flow.eval_batch(c.points, time);
    for (std::size_t r = 0; r < c.pixels.size(); ++r) {
      if (!c.ray_valid[r]) continue;
      Vec2 f = Vec2::Zero();
      Vec2 b = Vec2::Zero();
      bool ok = true;
      for (int k = 0; k < n; ++k) {
        const Eigen::Index i = static_cast<Eigen::Index>(r) * n + k;
        const double a = c.weights(i, 0);
        if (a == 0.0) continue;
        const Vec3 p = c.points.row(i).transpose();
        const Projection at = project(camera, p);
        const Projection pf = project(camera, p + flows.block<1, 3>(i, 0).transpose());
        const Projection pb = project(camera, p + flows.block<1, 3>(i, 3).transpose());
        if (!at.valid || !pf.valid || !pb.valid) {
          ok = false;
          break;
        }
        f += a * (pf.uv - at.uv);
        b += a * (pb.uv - at.uv);
      }
      if (!ok) continue;
      out.forward[c.pixels[r]] = f;
      out.backward[c.pixels[r]] = b;
      out.valid.data[c.pixels[r]] = 1;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<Vec3> color_wheel() {
  constexpr std::array<int, 6> counts = {15, 6, 4, 11, 13, 6};  // RY YG GC CB BM MR
  std::vector<Vec3> wheel;
  auto ramp = [&](int count, auto&& make) {
    for (int i = 0; i < count; ++i) wheel.push_back(make(static_cast<double>(i) / count));
  };
  ramp(counts[0], [](double s) { return Vec3(1, s, 0); });
  ramp(counts[1], [](double s) { return Vec3(1 - s, 1, 0); });
  ramp(counts[2], [](double s) { return Vec3(0, 1, s); });
  ramp(counts[3], [](double s) { return Vec3(0, 1 - s, 1); });
  ramp(counts[4], [](double s) { return Vec3(s, 0, 1); });
  ramp(counts[5], [](double s) { return Vec3(1, 0, 1 - s); });
  return wheel;
}

}  // namespace

Image flow_to_color(std::span<const Vec2> flow, int width, int height, const Mask* valid) {
  const std::size_t total = static_cast<std::size_t>(width) * height;
  if (flow.size() != total) throw std::invalid_argument("flow_to_color: flow size differs from image");
  if (valid && valid->data.size() != total) throw std::invalid_argument("flow_to_color: mask size differs");
  std::vector<double> mags;
  for (std::size_t i = 0; i < total; ++i) {
    if (valid && !valid->data[i]) continue;
    mags.push_back(flow[i].norm());
  }
  double scale = 0.0;
  if (!mags.empty()) {
    const std::size_t k = std::min(mags.size() - 1, static_cast<std::size_t>(0.95 * (mags.size() - 1) + 0.5));
    std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(k), mags.end());
    scale = mags[k];
  }
  const auto wheel = color_wheel();
  const int ncols = static_cast<int>(wheel.size());
  Image img(width, height, 3, 1.0f);
  if (!(scale > 0.0)) return img;
  for (std::size_t i = 0; i < total; ++i) {
    if (valid && !valid->data[i]) continue;
    const double u = flow[i].x() / scale;
    const double v = flow[i].y() / scale;
    const double rad = std::hypot(u, v);
    const double a = std::atan2(-v, -u) / std::numbers::pi;
    const double fk = (a + 1.0) / 2.0 * (ncols - 1);
    const int k0 = static_cast<int>(std::floor(fk));
    const int k1 = (k0 + 1) % ncols;
    const double f = fk - k0;
    for (int c = 0; c < 3; ++c) {
      double col = (1 - f) * wheel[k0][c] + f * wheel[k1][c];
      col = rad <= 1.0 ? 1.0 - rad * (1.0 - col) : col * 0.75;
      img.data[i * 3 + c] = static_cast<float>(col);
    }
  }
  return img;
}

}  // namespace flowibr
