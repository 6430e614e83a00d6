#include "flowibr/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

namespace flowibr {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double smooth_pattern(double u, double v, double period, double period2, double phase) {
  const double fine = std::sin(kTwoPi * u / period + phase) * std::sin(kTwoPi * v / period + 0.7 * phase);
  const double coarse = std::sin(kTwoPi * (0.8 * u + 0.6 * v) / period2 + 1.3 * phase);
  return 0.5 + 0.25 * fine + 0.25 * coarse;
}

Vec3 primitive_normal(const Primitive& p) { return p.axis_u.cross(p.axis_v).normalized(); }

}  // namespace

Vec3 TextureSpec::color(double u, double v) const {
  switch (kind) {
    case Kind::kFlat:
      return color_a;
    case Kind::kChecker: {
      const long iu = static_cast<long>(std::floor(u / period));
      const long iv = static_cast<long>(std::floor(v / period));
      return ((iu + iv) & 1) ? color_b : color_a;
    }
    case Kind::kSinusoid:
    default: {
      Vec3 c;
      for (int ch = 0; ch < 3; ++ch) {
        const double s = smooth_pattern(u, v, period, period2, phase + 2.1 * ch);
        c(ch) = color_a(ch) + (color_b(ch) - color_a(ch)) * s;
      }
      return c;
    }
  }
}

Vec3 MotionProgram::offset(double frame, double dt) const {
  const double time = (frame - 1.0) * dt;
  switch (kind) {
    case Kind::kStatic:
      return Vec3::Zero();
    case Kind::kConstantVelocity:
      return velocity * time;
    case Kind::kOrbit: {
      const double a = angular_speed * time + phase;
      return radius * Vec3(std::cos(a) - std::cos(phase), std::sin(a) - std::sin(phase), 0.0);
    }
    case Kind::kWaypoints: {
      if (waypoints.empty()) return Vec3::Zero();
      if (frame <= waypoints.front().first) return waypoints.front().second;
      if (frame >= waypoints.back().first) return waypoints.back().second;
      for (std::size_t i = 1; i < waypoints.size(); ++i) {
        if (frame <= waypoints[i].first) {
          const auto& [f0, p0] = waypoints[i - 1];
          const auto& [f1, p1] = waypoints[i];
          const double s = (frame - f0) / (f1 - f0);
          return p0 + s * (p1 - p0);
        }
      }
      return waypoints.back().second;
    }
  }
  return Vec3::Zero();
}

std::vector<CameraMatrix> circular_rig(int count, double radius, const Vec3& target, int width,
                                       int height, double focal) {
  std::vector<CameraMatrix> cams;
  cams.reserve(count);
  const double cx = (width - 1) / 2.0;
  const double cy = (height - 1) / 2.0;
  for (int i = 0; i < count; ++i) {
    const double a = kTwoPi * i / count;
    const Vec3 eye(radius * std::cos(a), radius * std::sin(a), 0.0);
    cams.push_back(CameraMatrix::look_at(eye, target, Vec3(0, -1, 0), focal, focal, cx, cy, width,
                                         height));
  }
  return cams;
}

SceneSpec make_scene(std::string_view name, int frames, int width, int height, double dt,
                     std::uint64_t seed) {
  if (frames < 2) throw std::invalid_argument("make_scene: dynamic scenes need at least 2 frames");
  if (width < 8 || height < 8) throw std::invalid_argument("make_scene: image too small");
  if (!(dt > 0.0)) throw std::invalid_argument("make_scene: dt must be positive");

  SceneSpec s;
  s.name = std::string(name);
  s.width = width;
  s.height = height;
  s.num_frames = frames;
  s.dt = dt;
  s.seed = seed;
  s.near = 1.5;
  s.far = 5.5;
  s.background = Vec3(0.5, 0.5, 0.5);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> phase(0.0, kTwoPi);

  const Vec3 target(0.0, 0.0, 4.0);
  const double focal = 0.9 * width;
  s.cameras = circular_rig(frames, 0.25, target, width, height, focal);
  s.heldout_cameras.push_back(CameraMatrix::look_at(Vec3::Zero(), target, Vec3(0, -1, 0), focal,
                                                    focal, (width - 1) / 2.0, (height - 1) / 2.0,
                                                    width, height));

  Primitive wall;
  wall.center = Vec3(0.0, 0.0, 4.0);
  wall.half_u = 8.0;
  wall.half_v = 8.0;
  wall.texture.color_a = Vec3(0.2, 0.35, 0.3);
  wall.texture.color_b = Vec3(0.75, 0.85, 0.6);
  wall.texture.period = 0.6;
  wall.texture.period2 = 1.7;
  wall.texture.phase = phase(rng);
  s.primitives.push_back(wall);

  const double travel_per_frame = 0.1;
  auto slider = [&] {
    Primitive p;
    p.center = Vec3(-0.5 * travel_per_frame * (frames - 1), 0.0, 2.5);
    p.half_u = 0.6;
    p.half_v = 0.45;
    p.texture.color_a = Vec3(0.85, 0.2, 0.15);
    p.texture.color_b = Vec3(0.95, 0.9, 0.7);
    p.texture.period = 0.45;
    p.texture.period2 = 1.1;
    p.texture.phase = phase(rng);
    p.motion.kind = MotionProgram::Kind::kConstantVelocity;
    p.motion.velocity = Vec3(travel_per_frame / dt, 0.0, 0.0);
    return p;
  };
  auto orbiter = [&] {
    Primitive p;
    p.shape = Primitive::Shape::kSphere;
    p.radius = 0.45;
    p.center = Vec3(0.5, 0.0, 2.6);
    p.texture.color_a = Vec3(0.1, 0.2, 0.8);
    p.texture.color_b = Vec3(0.9, 0.95, 0.95);
    p.texture.period = 0.35;
    p.texture.period2 = 0.9;
    p.texture.phase = phase(rng);
    p.motion.kind = MotionProgram::Kind::kOrbit;
    p.motion.radius = 0.5;
    p.motion.phase = 0.0;
    p.motion.angular_speed = 0.8 * kTwoPi / (frames * dt);
    return p;
  };

  if (name == "plane-slide") {
    s.primitives.push_back(slider());
  } else if (name == "sphere-orbit") {
    s.primitives.push_back(orbiter());
  } else if (name == "two-objects") {
    Primitive a = slider();
    a.center.y() = -0.45;
    a.half_u = 0.45;
    a.half_v = 0.3;
    s.primitives.push_back(a);
    Primitive b = orbiter();
    b.center = Vec3(0.6, 0.35, 3.0);
    b.radius = 0.35;
    b.motion.radius = 0.35;
    s.primitives.push_back(b);
    Primitive pillar;
    pillar.center = Vec3(-1.1, 0.4, 3.4);
    pillar.half_u = 0.2;
    pillar.half_v = 0.6;
    pillar.texture.kind = TextureSpec::Kind::kSinusoid;
    pillar.texture.color_a = Vec3(0.3, 0.3, 0.35);
    pillar.texture.color_b = Vec3(0.8, 0.8, 0.9);
    pillar.texture.period = 0.3;
    pillar.texture.phase = phase(rng);
    s.primitives.push_back(pillar);
  } else {
    throw std::invalid_argument("make_scene: unknown scene '" + std::string(name) + "'");
  }
  return s;
}

// ---------------------------------------------------------------------------

std::optional<Hit> trace(const SceneSpec& spec, const Vec3& origin, const Vec3& direction,
                         double frame) {
  std::optional<Hit> best;
  constexpr double kEps = 1e-9;
  for (int i = 0; i < static_cast<int>(spec.primitives.size()); ++i) {
    const Primitive& prim = spec.primitives[i];
    const Vec3 c = prim.center + prim.motion.offset(frame, spec.dt);
    double t = -1.0;
    double u = 0.0, v = 0.0;
    if (prim.shape == Primitive::Shape::kRectangle) {
      const Vec3 n = primitive_normal(prim);
      const double denom = direction.dot(n);
      if (std::abs(denom) < 1e-12) continue;
      t = (c - origin).dot(n) / denom;
      if (t <= kEps) continue;
      const Vec3 local = origin + t * direction - c;
      u = local.dot(prim.axis_u);
      v = local.dot(prim.axis_v);
      if (std::abs(u) > prim.half_u || std::abs(v) > prim.half_v) continue;
    } else {
      const Vec3 oc = origin - c;
      const double b = oc.dot(direction);
      const double cc = oc.squaredNorm() - prim.radius * prim.radius;
      const double disc = b * b - cc;
      if (disc < 0.0) continue;
      const double sq = std::sqrt(disc);
      t = -b - sq;
      if (t <= kEps) t = -b + sq;
      if (t <= kEps) continue;
      const Vec3 local = origin + t * direction - c;
      u = local.x();
      v = local.y();
    }
    if (!best || t < best->distance) {
      Hit h;
      h.distance = t;
      h.primitive = i;
      h.point = origin + t * direction;
      h.color = prim.texture.color(u, v);
      best = h;
    }
  }
  return best;
}

RenderedView render_view(const SceneSpec& spec, const CameraMatrix& camera, int frame) {
  RenderedView out;
  const int w = camera.width();
  const int h = camera.height();
  out.observation.image = Image(w, h, 3);
  out.observation.camera = camera;
  out.observation.t = frame;
  out.depth.assign(static_cast<std::size_t>(w) * h, kNaN);
  out.hit.assign(static_cast<std::size_t>(w) * h, -1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Ray ray = cast_ray(camera, {x, y});
      const auto hit = trace(spec, ray.origin, ray.direction, frame);
      const Vec3 c = hit ? hit->color : spec.background;
      for (int ch = 0; ch < 3; ++ch) out.observation.image.at(x, y, ch) = static_cast<float>(c(ch));
      if (hit) {
        const std::size_t k = static_cast<std::size_t>(y) * w + x;
        out.depth[k] = (camera.rotation() * hit->point + camera.translation()).z();
        out.hit[k] = hit->primitive;
      }
    }
  }
  return out;
}

RenderedView render_frame(const SceneSpec& spec, int frame) {
  return render_view(spec, spec.camera(frame), frame);
}

std::optional<int> surface_primitive(const SceneSpec& spec, const Vec3& p, double frame) {
  std::optional<int> static_match;
  for (int i = 0; i < static_cast<int>(spec.primitives.size()); ++i) {
    const Primitive& prim = spec.primitives[i];
    const Vec3 local = p - (prim.center + prim.motion.offset(frame, spec.dt));
    const double tol = 1e-7 * (1.0 + p.norm());
    bool on = false;
    if (prim.shape == Primitive::Shape::kRectangle) {
      on = std::abs(local.dot(primitive_normal(prim))) <= tol &&
           std::abs(local.dot(prim.axis_u)) <= prim.half_u + tol &&
           std::abs(local.dot(prim.axis_v)) <= prim.half_v + tol;
    } else {
      on = std::abs(local.norm() - prim.radius) <= tol;
    }
    if (!on) continue;
    if (prim.is_dynamic()) return i;
    if (!static_match) static_match = i;
  }
  return static_match;
}

std::pair<Vec3, Vec3> ground_truth_scene_flow(const SceneSpec& spec, const Vec3& p, int frame) {
  const auto idx = surface_primitive(spec, p, frame);
  if (!idx || !spec.primitives[*idx].is_dynamic()) return {Vec3::Zero(), Vec3::Zero()};
  const MotionProgram& m = spec.primitives[*idx].motion;
  const Vec3 here = m.offset(frame, spec.dt);
  const Vec3 fwd = m.offset(frame + 1, spec.dt) - here;
  const Vec3 bwd = m.offset(frame - 1, spec.dt) - here;
  return {fwd, bwd};
}

std::optional<Vec2> ground_truth_optical_flow(const SceneSpec& spec, const CameraMatrix& target,
                                              int t_target, int t_source, Pixel pixel) {
  const Ray ray = cast_ray(target, pixel);
  const auto hit = trace(spec, ray.origin, ray.direction, t_target);
  if (!hit) return std::nullopt;
  const MotionProgram& m = spec.primitives[hit->primitive].motion;
  const Vec3 moved = hit->point + (m.offset(t_source, spec.dt) - m.offset(t_target, spec.dt));
  const CameraMatrix& src = spec.camera(t_source);
  const Projection proj = project(src, moved);
  if (!proj.valid || proj.uv.x() < -0.5 || proj.uv.y() < -0.5 ||
      proj.uv.x() > src.width() - 0.5 || proj.uv.y() > src.height() - 0.5) {
    return std::nullopt;
  }
  const Vec3 eye = src.center();
  const Vec3 to = moved - eye;
  const double dist = to.norm();
  const auto blocker = trace(spec, eye, to / dist, t_source);
  if (!blocker || blocker->distance < dist * (1.0 - 1e-6) - 1e-9) return std::nullopt;
  return Vec2(proj.uv.x() - pixel.x, proj.uv.y() - pixel.y);
}

std::optional<Vec2> ground_truth_optical_flow(const SceneSpec& spec, int t_target, int t_source,
                                              Pixel pixel) {
  return ground_truth_optical_flow(spec, spec.camera(t_target), t_target, t_source, pixel);
}

Mask dilate(const Mask& mask, int radius) {
  if (radius <= 0) return mask;
  Mask out(mask.width, mask.height);
  const int r2 = radius * radius;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(x, y)) continue;
      for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
          const int xx = x + dx, yy = y + dy;
          if (dx * dx + dy * dy > r2 || xx < 0 || yy < 0 || xx >= mask.width || yy >= mask.height)
            continue;
          out.at(xx, yy) = 1;
        }
      }
    }
  }
  return out;
}

Mask motion_mask(const SceneSpec& spec, const CameraMatrix& camera, int frame, int dilation) {
  Mask raw(camera.width(), camera.height());
  for (int y = 0; y < camera.height(); ++y) {
    for (int x = 0; x < camera.width(); ++x) {
      const Ray ray = cast_ray(camera, {x, y});
      const auto hit = trace(spec, ray.origin, ray.direction, frame);
      raw.at(x, y) = hit && spec.primitives[hit->primitive].is_dynamic() ? 1 : 0;
    }
  }
  return dilate(raw, dilation);
}

Mask motion_mask(const SceneSpec& spec, int frame, int dilation) {
  return motion_mask(spec, spec.camera(frame), frame, dilation < 0 ? spec.mask_dilation : dilation);
}

// ---------------------------------------------------------------------------

int Dataset::flow_slot(int offset, int window) {
  if (offset == 0 || std::abs(offset) > window) return -1;
  return offset < 0 ? offset + window : offset + window - 1;
}

std::optional<Vec2> Dataset::flow(int t_target, int t_source, int x, int y) const {
  const int slot = flow_slot(t_source - t_target, flow_window);
  if (slot < 0) return std::nullopt;
  const auto& f = flows.at(t_target - 1);
  const std::size_t w = spec.width, h = spec.height;
  const std::size_t k = ((static_cast<std::size_t>(slot) * h + y) * w + x) * 2;
  const double u = f[k], v = f[k + 1];
  if (std::isnan(u) || std::isnan(v)) return std::nullopt;
  return Vec2(u, v);
}

Dataset generate_dataset(const SceneSpec& spec, int flow_window) {
  if (static_cast<int>(spec.cameras.size()) != spec.num_frames) {
    throw std::invalid_argument("generate_dataset: need one camera per frame");
  }
  if (flow_window < 1) throw std::invalid_argument("generate_dataset: flow window must be >= 1");
  Dataset d;
  d.spec = spec;
  d.flow_window = flow_window;
  const int w = spec.width, h = spec.height;
  for (int t = 1; t <= spec.num_frames; ++t) {
    RenderedView v = render_frame(spec, t);
    d.frames.push_back(std::move(v.observation));
    d.depth.push_back(std::move(v.depth));
    d.masks.push_back(motion_mask(spec, t));

    std::vector<double> flow(static_cast<std::size_t>(2 * flow_window) * h * w * 2, kNaN);
    for (int off = -flow_window; off <= flow_window; ++off) {
      const int src = t + off;
      if (off == 0 || src < 1 || src > spec.num_frames) continue;
      const int slot = Dataset::flow_slot(off, flow_window);
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const auto o = ground_truth_optical_flow(spec, t, src, {x, y});
          if (!o) continue;
          const std::size_t k = ((static_cast<std::size_t>(slot) * h + y) * w + x) * 2;
          flow[k] = o->x();
          flow[k + 1] = o->y();
        }
      }
    }
    d.flows.push_back(std::move(flow));
  }
  if (!spec.heldout_cameras.empty()) {
    const CameraMatrix& cam = spec.heldout_cameras.front();
    for (int t = 1; t <= spec.num_frames; ++t) {
      d.heldout.push_back(render_view(spec, cam, t).observation);
      d.heldout_masks.push_back(motion_mask(spec, cam, t, spec.mask_dilation));
    }
  }
  return d;
}

}  // namespace flowibr
