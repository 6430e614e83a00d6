#include "flowibr/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace flowibr {

using diff::Matrix;
using diff::Tape;
using diff::Var;

double estimate_depth(const BackboneOutput& output) {
  if (output.ray_weights.size() != output.distances.size()) {
    throw std::invalid_argument("estimate_depth: weights and distances differ in length");
  }
  double d = 0.0;
  for (std::size_t i = 0; i < output.distances.size(); ++i) d += output.ray_weights[i] * output.distances[i];
  return d;
}

// ---------------------------------------------------------------------------

SimpleIbr::SimpleIbr(IbrConfig config, std::uint64_t seed) : config_(config) {
  if (config_.hidden < 1) throw std::invalid_argument("SimpleIbr: hidden width must be >= 1");
  if (!(config_.far > config_.near)) throw std::invalid_argument("SimpleIbr: far must exceed near");
  std::mt19937_64 rng(seed);
  const double bound = std::sqrt(6.0 / kFeatures);
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix w1(config_.hidden, kFeatures);
  for (Eigen::Index i = 0; i < w1.size(); ++i) w1.data()[i] = dist(rng);
  params_.add("ibr.w1", std::move(w1));
  params_.add("ibr.b1", Matrix::Zero(1, config_.hidden));
  params_.add("ibr.w2", Matrix::Zero(1, config_.hidden));
  params_.add("ibr.b2", Matrix::Zero(1, 1));
  // Linear path starts as the photo-consistency prior: logit = -k * variance.
  Matrix w_lin = Matrix::Zero(1, kFeatures);
  w_lin(0, 3) = -config_.prior_sharpness;
  params_.add("ibr.w_lin", std::move(w_lin));
}

SimpleIbr::Bound SimpleIbr::bind(Tape& tape) const {
  Bound b;
  b.w1 = tape.param(params_, 0);
  b.b1 = tape.param(params_, 1);
  b.w2 = tape.param(params_, 2);
  b.b2 = tape.param(params_, 3);
  b.w_lin = tape.param(params_, 4);
  b.b_lin = tape.constant(Matrix::Zero(1, 1));
  return b;
}

Var SimpleIbr::logits(Tape& tape, const Bound& b, Var features) const {
  const Var hidden = tape.relu(tape.affine(features, b.w1, b.b1));
  const Var deep = tape.affine(hidden, b.w2, b.b2);
  const Var lin = tape.affine(features, b.w_lin, b.b_lin);
  return tape.add(deep, lin);
}

// ---------------------------------------------------------------------------

Var project_points(Tape& tape, Var points, const CameraMatrix& camera,
                   std::vector<std::uint8_t>* valid) {
  const Matrix& p = tape.value(points);
  if (p.cols() != 3) throw std::invalid_argument("project_points: points must be n x 3");
  const Eigen::Index n = p.rows();
  Matrix uv = Matrix::Zero(n, 2);
  std::vector<std::uint8_t> ok(n, 0);
  // Per-row d(uv)/d(point), 2 x 3 stored row-major in 6 columns.
  Matrix jac = Matrix::Zero(n, 6);
  const Mat3& k = camera.intrinsics();
  const Mat3& r = camera.rotation();
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec3 pc = r * Vec3(p(i, 0), p(i, 1), p(i, 2)) + camera.translation();
    if (!(pc.z() > 0.0)) continue;
    ok[i] = 1;
    const double z = pc.z();
    const double u = (k(0, 0) * pc.x() + k(0, 1) * pc.y() + k(0, 2) * z) / z;
    const double v = (k(1, 1) * pc.y() + k(1, 2) * z) / z;
    uv(i, 0) = u;
    uv(i, 1) = v;
    Eigen::Matrix<double, 2, 3> d_cam;
    d_cam << k(0, 0) / z, k(0, 1) / z, (k(0, 2) - u) / z, 0.0, k(1, 1) / z, (k(1, 2) - v) / z;
    const Eigen::Matrix<double, 2, 3> d_world = d_cam * r;
    for (int a = 0; a < 2; ++a)
      for (int c = 0; c < 3; ++c) jac(i, a * 3 + c) = d_world(a, c);
  }
  if (valid) *valid = ok;
  return tape.custom({points}, std::move(uv), [points, jac = std::move(jac)](Tape& t, int self) {
    const Matrix& g = t.node_grad(self);
    Matrix& gp = t.grad_ref(points);
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      for (int c = 0; c < 3; ++c) gp(i, c) += g(i, 0) * jac(i, c) + g(i, 1) * jac(i, 3 + c);
    }
  });
}

Var sample_image(Tape& tape, Var uv, const Image& image, std::vector<std::uint8_t>* valid) {
  const Matrix& q = tape.value(uv);
  if (q.cols() != 2) throw std::invalid_argument("sample_image: uv must be n x 2");
  const Eigen::Index n = q.rows();
  const int ch = image.channels;
  std::vector<std::uint8_t> ok(n, 0);
  if (valid && static_cast<Eigen::Index>(valid->size()) == n) ok = *valid;
  else std::fill(ok.begin(), ok.end(), 1);
  Matrix out = Matrix::Zero(n, ch);
  Matrix du = Matrix::Zero(n, ch);
  Matrix dv = Matrix::Zero(n, ch);
  std::uint64_t cells = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!ok[i]) continue;
    const Vec2 at(q(i, 0), q(i, 1));
    if (!bilinear_sample_with_gradient(image, at, out.row(i).data(), du.row(i).data(),
                                       dv.row(i).data())) {
      ok[i] = 0;
      continue;
    }
    cells = cells * 1000003ULL + static_cast<std::uint64_t>(std::floor(at.x()) + 4096) * 8192ULL +
            static_cast<std::uint64_t>(std::floor(at.y()) + 4096);
  }
  tape.note_kink(cells);
  if (valid) *valid = ok;
  return tape.custom({uv}, std::move(out),
                     [uv, du = std::move(du), dv = std::move(dv)](Tape& t, int self) {
                       const Matrix& g = t.node_grad(self);
                       Matrix& gq = t.grad_ref(uv);
                       gq.col(0) += g.cwiseProduct(du).rowwise().sum();
                       gq.col(1) += g.cwiseProduct(dv).rowwise().sum();
                     });
}

Var aggregate_views(Tape& tape, std::span<const Var> colors,
                    std::span<const std::vector<std::uint8_t>> valid, double gamma,
                    std::vector<std::uint8_t>* sample_valid) {
  const std::size_t s_count = colors.size();
  if (s_count == 0 || valid.size() != s_count) {
    throw std::invalid_argument("aggregate_views: need one validity vector per source");
  }
  const Eigen::Index n = tape.rows(colors[0]);
  for (Var c : colors) {
    if (tape.rows(c) != n || tape.cols(c) != 3) throw std::invalid_argument("aggregate_views: colors must be n x 3");
  }
  Matrix out = Matrix::Zero(n, 4);
  // Saved per (row, source): view weight u and centered color c - mean.
  Matrix weights = Matrix::Zero(n, static_cast<Eigen::Index>(s_count));
  std::vector<std::uint8_t> ok(n, 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    int m = 0;
    Vec3 mean = Vec3::Zero();
    for (std::size_t s = 0; s < s_count; ++s) {
      if (!valid[s][i]) continue;
      mean += tape.value(colors[s]).row(i).transpose();
      ++m;
    }
    if (m < 2) continue;
    ok[i] = 1;
    mean /= m;
    double zmax = -std::numeric_limits<double>::infinity();
    std::vector<double> z(s_count, 0.0);
    for (std::size_t s = 0; s < s_count; ++s) {
      if (!valid[s][i]) continue;
      const Vec3 c = tape.value(colors[s]).row(i).transpose();
      z[s] = -gamma * (c - mean).squaredNorm();
      zmax = std::max(zmax, z[s]);
    }
    double zsum = 0.0;
    for (std::size_t s = 0; s < s_count; ++s) {
      if (!valid[s][i]) continue;
      weights(i, s) = std::exp(z[s] - zmax);
      zsum += weights(i, s);
    }
    Vec3 mu = Vec3::Zero();
    for (std::size_t s = 0; s < s_count; ++s) {
      if (!valid[s][i]) continue;
      weights(i, s) /= zsum;
      mu += weights(i, s) * tape.value(colors[s]).row(i).transpose();
    }
    double var = 0.0;
    for (std::size_t s = 0; s < s_count; ++s) {
      if (!valid[s][i]) continue;
      var += weights(i, s) * (tape.value(colors[s]).row(i).transpose() - mu).squaredNorm();
    }
    out.row(i) << mu.x(), mu.y(), mu.z(), var;
  }
  if (sample_valid) *sample_valid = ok;

  std::vector<Var> cs(colors.begin(), colors.end());
  std::vector<std::vector<std::uint8_t>> vs(valid.begin(), valid.end());
  return tape.custom(cs, std::move(out),
                     [cs, vs, ok, weights = std::move(weights), gamma](Tape& t, int self) {
    const Matrix& g = t.node_grad(self);
    const Matrix& agg = t.value(Var{self});
    const std::size_t s_count = cs.size();
    std::vector<Matrix*> gc(s_count, nullptr);
    for (std::size_t s = 0; s < s_count; ++s) {
      if (t.requires_grad(cs[s])) gc[s] = &t.grad_ref(cs[s]);
    }
    std::vector<double> gz(s_count);
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      if (!ok[i]) continue;
      const Vec3 g_mu(g(i, 0), g(i, 1), g(i, 2));
      const double g_var = g(i, 3);
      const Vec3 mu(agg(i, 0), agg(i, 1), agg(i, 2));
      int m = 0;
      Vec3 mean = Vec3::Zero();
      for (std::size_t s = 0; s < s_count; ++s) {
        if (!vs[s][i]) continue;
        mean += t.value(cs[s]).row(i).transpose();
        ++m;
      }
      mean /= m;
      // d/du_s, then through the softmax.
      double dot = 0.0;
      for (std::size_t s = 0; s < s_count; ++s) {
        if (!vs[s][i]) continue;
        const Vec3 c = t.value(cs[s]).row(i).transpose();
        gz[s] = g_mu.dot(c) + g_var * (c - mu).squaredNorm();
        dot += weights(i, s) * gz[s];
      }
      Vec3 centered_sum = Vec3::Zero();
      for (std::size_t s = 0; s < s_count; ++s) {
        if (!vs[s][i]) continue;
        gz[s] = weights(i, s) * (gz[s] - dot);
        const Vec3 c = t.value(cs[s]).row(i).transpose();
        centered_sum += gz[s] * (c - mean);
      }
      for (std::size_t s = 0; s < s_count; ++s) {
        if (!vs[s][i] || gc[s] == nullptr) continue;
        const Vec3 c = t.value(cs[s]).row(i).transpose();
        const double u = weights(i, s);
        // Direct terms through mu and variance (d var / d mu vanishes).
        Vec3 grad = u * g_mu + 2.0 * g_var * u * (c - mu);
        // Through z_s = -gamma |c_s - mean|^2.
        grad += -2.0 * gamma * (gz[s] * (c - mean) - centered_sum / m);
        gc[s]->row(i) += grad.transpose();
      }
    }
  });
}

RayRender render_rays_ibr(Tape& tape, const SimpleIbr& ibr, const SimpleIbr::Bound& bound,
                          std::span<const SourceView> sources, std::span<const Var> bent,
                          const Matrix& distances, int samples_per_ray) {
  if (sources.size() != bent.size() || sources.empty()) {
    throw std::invalid_argument("render_rays_ibr: need one bent point set per source");
  }
  if (samples_per_ray < 1 || distances.cols() != 1 || distances.rows() % samples_per_ray != 0) {
    throw std::invalid_argument("render_rays_ibr: distances must be RN x 1");
  }
  const Eigen::Index rn = distances.rows();
  RayRender out;
  out.samples_per_ray = samples_per_ray;
  std::vector<Var> colors;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    if (tape.rows(bent[s]) != rn) throw std::invalid_argument("render_rays_ibr: bent rows != RN");
    std::vector<std::uint8_t> ok;
    const Var uv = project_points(tape, bent[s], sources[s].camera, &ok);
    out.in_front.push_back(ok);
    colors.push_back(sample_image(tape, uv, *sources[s].image, &ok));
    out.uv.push_back(uv);
    out.in_view.push_back(std::move(ok));
  }
  const Var agg = aggregate_views(tape, colors, out.in_view, ibr.config().gamma, &out.sample_valid);
  out.mean = tape.slice_cols(agg, 0, 3);

  const auto& cfg = ibr.config();
  const Matrix l_norm = (distances.array() - cfg.near) / (cfg.far - cfg.near);
  const Var parts[] = {tape.slice_cols(agg, 0, 4), tape.constant(l_norm)};
  const Var features = tape.concat_cols(parts);
  const Var logits = ibr.logits(tape, bound, features);
  out.weights = tape.segment_softmax(logits, samples_per_ray, out.sample_valid);
  out.color = tape.segment_sum(tape.mul_col(out.mean, out.weights), samples_per_ray);
  out.depth = tape.segment_sum(tape.mul_col(tape.constant(distances), out.weights), samples_per_ray);

  const Eigen::Index rays = rn / samples_per_ray;
  out.ray_valid.assign(rays, 0);
  for (Eigen::Index i = 0; i < rn; ++i) {
    if (out.sample_valid[i]) out.ray_valid[i / samples_per_ray] = 1;
  }
  return out;
}

BackboneOutput render_pixel_ibr(const SimpleIbr& ibr, std::span<const SourceView> sources,
                                const RaySampleSet& samples) {
  const int n = static_cast<int>(samples.size());
  Tape tape;
  const auto bound = ibr.bind(tape);
  std::vector<Var> bent;
  for (const auto& src : sources) {
    const auto it = samples.bent_points.find(src.frame);
    const auto& pts = it != samples.bent_points.end() ? it->second : samples.base_points;
    if (static_cast<int>(pts.size()) != n) throw std::invalid_argument("render_pixel_ibr: bent size mismatch");
    Matrix m(n, 3);
    for (int i = 0; i < n; ++i) m.row(i) = pts[i].transpose();
    bent.push_back(tape.constant(std::move(m)));
  }
  Matrix dist(n, 1);
  for (int i = 0; i < n; ++i) dist(i, 0) = samples.distances[i];
  const RayRender r = render_rays_ibr(tape, ibr, bound, sources, bent, dist, n);

  BackboneOutput out;
  out.distances = samples.distances;
  out.renderable = r.ray_valid[0] != 0;
  const Matrix& c = tape.value(r.color);
  out.color = Vec3(c(0, 0), c(0, 1), c(0, 2));
  const Matrix& w = tape.value(r.weights);
  out.ray_weights.assign(w.data(), w.data() + n);
  out.depth = tape.value(r.depth)(0, 0);
  for (std::size_t s = 0; s < sources.size(); ++s) {
    const Matrix& uv = tape.value(r.uv[s]);
    auto& dst = out.per_source_uv[sources[s].frame];
    for (int i = 0; i < n; ++i) dst.emplace_back(uv(i, 0), uv(i, 1));
    out.per_source_in_view[sources[s].frame] = r.in_view[s];
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

Vec3 shade_at(const SceneSpec& scene, int primitive, const Vec3& q, double frame) {
  const Primitive& p = scene.primitives[primitive];
  const Vec3 local = q - (p.center + p.motion.offset(frame, scene.dt));
  if (p.shape == Primitive::Shape::kRectangle) {
    return p.texture.color(local.dot(p.axis_u), local.dot(p.axis_v));
  }
  return p.texture.color(local.x(), local.y());
}

}  // namespace

BackboneOutput render_pixel_oracle(const SceneSpec& scene, const Ray& ray,
                                   const RaySampleSet& samples, std::optional<int> source_frame) {
  const std::size_t n = samples.size();
  BackboneOutput out;
  out.distances = samples.distances;
  out.ray_weights.assign(n, n ? 1.0 / n : 0.0);
  const auto hit = trace(scene, ray.origin, ray.direction, ray.time);
  if (!hit || n == 0) {
    out.color = scene.background;
    out.depth = estimate_depth(out);
    return out;
  }
  std::size_t nearest = 0;
  for (std::size_t i = 1; i < n; ++i) {
    if (std::abs(samples.distances[i] - hit->distance) <
        std::abs(samples.distances[nearest] - hit->distance))
      nearest = i;
  }
  std::fill(out.ray_weights.begin(), out.ray_weights.end(), 0.0);
  out.ray_weights[nearest] = 1.0;
  out.depth = estimate_depth(out);
  if (!source_frame) {
    out.color = hit->color;
    return out;
  }
  const auto it = samples.bent_points.find(*source_frame);
  const Vec3 shift = it == samples.bent_points.end()
                         ? Vec3::Zero()
                         : Vec3(it->second.at(nearest) - samples.base_points.at(nearest));
  out.color = shade_at(scene, hit->primitive, hit->point + shift, *source_frame);
  return out;
}

}  // namespace flowibr
