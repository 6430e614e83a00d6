#include "flowibr/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace flowibr {

CameraMatrix::CameraMatrix(const Mat3& intrinsics, const Mat3& rotation, const Vec3& translation,
                           int width, int height)
    : k_(intrinsics), r_(rotation), t_(translation), width_(width), height_(height) {
  if (!(k_(0, 0) > 0.0) || !(k_(1, 1) > 0.0)) {
    throw std::invalid_argument("CameraMatrix: focal lengths must be positive");
  }
  if (k_(1, 0) != 0.0 || k_(2, 0) != 0.0 || k_(2, 1) != 0.0 || k_(2, 2) != 1.0) {
    throw std::invalid_argument("CameraMatrix: intrinsics must be upper triangular with K22 = 1");
  }
  if (width <= 0 || height <= 0) {
    throw std::invalid_argument("CameraMatrix: image size must be positive");
  }
  const double ortho_err = (r_ * r_.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff();
  if (ortho_err > 1e-9 || r_.determinant() < 0.0) {
    throw std::invalid_argument("CameraMatrix: rotation is not a proper orthonormal matrix");
  }
}

CameraMatrix CameraMatrix::from_pinhole(double fx, double fy, double cx, double cy, int width,
                                        int height, const Mat3& rotation,
                                        const Vec3& translation) {
  Mat3 k;
  k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
  return {k, rotation, translation, width, height};
}

CameraMatrix CameraMatrix::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fx,
                                   double fy, double cx, double cy, int width, int height) {
  const Vec3 forward = (target - eye).normalized();
  Vec3 right = forward.cross(up);
  if (right.norm() < 1e-12) throw std::invalid_argument("look_at: up is parallel to view");
  right.normalize();
  const Vec3 down = forward.cross(right);
  // Rows of R are the camera axes expressed in world coordinates.
  Mat3 r;
  r.row(0) = right.transpose();
  r.row(1) = down.transpose();
  r.row(2) = forward.transpose();
  return from_pinhole(fx, fy, cx, cy, width, height, r, -r * eye);
}

CameraMatrix CameraMatrix::from_rows(const std::vector<double>& k9,
                                     const std::vector<double>& rt12, int width, int height) {
  if (k9.size() != 9 || rt12.size() != 12) {
    throw std::invalid_argument("CameraMatrix::from_rows: expected 9 + 12 values");
  }
  Mat3 k, r;
  Vec3 t;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      k(i, j) = k9[i * 3 + j];
      r(i, j) = rt12[i * 4 + j];
    }
    t(i) = rt12[i * 4 + 3];
  }
  return {k, r, t, width, height};
}

Mat34 CameraMatrix::extrinsics() const {
  Mat34 e;
  e.leftCols<3>() = r_;
  e.col(3) = t_;
  return e;
}

Mat34 CameraMatrix::projection() const { return k_ * extrinsics(); }

CameraMatrix CameraMatrix::subsampled(int factor) const {
  if (factor < 1) throw std::invalid_argument("subsampled: factor must be >= 1");
  if (factor == 1) return *this;
  const double f = factor;
  const double shift = (f - 1.0) / 2.0;
  Mat3 k = k_;
  k(0, 0) /= f;
  k(0, 1) /= f;
  k(1, 1) /= f;
  k(0, 2) = (k_(0, 2) - shift) / f;
  k(1, 2) = (k_(1, 2) - shift) / f;
  return {k, r_, t_, std::max(1, width_ / factor), std::max(1, height_ / factor)};
}

std::vector<double> CameraMatrix::intrinsics_rows() const {
  std::vector<double> out(9);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out[i * 3 + j] = k_(i, j);
  return out;
}

std::vector<double> CameraMatrix::extrinsics_rows() const {
  std::vector<double> out(12);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) out[i * 4 + j] = r_(i, j);
    out[i * 4 + 3] = t_(i);
  }
  return out;
}

Ray cast_ray(const CameraMatrix& camera, Pixel pixel, double time) {
  if (pixel.x < 0 || pixel.y < 0 || pixel.x >= camera.width() || pixel.y >= camera.height()) {
    throw std::out_of_range("cast_ray: pixel outside image bounds");
  }
  const Vec3 m(pixel.x, pixel.y, 1.0);
  const Vec3 cam_dir = camera.intrinsics().triangularView<Eigen::Upper>().solve(m);
  Ray ray;
  ray.origin = camera.center();
  ray.direction = (camera.rotation().transpose() * cam_dir).normalized();
  ray.pixel = pixel;
  ray.time = time;
  return ray;
}

RaySampleSet sample_along_ray(const Ray& ray, double near, double far, int n,
                              std::mt19937_64* jitter) {
  if (!(near > 0.0) || !(near < far)) {
    throw std::invalid_argument("sample_along_ray: require 0 < near < far");
  }
  if (n < 2) throw std::invalid_argument("sample_along_ray: require n >= 2");
  RaySampleSet s;
  s.distances.resize(n);
  if (jitter == nullptr) {
    const double step = (far - near) / (n - 1);
    for (int i = 0; i < n; ++i) s.distances[i] = near + step * i;
    s.distances[n - 1] = far;
  } else {
    const double width = (far - near) / n;
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (int i = 0; i < n; ++i) s.distances[i] = near + width * (i + u01(*jitter));
  }
  s.base_points.reserve(n);
  for (double l : s.distances) s.base_points.push_back(ray.origin + l * ray.direction);
  return s;
}

Projection project(const CameraMatrix& camera, const Vec3& point) {
  const Vec3 pc = camera.rotation() * point + camera.translation();
  Projection out;
  out.depth = pc.z();
  if (!(pc.z() > 0.0)) return out;
  const Vec3 h = camera.intrinsics() * pc;
  out.uv = Vec2(h.x() / h.z(), h.y() / h.z());
  out.valid = true;
  return out;
}

namespace {

struct Taps {
  int x0, x1, y0, y1;
  double fx, fy;
  bool clamp_x, clamp_y;
};

Taps bilinear_taps(const Image& image, const Vec2& uv) {
  const double u = std::clamp(uv.x(), 0.0, static_cast<double>(image.width - 1));
  const double v = std::clamp(uv.y(), 0.0, static_cast<double>(image.height - 1));
  Taps t{};
  t.x0 = static_cast<int>(std::floor(u));
  t.y0 = static_cast<int>(std::floor(v));
  t.x1 = std::min(t.x0 + 1, image.width - 1);
  t.y1 = std::min(t.y0 + 1, image.height - 1);
  t.fx = u - t.x0;
  t.fy = v - t.y0;
  t.clamp_x = uv.x() < 0.0 || uv.x() > image.width - 1;
  t.clamp_y = uv.y() < 0.0 || uv.y() > image.height - 1;
  return t;
}

}  // namespace

std::optional<Eigen::VectorXd> bilinear_sample(const Image& image, const Vec2& uv) {
  if (image.empty() || !in_view(image, uv)) return std::nullopt;
  const Taps t = bilinear_taps(image, uv);
  Eigen::VectorXd out(image.channels);
  for (int c = 0; c < image.channels; ++c) {
    const double top = (1.0 - t.fx) * image.at(t.x0, t.y0, c) + t.fx * image.at(t.x1, t.y0, c);
    const double bot = (1.0 - t.fx) * image.at(t.x0, t.y1, c) + t.fx * image.at(t.x1, t.y1, c);
    out(c) = (1.0 - t.fy) * top + t.fy * bot;
  }
  return out;
}

bool bilinear_sample_with_gradient(const Image& image, const Vec2& uv, double* value,
                                   double* d_du, double* d_dv) {
  if (image.empty() || !in_view(image, uv)) return false;
  const Taps t = bilinear_taps(image, uv);
  for (int c = 0; c < image.channels; ++c) {
    const double a = image.at(t.x0, t.y0, c);
    const double b = image.at(t.x1, t.y0, c);
    const double d = image.at(t.x0, t.y1, c);
    const double e = image.at(t.x1, t.y1, c);
    const double top = (1.0 - t.fx) * a + t.fx * b;
    const double bot = (1.0 - t.fx) * d + t.fx * e;
    value[c] = (1.0 - t.fy) * top + t.fy * bot;
    d_du[c] = t.clamp_x ? 0.0 : (1.0 - t.fy) * (b - a) + t.fy * (e - d);
    d_dv[c] = t.clamp_y ? 0.0 : bot - top;
  }
  return true;
}

}  // namespace flowibr
