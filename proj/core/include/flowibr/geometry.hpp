#pragma once

// Pinhole camera math.
//
// Pixel convention: integer pixel (x, y) is the sample at continuous
// coordinate (x, y). An image of width W spans [-0.5, W - 0.5] horizontally.

#include <map>
#include <optional>
#include <random>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "flowibr/image.hpp"

namespace flowibr {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat34 = Eigen::Matrix<double, 3, 4>;

struct Pixel {
  int x = 0;
  int y = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
};

/// Intrinsics K (upper triangular) and world-to-camera extrinsics [R|t].
class CameraMatrix {
 public:
  CameraMatrix() = default;
  /// Validates fx, fy > 0, orthonormal R, positive image size.
  CameraMatrix(const Mat3& intrinsics, const Mat3& rotation, const Vec3& translation,
               int width, int height);

  static CameraMatrix from_pinhole(double fx, double fy, double cx, double cy, int width,
                                   int height, const Mat3& rotation = Mat3::Identity(),
                                   const Vec3& translation = Vec3::Zero());
  /// Camera at `eye` looking at `target`; image y axis points along -up.
  static CameraMatrix look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fx,
                              double fy, double cx, double cy, int width, int height);
  /// Build from a row-major 3x4 projection-free description: K (3x3) and [R|t] (3x4).
  static CameraMatrix from_rows(const std::vector<double>& k9, const std::vector<double>& rt12,
                                int width, int height);

  [[nodiscard]] const Mat3& intrinsics() const { return k_; }
  [[nodiscard]] const Mat3& rotation() const { return r_; }
  [[nodiscard]] const Vec3& translation() const { return t_; }
  [[nodiscard]] int width() const { return width_; }
  [[nodiscard]] int height() const { return height_; }
  [[nodiscard]] double fx() const { return k_(0, 0); }
  [[nodiscard]] double fy() const { return k_(1, 1); }
  [[nodiscard]] double cx() const { return k_(0, 2); }
  [[nodiscard]] double cy() const { return k_(1, 2); }

  [[nodiscard]] Vec3 center() const { return -r_.transpose() * t_; }
  [[nodiscard]] Mat34 projection() const;
  [[nodiscard]] Mat34 extrinsics() const;

  /// Camera for an image area-averaged by `factor`: coarse pixel X covers
  /// fine pixels [fX, fX + f - 1], so its center sits at fine fX + (f-1)/2.
  [[nodiscard]] CameraMatrix subsampled(int factor) const;

  /// Row-major K then [R|t], used by the manifest.
  [[nodiscard]] std::vector<double> intrinsics_rows() const;
  [[nodiscard]] std::vector<double> extrinsics_rows() const;

 private:
  Mat3 k_ = Mat3::Identity();
  Mat3 r_ = Mat3::Identity();
  Vec3 t_ = Vec3::Zero();
  int width_ = 1;
  int height_ = 1;
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  Pixel pixel;
  double time = 0.0;

  [[nodiscard]] Vec3 at(double l) const { return origin + l * direction; }
};

struct RaySampleSet {
  std::vector<double> distances;
  std::vector<Vec3> base_points;
  /// Source frame index -> displaced copy of base_points.
  std::map<int, std::vector<Vec3>> bent_points;

  [[nodiscard]] std::size_t size() const { return distances.size(); }
};

struct Projection {
  Vec2 uv = Vec2::Zero();
  double depth = 0.0;
  bool valid = false;  // false when the point is on or behind the image plane
};

/// Ray from the camera center through the center of `pixel`.
Ray cast_ray(const CameraMatrix& camera, Pixel pixel, double time = 0.0);

/// n distances in [near, far]. Without `jitter` the grid includes both
/// endpoints; with it, one uniform draw per stratum of width (far-near)/n.
RaySampleSet sample_along_ray(const Ray& ray, double near, double far, int n,
                              std::mt19937_64* jitter = nullptr);

Projection project(const CameraMatrix& camera, const Vec3& point);

/// Bilinear lookup at continuous `uv`. Returns nullopt when uv falls outside
/// [-0.5, W-0.5] x [-0.5, H-0.5]; inside that span, edge pixels are replicated.
std::optional<Eigen::VectorXd> bilinear_sample(const Image& image, const Vec2& uv);

/// Value and d(value)/du, d(value)/dv for one channel pair lookup. Returns
/// false when out of view.
bool bilinear_sample_with_gradient(const Image& image, const Vec2& uv, double* value,
                                   double* d_du, double* d_dv);

[[nodiscard]] inline bool in_view(const Image& image, const Vec2& uv) {
  return uv.x() >= -0.5 && uv.x() <= image.width - 0.5 && uv.y() >= -0.5 &&
         uv.y() <= image.height - 0.5;
}

}  // namespace flowibr
