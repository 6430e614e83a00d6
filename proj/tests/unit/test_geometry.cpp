#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "flowibr/geometry.hpp"

using namespace flowibr;

namespace {

CameraMatrix unit_camera(int w = 4, int h = 4) { return CameraMatrix::from_pinhole(1, 1, 0, 0, w, h); }

CameraMatrix random_camera(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const Vec3 eye(u(rng), u(rng), u(rng) - 1.0);
  const Vec3 target(u(rng) * 0.5, u(rng) * 0.5, 4.0 + u(rng));
  return CameraMatrix::look_at(eye, target, Vec3(0, -1, 0), 80 + 20 * u(rng), 80 + 20 * u(rng),
                               47.5 + 5 * u(rng), 26.5 + 5 * u(rng), 96, 54);
}

}  // namespace

TEST(CastRay, PrincipalRayOfUnitCamera) {
  const Ray r = cast_ray(unit_camera(), {0, 0});
  EXPECT_EQ(r.origin, Vec3::Zero());
  EXPECT_NEAR((r.direction - Vec3::UnitZ()).norm(), 0.0, 1e-15);
}

TEST(CastRay, PrincipalPointPixel) {
  const auto cam = CameraMatrix::from_pinhole(100, 100, 50, 50, 101, 101);
  EXPECT_NEAR((cast_ray(cam, {50, 50}).direction - Vec3::UnitZ()).norm(), 0.0, 1e-15);
}

TEST(CastRay, TranslatedCameraOrigin) {
  const auto cam = CameraMatrix::from_pinhole(100, 100, 50, 50, 101, 101, Mat3::Identity(), Vec3(-1, 0, 0));
  const Ray r = cast_ray(cam, {50, 50});
  EXPECT_NEAR((r.origin - Vec3(1, 0, 0)).norm(), 0.0, 1e-15);
  EXPECT_NEAR((r.direction - Vec3::UnitZ()).norm(), 0.0, 1e-15);
}

TEST(CastRay, OutOfBoundsPixelThrows) {
  const auto cam = unit_camera(4, 3);
  EXPECT_THROW(cast_ray(cam, {4, 0}), std::out_of_range);
  EXPECT_THROW(cast_ray(cam, {0, -1}), std::out_of_range);
}

TEST(CastRay, RoundTripLandsOnPixelCenter) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const CameraMatrix cam = random_camera(rng);
    const Pixel px{static_cast<int>(rng() % 96), static_cast<int>(rng() % 54)};
    const Ray r = cast_ray(cam, px);
    EXPECT_NEAR(r.direction.norm(), 1.0, 1e-12);
    for (double l : {0.1, 1.0, 3.7, 40.0}) {
      const Projection p = project(cam, r.at(l));
      ASSERT_TRUE(p.valid);
      EXPECT_LT((p.uv - Vec2(px.x, px.y)).norm(), 1e-6);
    }
  }
}

TEST(Camera, RejectsBadIntrinsicsAndRotation) {
  EXPECT_THROW(CameraMatrix::from_pinhole(0, 1, 0, 0, 4, 4), std::invalid_argument);
  EXPECT_THROW(CameraMatrix::from_pinhole(1, -1, 0, 0, 4, 4), std::invalid_argument);
  Mat3 skew = Mat3::Identity();
  skew(0, 1) = 0.1;
  EXPECT_THROW(CameraMatrix::from_pinhole(1, 1, 0, 0, 4, 4, skew), std::invalid_argument);
}

TEST(Camera, SubsampledPrincipalPointTracksBlockCenters) {
  const auto cam = CameraMatrix::from_pinhole(86.4, 86.4, 47.5, 26.5, 96, 54);
  const auto s = cam.subsampled(6);
  EXPECT_EQ(s.width(), 16);
  EXPECT_EQ(s.height(), 9);
  // Coarse pixel 0 covers fine pixels 0..5 whose center is 2.5.
  const Ray fine = cast_ray(cam, {0, 0});
  const Projection p = project(s, fine.at(3.0));
  EXPECT_NEAR(p.uv.x(), (0.0 - 2.5) / 6.0, 1e-12);
  EXPECT_NEAR(s.fx(), 14.4, 1e-12);
}

TEST(SampleAlongRay, UniformGridIncludesEndpoints) {
  const Ray r;
  const auto s = sample_along_ray(r, 1.0, 3.0, 3);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s.distances[0], 1.0);
  EXPECT_EQ(s.distances[1], 2.0);
  EXPECT_EQ(s.distances[2], 3.0);
}

TEST(SampleAlongRay, TinyIntervalEndpoints) {
  const auto s = sample_along_ray(Ray{}, 2.0, 2.0001, 2);
  EXPECT_EQ(s.distances[0], 2.0);
  EXPECT_EQ(s.distances[1], 2.0001);
}

TEST(SampleAlongRay, JitterStaysInStrataAndIsReproducible) {
  std::mt19937_64 a(11), b(11);
  Ray r;
  r.origin = Vec3(0.1, 0.2, 0.3);
  r.direction = Vec3(1, 2, 2).normalized();
  const auto s1 = sample_along_ray(r, 1.0, 5.0, 4, &a);
  const auto s2 = sample_along_ray(r, 1.0, 5.0, 4, &b);
  for (int i = 0; i < 4; ++i) {
    EXPECT_GE(s1.distances[i], 1.0 + i);
    EXPECT_LT(s1.distances[i], 2.0 + i);
    EXPECT_EQ(s1.distances[i], s2.distances[i]);
  }
}

TEST(SampleAlongRay, BasePointsExactAndIncreasing) {
  std::mt19937_64 rng(5);
  Ray r;
  r.origin = Vec3(1, -2, 0.5);
  r.direction = Vec3(0.3, 0.1, 1).normalized();
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = sample_along_ray(r, 0.5, 9.0, 2 + trial, trial % 2 ? &rng : nullptr);
    for (std::size_t i = 0; i < s.size(); ++i) {
      EXPECT_EQ(s.base_points[i], r.origin + s.distances[i] * r.direction);
      if (i > 0) {
        EXPECT_GT(s.distances[i], s.distances[i - 1]);
      }
    }
  }
}

TEST(SampleAlongRay, RejectsBadRanges) {
  EXPECT_THROW(sample_along_ray(Ray{}, 3.0, 3.0, 4), std::invalid_argument);
  EXPECT_THROW(sample_along_ray(Ray{}, 3.0, 1.0, 4), std::invalid_argument);
  EXPECT_THROW(sample_along_ray(Ray{}, 0.0, 1.0, 4), std::invalid_argument);
  EXPECT_THROW(sample_along_ray(Ray{}, 1.0, 2.0, 1), std::invalid_argument);
}

TEST(Project, UnitCameraExamples) {
  const auto cam = unit_camera();
  const auto a = project(cam, {0, 0, 2});
  EXPECT_TRUE(a.valid);
  EXPECT_EQ(a.uv, Vec2(0, 0));
  EXPECT_EQ(a.depth, 2.0);
  EXPECT_EQ(project(cam, {2, 0, 2}).uv, Vec2(1, 0));
  EXPECT_FALSE(project(cam, {0, 0, -1}).valid);
}

TEST(Bilinear, PixelCenterMidpointAndOutOfView) {
  Image img(2, 1, 1);
  img.at(0, 0) = 0.0f;
  img.at(1, 0) = 1.0f;
  EXPECT_EQ((*bilinear_sample(img, {1, 0}))(0), 1.0);
  EXPECT_NEAR((*bilinear_sample(img, {0.5, 0}))(0), 0.5, 1e-12);
  EXPECT_FALSE(bilinear_sample(img, {-5, -5}).has_value());
  EXPECT_TRUE(bilinear_sample(img, {-0.5, -0.5}).has_value());
  EXPECT_FALSE(bilinear_sample(img, {1.6, 0}).has_value());
}

TEST(Bilinear, GradientMatchesDifferences) {
  Image img(5, 4, 3);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (float& v : img.data) v = u(rng);
  const Vec2 at(2.3, 1.6);
  double val[3], du[3], dv[3], vp[3], vm[3], tmp[3];
  ASSERT_TRUE(bilinear_sample_with_gradient(img, at, val, du, dv));
  const double h = 1e-6;
  bilinear_sample_with_gradient(img, at + Vec2(h, 0), vp, tmp, tmp);
  bilinear_sample_with_gradient(img, at - Vec2(h, 0), vm, tmp, tmp);
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(du[c], (vp[c] - vm[c]) / (2 * h), 1e-7);
  bilinear_sample_with_gradient(img, at + Vec2(0, h), vp, tmp, tmp);
  bilinear_sample_with_gradient(img, at - Vec2(0, h), vm, tmp, tmp);
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(dv[c], (vp[c] - vm[c]) / (2 * h), 1e-7);
}

// Projections of one target ray's samples all lie on a line in any other view.
TEST(Epipolar, StaticSamplesAreCollinearInSourceViews) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const CameraMatrix target = random_camera(rng);
    const CameraMatrix source = random_camera(rng);
    const Ray r = cast_ray(target, {static_cast<int>(rng() % 96), static_cast<int>(rng() % 54)});
    const auto s = sample_along_ray(r, 1.5, 5.5, 16, &rng);
    std::vector<Vec2> uv;
    for (const Vec3& p : s.base_points) {
      const Projection pr = project(source, p);
      if (pr.valid) uv.push_back(pr.uv);
    }
    if (uv.size() < 3) continue;
    const Vec2 a = uv.front(), b = uv.back();
    const Vec2 n = Vec2(-(b - a).y(), (b - a).x()).normalized();
    for (const Vec2& q : uv) EXPECT_LT(std::abs(n.dot(q - a)), 1e-6);
  }
}
