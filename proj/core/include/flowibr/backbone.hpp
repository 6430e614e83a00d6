#pragma once

// Rendering backbones. Both map ray samples (possibly bent per source frame)
// to a pixel color, per-sample ray weights summing to one, and a depth.
//
// The learnable one is a photo-consistency image-based renderer:
//   view stage  u_{s,n} = softmax_s(-gamma |c_{s,n} - mean_s c_{s,n}|^2)
//               mu_n = sum_s u c,  var_n = sum_s u |c - mu_n|^2
//   ray stage   a_n = softmax_n(mlp(mu_n, var_n, l_n))
//   color = sum_n a_n mu_n,  depth = sum_n a_n l_n
// Sources that project a sample behind the camera or outside the image are
// dropped for that sample; a sample seen by fewer than two sources is masked.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "flowibr/diffcore.hpp"
#include "flowibr/geometry.hpp"
#include "flowibr/image.hpp"
#include "flowibr/synthdata.hpp"

namespace flowibr {

struct BackboneOutput {
  Vec3 color = Vec3::Zero();
  std::vector<double> distances;
  std::vector<double> ray_weights;
  double depth = 0.0;
  std::map<int, std::vector<Vec2>> per_source_uv;
  std::map<int, std::vector<std::uint8_t>> per_source_in_view;
  bool renderable = true;
};

[[nodiscard]] double estimate_depth(const BackboneOutput& output);

struct IbrConfig {
  double gamma = 50.0;
  int hidden = 16;
  /// Initial slope of the logit w.r.t. photo-consistency variance.
  double prior_sharpness = 200.0;
  double near = 1.5;
  double far = 5.5;
};

class SimpleIbr {
 public:
  static constexpr int kFeatures = 5;  // mu (3), variance, normalized distance

  struct Bound {
    diff::Var w1, b1, w2, b2, w_lin, b_lin;
  };

  explicit SimpleIbr(IbrConfig config = {}, std::uint64_t seed = 0);

  [[nodiscard]] const IbrConfig& config() const { return config_; }
  IbrConfig& mutable_config() { return config_; }
  [[nodiscard]] diff::ParamStore& params() { return params_; }
  [[nodiscard]] const diff::ParamStore& params() const { return params_; }

  Bound bind(diff::Tape& tape) const;
  /// features (n x 5) -> logits (n x 1).
  diff::Var logits(diff::Tape& tape, const Bound& bound, diff::Var features) const;

 private:
  IbrConfig config_;
  diff::ParamStore params_;
};

struct SourceView {
  const Image* image = nullptr;
  CameraMatrix camera;
  int frame = 0;
};

/// Tape-level projection: n x 3 points -> n x 2 uv. `valid` receives 1 where
/// the point is in front of the camera.
diff::Var project_points(diff::Tape& tape, diff::Var points, const CameraMatrix& camera,
                         std::vector<std::uint8_t>* valid);

/// Tape-level bilinear lookup: n x 2 uv -> n x C. Rows that are invalid on
/// entry or fall outside the image get zeros and `valid` = 0.
diff::Var sample_image(diff::Tape& tape, diff::Var uv, const Image& image,
                       std::vector<std::uint8_t>* valid);

/// View stage. colors[s] is n x 3 for source s; returns n x 4 (mu, variance).
/// sample_valid receives 1 where at least two sources are valid.
diff::Var aggregate_views(diff::Tape& tape, std::span<const diff::Var> colors,
                          std::span<const std::vector<std::uint8_t>> valid, double gamma,
                          std::vector<std::uint8_t>* sample_valid);

struct RayRender {
  int samples_per_ray = 0;
  diff::Var color;     // R x 3
  diff::Var weights;   // RN x 1
  diff::Var depth;     // R x 1
  diff::Var mean;      // RN x 3 per-sample aggregated color
  std::vector<diff::Var> uv;                       // per source, RN x 2
  std::vector<std::vector<std::uint8_t>> in_front;  // per source, RN: projection defined
  std::vector<std::vector<std::uint8_t>> in_view;   // per source, RN: inside the image too
  std::vector<std::uint8_t> sample_valid;          // RN
  std::vector<std::uint8_t> ray_valid;             // R
};

/// Renders R rays with N samples each. bent[s] holds the RN x 3 sample
/// positions carried to sources[s]'s frame; distances is RN x 1.
RayRender render_rays_ibr(diff::Tape& tape, const SimpleIbr& ibr, const SimpleIbr::Bound& bound,
                          std::span<const SourceView> sources, std::span<const diff::Var> bent,
                          const diff::Matrix& distances, int samples_per_ray);

/// Single-pixel convenience wrapper. Sources without an entry in
/// samples.bent_points use the unbent base points.
BackboneOutput render_pixel_ibr(const SimpleIbr& ibr, std::span<const SourceView> sources,
                                const RaySampleSet& samples);

/// Analytic reference: exact nearest hit at the ray's time, one-hot weight on
/// the sample nearest the hit. With `source_frame`, the hit point is carried
/// by that sample's bending and shaded at the source frame.
BackboneOutput render_pixel_oracle(const SceneSpec& scene, const Ray& ray,
                                   const RaySampleSet& samples,
                                   std::optional<int> source_frame = std::nullopt);

}  // namespace flowibr
