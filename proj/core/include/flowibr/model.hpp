#pragma once

// A trained scene: the flow field plus the IBR backbone, with whole-image
// rendering at arbitrary camera and continuous time.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "flowibr/backbone.hpp"
#include "flowibr/checkpoint.hpp"
#include "flowibr/flowfield.hpp"
#include "flowibr/synthdata.hpp"

namespace flowibr {

struct ModelConfig {
  FlowFieldConfig flow{};
  IbrConfig ibr{};
};

struct Model {
  Model(const ModelConfig& config, std::uint64_t seed);

  FlowField flow;
  SimpleIbr ibr;
  std::uint64_t seed = 0;

  [[nodiscard]] CheckpointHeader header(std::int64_t step) const;
  void save(const std::filesystem::path& path, std::int64_t step) const;
  /// Loads parameters and optimizer state; returns the stored step. Throws if
  /// the file was written for a different architecture.
  std::int64_t load(const std::filesystem::path& path);
};

/// Training sources: the max_sources frames nearest to `target` other than
/// itself, ties toward earlier frames, clipped to [1, T]. Sorted ascending.
[[nodiscard]] std::vector<int> select_sources(int target, int max_sources, int num_frames);

/// Rendering sources for a continuous time: the max_sources frames within
/// `window` of `time`, nearest first with ties toward earlier frames. A frame
/// at the render time itself is eligible. Distances are compared after
/// rounding to 1e-3 frames so that times within that of a frame pick the same
/// set as the frame. Sorted ascending.
[[nodiscard]] std::vector<int> render_sources(double time, int max_sources, int num_frames,
                                              int window);

struct RenderOptions {
  int max_sources = 4;
  int samples = 32;
  bool flow_compensation = true;
  int chunk_rays = 64;
};

struct RenderResult {
  Image image;
  std::vector<double> depth;  // NaN where unrenderable
  Mask renderable;
  std::vector<int> sources;
  bool continuous_time = false;  // true when `time` is not a frame index
};

/// `frames[t - 1]` is the observation of frame t.
RenderResult render_image(const Model& model, std::span<const Observation> frames,
                          const CameraMatrix& camera, double time, const RenderOptions& options);

struct FlowRender {
  int width = 0;
  int height = 0;
  std::vector<Vec2> forward;   // per pixel, image-plane flow weighted by ray weights
  std::vector<Vec2> backward;
  Mask valid;
};

/// Projects s_f and s_b at the ray samples onto the image plane of `camera`.
FlowRender render_flow(const Model& model, std::span<const Observation> frames,
                       const CameraMatrix& camera, double time, const RenderOptions& options);

/// Middlebury-style color wheel: hue from direction, saturation from the
/// magnitude relative to the 95th percentile of valid magnitudes. Zero flow
/// and invalid pixels are white.
Image flow_to_color(std::span<const Vec2> flow, int width, int height, const Mask* valid = nullptr);

}  // namespace flowibr
