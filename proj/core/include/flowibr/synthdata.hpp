#pragma once

// Synthetic dynamic scenes with analytic ground truth.
//
// Scenes are collections of opaque textured primitives, each moved rigidly
// (pure translation) by a motion program. Frames are 1..T at constant dt; a
// motion program's offset is zero at frame 1.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "flowibr/geometry.hpp"
#include "flowibr/image.hpp"

namespace flowibr {

struct TextureSpec {
  enum class Kind { kSinusoid, kChecker, kFlat };
  Kind kind = Kind::kSinusoid;
  Vec3 color_a{0.15, 0.25, 0.55};
  Vec3 color_b{0.9, 0.75, 0.35};
  double period = 0.5;    // world units, fine component
  double period2 = 1.4;   // world units, coarse component
  double phase = 0.0;

  /// Color at in-surface coordinates (u, v), in [0,1].
  [[nodiscard]] Vec3 color(double u, double v) const;
};

struct MotionProgram {
  enum class Kind { kStatic, kConstantVelocity, kOrbit, kWaypoints };
  Kind kind = Kind::kStatic;
  Vec3 velocity = Vec3::Zero();  // world units per time unit
  double radius = 0.0;           // orbit in the world xy plane
  double angular_speed = 0.0;    // radians per time unit
  double phase = 0.0;
  std::vector<std::pair<double, Vec3>> waypoints;  // (frame, offset), ascending frames

  /// Translation applied to the rest geometry at `frame` (offset(1) = 0).
  [[nodiscard]] Vec3 offset(double frame, double dt) const;
  [[nodiscard]] bool is_static() const { return kind == Kind::kStatic; }
};

struct Primitive {
  enum class Shape { kRectangle, kSphere };
  Shape shape = Shape::kRectangle;
  Vec3 center = Vec3::Zero();  // rest pose
  Vec3 axis_u = Vec3::UnitX();
  Vec3 axis_v = Vec3::UnitY();
  double half_u = 1.0;
  double half_v = 1.0;
  double radius = 0.5;
  TextureSpec texture;
  MotionProgram motion;

  [[nodiscard]] bool is_dynamic() const { return !motion.is_static(); }
};

struct SceneSpec {
  std::string name = "custom";
  int width = 96;
  int height = 54;
  int num_frames = 12;
  double dt = 1.0;
  double near = 1.5;
  double far = 5.5;
  Vec3 background{0.5, 0.5, 0.5};
  std::vector<Primitive> primitives;
  std::vector<CameraMatrix> cameras;          // one per frame, index t-1
  std::vector<CameraMatrix> heldout_cameras;  // evaluation views, any frame
  int mask_dilation = 3;
  std::uint64_t seed = 0;

  [[nodiscard]] const CameraMatrix& camera(int frame) const { return cameras.at(frame - 1); }
};

/// Presets: "plane-slide", "sphere-orbit", "two-objects". Throws on unknown
/// names or frames < 2.
SceneSpec make_scene(std::string_view name, int frames = 12, int width = 96, int height = 54,
                     double dt = 1.0, std::uint64_t seed = 0);

/// T cameras on a circle of `radius` in the z = 0 plane, all looking at `target`.
std::vector<CameraMatrix> circular_rig(int count, double radius, const Vec3& target, int width,
                                       int height, double focal);

struct Hit {
  double distance = 0.0;
  int primitive = -1;
  Vec3 point = Vec3::Zero();
  Vec3 color = Vec3::Zero();
};

/// Nearest opaque hit at `frame`.
std::optional<Hit> trace(const SceneSpec& spec, const Vec3& origin, const Vec3& direction,
                         double frame);

struct Observation {
  Image image;
  CameraMatrix camera;
  int t = 0;
};

struct RenderedView {
  Observation observation;
  std::vector<double> depth;  // camera-frame z per pixel, NaN on miss
  std::vector<int> hit;       // primitive index per pixel, -1 on miss
};

RenderedView render_view(const SceneSpec& spec, const CameraMatrix& camera, int frame);
RenderedView render_frame(const SceneSpec& spec, int frame);

/// Index of the primitive whose surface contains p at `frame`, if any.
std::optional<int> surface_primitive(const SceneSpec& spec, const Vec3& p, double frame);

/// (s_f, s_b) for a point on a dynamic primitive; zero elsewhere.
std::pair<Vec3, Vec3> ground_truth_scene_flow(const SceneSpec& spec, const Vec3& p, int frame);

/// Pixel displacement from `pixel` in frame t_target to the same surface point
/// seen in frame t_source. nullopt when the pixel misses, the point leaves the
/// source image or is occluded there.
std::optional<Vec2> ground_truth_optical_flow(const SceneSpec& spec, int t_target, int t_source,
                                              Pixel pixel);
std::optional<Vec2> ground_truth_optical_flow(const SceneSpec& spec, const CameraMatrix& target,
                                              int t_target, int t_source, Pixel pixel);

/// 1 where the nearest hit is a dynamic primitive, dilated by a disk of
/// radius `dilation` (negative: use spec.mask_dilation).
Mask motion_mask(const SceneSpec& spec, int frame, int dilation = -1);
Mask motion_mask(const SceneSpec& spec, const CameraMatrix& camera, int frame, int dilation);
Mask dilate(const Mask& mask, int radius);

/// Everything the trainer consumes, as written to disk.
struct Dataset {
  SceneSpec spec;
  int flow_window = 5;
  std::vector<Observation> frames;
  std::vector<std::vector<double>> depth;
  std::vector<Mask> masks;
  /// Per frame: [offset slot][y][x][2], slots for offsets -w..-1, 1..w; NaN = invalid.
  std::vector<std::vector<double>> flows;
  std::vector<Observation> heldout;  // heldout camera 0 at every frame
  std::vector<Mask> heldout_masks;

  [[nodiscard]] int num_frames() const { return static_cast<int>(frames.size()); }
  [[nodiscard]] const Observation& frame(int t) const { return frames.at(t - 1); }
  [[nodiscard]] static int flow_slot(int offset, int window);
  [[nodiscard]] std::optional<Vec2> flow(int t_target, int t_source, int x, int y) const;
};

Dataset generate_dataset(const SceneSpec& spec, int flow_window = 5);
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

/// Manifest (de)serialization of the scene description, exposed for tools.
std::string scene_to_json(const SceneSpec& spec, int flow_window);
SceneSpec scene_from_json(const std::string& text, int* flow_window = nullptr);

}  // namespace flowibr
