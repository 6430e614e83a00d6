#pragma once

// Scene-flow field: a dual-head MLP mapping an encoded position and a time to
// a forward and a backward 3-D flow vector, plus the machinery that walks
// points across several frames with it.
//
// Times are expressed in frame units: frame t of a T-frame sequence is the
// real number t, frames are 1..T. The MLP sees time normalized to [0, 1].

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "flowibr/diffcore.hpp"
#include "flowibr/geometry.hpp"

namespace flowibr {

struct EncodingConfig {
  int frequencies = 10;
  bool encode_time = false;  // time always passes through unencoded
};

/// 3 * (2L + 1) + 1.
[[nodiscard]] int encoded_size(const EncodingConfig& cfg);

/// (p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^{L-1} pi p), cos(2^{L-1} pi p), t).
/// Each sin/cos block holds the three spatial components in x, y, z order.
Eigen::VectorXd encode(const Vec3& p, double t, const EncodingConfig& cfg);

/// Batched encoding of n x 3 points on the tape; differentiable w.r.t. points.
diff::Var encode(diff::Tape& tape, diff::Var points, double t, const EncodingConfig& cfg);

enum class Direction { kForward, kBackward };

struct FlowFieldConfig {
  int depth = 4;
  int width = 64;
  int skip_layer = 2;  // layer index that also receives the encoded input
  EncodingConfig encoding{};
  int num_frames = 2;
  int window = 5;  // max |t_to - t_from| accepted by compose_flow
};

struct FlowPair {
  Vec3 forward = Vec3::Zero();
  Vec3 backward = Vec3::Zero();
};

class FlowField {
 public:
  struct Bound {
    std::vector<diff::Var> weights;
    std::vector<diff::Var> biases;
  };

  /// Hidden layers get He-uniform weights from `seed`; the output layer starts
  /// at zero so the initial field is the all-static motion.
  explicit FlowField(FlowFieldConfig config, std::uint64_t seed = 0);

  [[nodiscard]] const FlowFieldConfig& config() const { return config_; }
  [[nodiscard]] diff::ParamStore& params() { return params_; }
  [[nodiscard]] const diff::ParamStore& params() const { return params_; }

  [[nodiscard]] double normalized_time(double frame) const;
  [[nodiscard]] int input_size() const { return encoded_size(config_.encoding); }

  [[nodiscard]] FlowPair eval(const Vec3& p, double frame) const;
  /// n x 3 points -> n x 6 (forward xyz, backward xyz).
  [[nodiscard]] diff::Matrix eval_batch(const diff::Matrix& points, double frame) const;

  Bound bind(diff::Tape& tape) const;
  diff::Var eval(diff::Tape& tape, const Bound& bound, diff::Var points, double frame) const;

  /// Makes the field output (forward, backward) everywhere.
  void set_constant(const Vec3& forward, const Vec3& backward);

 private:
  FlowFieldConfig config_;
  diff::ParamStore params_;
  std::vector<std::size_t> weight_ids_;
  std::vector<std::size_t> bias_ids_;
};

[[nodiscard]] FlowPair eval_flow(const FlowField& field, const Vec3& p, double frame);

/// p + S_f(p, t) or p + S_b(p, t).
[[nodiscard]] Vec3 displace(const FlowField& field, const Vec3& p, double frame, Direction dir);

struct TimeNeighbors {
  int backward_frame = 0;  // floor(t / dt)
  int forward_frame = 0;   // ceil(t / dt)
  double delta_b = 0.0;    // t / dt - floor
  double delta_f = 0.0;    // ceil - t / dt
};

[[nodiscard]] TimeNeighbors time_neighbors(double t, double dt);

/// Displacement that carries p from time t to the neighbouring observation
/// in `dir`, i.e. delta * S(p, t / dt).
[[nodiscard]] Vec3 continuous_time_step(const FlowField& field, const Vec3& p, double t, double dt,
                                        Direction dir);

/// Position of p (observed at t_from) carried to integer frame t_to by
/// stepping one frame at a time. A non-integer t_from first takes the scaled
/// partial step to its neighbour in the direction of t_to.
[[nodiscard]] Vec3 bend_point(const FlowField& field, const Vec3& p, double t_from, int t_to);

/// bend_point(...) - p. Zero when t_from == t_to.
[[nodiscard]] Vec3 compose_flow(const FlowField& field, const Vec3& p, double t_from, int t_to);

/// Tape version of bend_point for a batch of points and several targets at once.
struct BentSamples {
  std::map<int, diff::Var> positions;  // target frame -> n x 3
  diff::Var base_flow;                 // n x 6 flows at (points, t_from)
  std::map<int, diff::Var> chain_flow;  // n x 6 flows evaluated at intermediate frames
};

BentSamples bend_samples(diff::Tape& tape, const FlowField& field, const FlowField::Bound& bound,
                         diff::Var points, double t_from, std::span<const int> targets);

}  // namespace flowibr
