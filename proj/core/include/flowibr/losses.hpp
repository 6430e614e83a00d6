#pragma once

// Training objectives. Each loss exists twice: a tape version used by the
// trainer and by gradient checks, and a plain value version that evaluates a
// FlowField or a BackboneOutput directly.
//
// Flow matrices are n x 6 with the forward flow in columns 0..2 and the
// backward flow in columns 3..5, matching FlowField::eval_batch.

#include <cstdint>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "flowibr/backbone.hpp"
#include "flowibr/diffcore.hpp"
#include "flowibr/flowfield.hpp"

namespace flowibr {

struct LossWeights {
  double alpha_of = 0.005;
  double alpha_cyc = 0.02;
  double alpha_slow = 0.01;
  double alpha_spat = 0.05;
  double alpha_temp = 0.1;
  double alpha_reg = 1.0;
  int anneal_steps = 4000;

  /// alpha_of * max(0, 1 - step / k); exactly 0 from step k on.
  [[nodiscard]] double alpha_of_at(std::int64_t step) const;
  void validate() const;
};

struct LossComponents {
  double rgb = 0.0;
  double of = 0.0;
  double cyc = 0.0;
  double temp = 0.0;
  double slow = 0.0;
  double spat = 0.0;
};

/// rgb + a_of(step) of + a_cyc cyc + a_reg (a_temp temp + a_slow slow + a_spat spat).
[[nodiscard]] double total_loss(const LossComponents& c, const LossWeights& w, std::int64_t step);

struct LossVars {
  diff::Var rgb, of, cyc, temp, slow, spat;
};

/// Tape version of total_loss. Invalid Vars count as zero.
diff::Var total_loss(diff::Tape& tape, const LossVars& c, const LossWeights& w, std::int64_t step);

// --- photometric ---------------------------------------------------------

/// Sum over rows and channels of (pred - truth)^2. Rows with mask 0 are skipped.
diff::Var loss_rgb(diff::Tape& tape, diff::Var pred, const diff::Matrix& truth,
                   std::span<const std::uint8_t> row_mask = {});
[[nodiscard]] double loss_rgb(std::span<const Vec3> pred, std::span<const Vec3> truth);

// --- optical flow ----------------------------------------------------------

/// Per-ray weighted displacement sum_n a_n (uv_n - pixel), with the weights
/// renormalized over samples whose projection exists (`usable`). R x 2.
/// `defined` receives 0 for rays where no weight falls on a usable sample.
diff::Var weighted_displacement(diff::Tape& tape, diff::Var weights, diff::Var uv,
                                const diff::Matrix& pixels, int samples_per_ray,
                                std::span<const std::uint8_t> usable,
                                std::vector<std::uint8_t>* defined);

/// sum_s sum_r |gt_s(r) - d_s(r)|_1. gt[s] is R x 2 with NaN where no ground
/// truth exists; such rows, and rays flagged in `ray_mask` as 0, are skipped.
diff::Var loss_optical_flow(diff::Tape& tape, const RayRender& render, const diff::Matrix& pixels,
                            std::span<const diff::Matrix> gt,
                            std::span<const std::uint8_t> ray_mask = {});

/// Single-pixel version. Sources without an entry in `gt_flow` are skipped.
[[nodiscard]] double loss_optical_flow(const BackboneOutput& output, const Vec2& target_pixel,
                                       const std::map<int, Vec2>& gt_flow);

// --- scene-flow regularizers -------------------------------------------

/// sum |S_b(p,t) + S_f(p_{t->t-1}, t-1)|_1 + |S_b(p_{t->t+1}, t+1) + S_f(p,t)|_1.
/// `prev` holds the flows at p + S_b(p,t) and frame t-1, `next` those at
/// p + S_f(p,t) and frame t+1. An invalid Var drops that half.
diff::Var loss_cycle(diff::Tape& tape, diff::Var base, diff::Var prev, diff::Var next);
/// Evaluates the needed flows with the field; halves that leave [1, T] are dropped.
diff::Var loss_cycle(diff::Tape& tape, const FlowField& field, const FlowField::Bound& bound,
                     diff::Var points, double frame);
[[nodiscard]] double loss_cycle(const FlowField& field,
                                std::span<const std::pair<Vec3, double>> points);

/// sum |S_f + S_b|^2.
diff::Var loss_temporal(diff::Tape& tape, diff::Var flow);
[[nodiscard]] double loss_temporal(const FlowField& field,
                                   std::span<const std::pair<Vec3, double>> points);

/// sum |S_f|_1 + |S_b|_1.
diff::Var loss_slow(diff::Tape& tape, diff::Var flow);
[[nodiscard]] double loss_slow(const FlowField& field,
                               std::span<const std::pair<Vec3, double>> points);

/// exp(-2 |a - b|^2).
[[nodiscard]] double spatial_weight(const Vec3& a, const Vec3& b);

/// neighbors[i] lists indices j paired with i. Each (i, j) pair contributes
/// (|S_f(i) - S_f(j)|_1 + |S_b(i) - S_b(j)|_1) * w(p_i, p_j).
using NeighborList = std::vector<std::vector<int>>;

/// Previous and next sample on the same ray, clamped at the ends.
[[nodiscard]] NeighborList along_ray_neighbors(int rays, int samples_per_ray);

diff::Var loss_spatial(diff::Tape& tape, diff::Var flow, const diff::Matrix& points,
                       const NeighborList& neighbors);
/// All points share one time; the field is evaluated at each of them.
[[nodiscard]] double loss_spatial(const FlowField& field, std::span<const Vec3> points, double frame,
                                  const NeighborList& neighbors);

}  // namespace flowibr
