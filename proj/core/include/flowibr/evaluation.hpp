#pragma once

// Scene-flow recovery against analytic ground truth.

#include <vector>

#include "flowibr/flowfield.hpp"
#include "flowibr/synthdata.hpp"

namespace flowibr {

struct FlowRecovery {
  double median_epe_masked = 0.0;   // |s_f - s_f_gt| over masked pixels' surface points
  double mean_norm_unmasked = 0.0;  // |s_f| over the remaining surface points
  double mean_gt_displacement = 0.0;  // mean |s_f_gt| over masked points on moving surfaces
  std::size_t masked_points = 0;
  std::size_t unmasked_points = 0;
};

/// Evaluates the forward flow at the surface point under every pixel of the
/// training camera of each frame in `frames`, split by that frame's motion mask.
FlowRecovery evaluate_flow_recovery(const FlowField& field, const SceneSpec& scene,
                                    const std::vector<int>& frames, int dilation = -1);

}  // namespace flowibr
