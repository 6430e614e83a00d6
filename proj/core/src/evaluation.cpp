#include "flowibr/evaluation.hpp"

#include <algorithm>
#include <stdexcept>

namespace flowibr {

FlowRecovery evaluate_flow_recovery(const FlowField& field, const SceneSpec& scene,
                                    const std::vector<int>& frames, int dilation) {
  std::vector<double> epe;
  double outside = 0.0;
  double gt_sum = 0.0;
  std::size_t gt_count = 0;
  FlowRecovery r;
  for (int t : frames) {
    if (t < 1 || t > scene.num_frames) throw std::out_of_range("evaluate_flow_recovery: frame outside sequence");
    const CameraMatrix& cam = scene.camera(t);
    const Mask mask = motion_mask(scene, t, dilation);
    for (int y = 0; y < cam.height(); ++y) {
      for (int x = 0; x < cam.width(); ++x) {
        const Ray ray = cast_ray(cam, {x, y}, t);
        const auto hit = trace(scene, ray.origin, ray.direction, t);
        if (!hit) continue;
        const Vec3 sf = field.eval(hit->point, t).forward;
        const Vec3 gt = ground_truth_scene_flow(scene, hit->point, t).first;
        if (mask.at(x, y)) {
          epe.push_back((sf - gt).norm());
          if (scene.primitives[hit->primitive].is_dynamic()) {
            gt_sum += gt.norm();
            ++gt_count;
          }
        } else {
          outside += sf.norm();
          ++r.unmasked_points;
        }
      }
    }
  }
  r.masked_points = epe.size();
  if (!epe.empty()) {
    const auto mid = epe.begin() + static_cast<std::ptrdiff_t>(epe.size() / 2);
    std::nth_element(epe.begin(), mid, epe.end());
    double m = *mid;
    if (epe.size() % 2 == 0) m = 0.5 * (m + *std::max_element(epe.begin(), mid));
    r.median_epe_masked = m;
  }
  r.mean_norm_unmasked = r.unmasked_points ? outside / r.unmasked_points : 0.0;
  r.mean_gt_displacement = gt_count ? gt_sum / gt_count : 0.0;
  return r;
}

}  // namespace flowibr
