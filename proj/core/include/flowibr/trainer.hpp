#pragma once

// Per-scene optimization: coarse-to-fine image levels, a growing source set,
// mask-boosted ray sampling, and Adam on the flow field and the backbone.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "flowibr/losses.hpp"
#include "flowibr/model.hpp"
#include "flowibr/synthdata.hpp"

namespace flowibr {

/// (first step, value) pairs, ascending by step and starting at 0.
using Schedule = std::vector<std::pair<std::int64_t, int>>;

struct TrainConfig {
  std::int64_t total_steps = 8000;
  int rays_per_step = 512;
  int samples_per_ray = 16;
  Schedule source_schedule;     // empty: 2, 4, 6, 10 at fifths of total_steps
  Schedule subsample_schedule;  // empty: 12, 10, 8, 6 at quarters of total_steps
  double mask_boost = 5.0;
  double lr_flow = 1e-3;
  double lr_backbone = 1e-5;
  std::int64_t lr_halving_period = 2000;
  LossWeights weights{};
  std::uint64_t seed = 0;
  bool finetune_backbone = true;
  bool of_updates_backbone = true;
  bool jitter_samples = true;
  std::int64_t checkpoint_every = 1000;  // 0 disables intermediate checkpoints
  int chunk_rays = 16;
  ModelConfig model{};

  /// Fills empty schedules from total_steps, then checks every invariant.
  /// Throws std::invalid_argument naming the offending field.
  void finalize();
  [[nodiscard]] int sources_at(std::int64_t step) const;
  [[nodiscard]] int subsample_at(std::int64_t step) const;
  [[nodiscard]] double lr_flow_at(std::int64_t step) const;
  [[nodiscard]] double lr_backbone_at(std::int64_t step) const;
};

[[nodiscard]] Schedule default_source_schedule(std::int64_t total_steps);
[[nodiscard]] Schedule default_subsample_schedule(std::int64_t total_steps);

/// JSON with any subset of TrainConfig's fields; missing ones keep defaults.
/// The result is finalized.
TrainConfig train_config_from_json(const std::string& text);
std::string train_config_to_json(const TrainConfig& config);
TrainConfig load_train_config(const std::filesystem::path& path);

/// The dataset at one subsampling factor.
struct Level {
  int factor = 1;
  int width = 0;
  int height = 0;
  int window = 0;
  std::vector<Observation> frames;            // subsampled images and cameras
  std::vector<Mask> masks;
  std::vector<std::vector<double>> flows;     // same layout as Dataset::flows, in level pixels

  [[nodiscard]] std::optional<Vec2> flow(int t_target, int t_source, int x, int y) const;
};

/// Area-averaged images, flows averaged over valid fine pixels and divided by
/// the factor, masks set where any fine pixel is set.
Level build_level(const Dataset& dataset, int factor);

struct RayBatch {
  int target = 0;
  std::vector<int> sources;
  std::vector<Pixel> pixels;
  diff::Matrix colors;                 // R x 3
  std::vector<diff::Matrix> gt_flows;  // per source, R x 2, NaN when unknown
  std::vector<std::uint8_t> masked;    // per ray: mask value at the pixel
};

/// Pixels drawn without replacement with mask_boost times the weight on
/// masked pixels; all pixels when the batch exceeds the image.
std::vector<Pixel> sample_pixels(const Mask& mask, int count, double mask_boost, std::mt19937_64& rng);

/// One target frame per step; batch size floor(rays_per_step / sources).
RayBatch sample_ray_batch(const Level& level, const TrainConfig& config, std::int64_t step,
                          std::mt19937_64& rng);

struct StepStats {
  std::int64_t step = 0;
  LossComponents components;
  double total = 0.0;
  int factor = 0;
  int sources = 0;
  int rays = 0;
  int valid_rays = 0;     // rays with at least one renderable sample
  int valid_samples = 0;  // samples seen by two or more sources
  double lr_flow = 0.0;
  double lr_backbone = 0.0;
  double alpha_of = 0.0;
  double mean_flow_masked = 0.0;  // ray-weighted mean |s_f| over masked rays
};

/// Per-term factors that turn the summed losses of a batch into means: one
/// over the number of color channels, flow coordinates, or flow components
/// (per sample, per neighbor pair) the batch nominally holds. Logged loss
/// components are these means.
[[nodiscard]] LossComponents loss_normalizers(int rays, int samples_per_ray, int sources);

/// Random engine for a step, independent of everything that ran before.
[[nodiscard]] std::mt19937_64 step_rng(std::uint64_t seed, std::int64_t step);

/// Forward, backward and the optimizer updates for one batch. Throws
/// std::runtime_error naming the offending ray when the loss is not finite.
StepStats train_step(Model& model, const Level& level, const TrainConfig& config, std::int64_t step,
                     const RayBatch& batch, std::mt19937_64& rng);

/// Loss and its parameter gradients for a batch without updating anything.
/// Gradients land in the stores' grad fields (zeroed first).
StepStats evaluate_batch(Model& model, const Level& level, const TrainConfig& config,
                         std::int64_t step, const RayBatch& batch, std::mt19937_64& rng);

struct RunOptions {
  std::filesystem::path out_dir;              // empty: no files written
  std::optional<std::filesystem::path> resume;
  std::optional<std::int64_t> stop_after;     // stop once this many steps are done
  std::function<void(const StepStats&)> on_step;
};

struct RunResult {
  std::int64_t steps_done = 0;
  std::vector<StepStats> log;  // steps run in this call
};

/// Runs steps from 0 (or the resumed step) to total_steps. With an out_dir,
/// writes metrics.csv, ckpt_<step>.bin every checkpoint_every steps and
/// final.bin at the end.
RunResult run_schedule(Model& model, const TrainConfig& config, const Dataset& dataset,
                       const RunOptions& options = {});

[[nodiscard]] std::string metrics_csv_header();
[[nodiscard]] std::string metrics_csv_row(const StepStats& s);

}  // namespace flowibr
