#include "flowibr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "flowibr/parallel.hpp"

namespace flowibr {

using diff::Matrix;
using diff::Tape;
using diff::Var;
using nlohmann::json;

// --- configuration ---------------------------------------------------------

namespace {

Schedule fractions(std::int64_t total, const std::vector<std::pair<int, int>>& parts, int denom) {
  Schedule s;
  for (const auto& [num, value] : parts) {
    const std::int64_t at = total * num / denom;
    if (!s.empty() && s.back().first == at) s.back().second = value;
    else s.emplace_back(at, value);
  }
  return s;
}

int schedule_at(const Schedule& s, std::int64_t step) {
  int v = s.front().second;
  for (const auto& [at, value] : s) {
    if (at <= step) v = value;
  }
  return v;
}

void check_schedule(const Schedule& s, const char* name) {
  if (s.empty() || s.front().first != 0) {
    throw std::invalid_argument(std::string(name) + ": schedule must start at step 0");
  }
  for (std::size_t i = 1; i < s.size(); ++i) {
    if (s[i].first <= s[i - 1].first) {
      throw std::invalid_argument(std::string(name) + ": schedule steps must be strictly ascending");
    }
  }
}

}  // namespace

Schedule default_source_schedule(std::int64_t total_steps) {
  return fractions(total_steps, {{0, 2}, {1, 4}, {2, 6}, {3, 10}}, 5);
}

Schedule default_subsample_schedule(std::int64_t total_steps) {
  return fractions(total_steps, {{0, 12}, {1, 10}, {2, 8}, {3, 6}}, 4);
}

void TrainConfig::finalize() {
  if (total_steps < 1) throw std::invalid_argument("total_steps must be >= 1");
  if (source_schedule.empty()) source_schedule = default_source_schedule(total_steps);
  if (subsample_schedule.empty()) subsample_schedule = default_subsample_schedule(total_steps);
  check_schedule(source_schedule, "source_schedule");
  check_schedule(subsample_schedule, "subsample_schedule");
  for (std::size_t i = 0; i < subsample_schedule.size(); ++i) {
    const int f = subsample_schedule[i].second;
    if (f < 6 || f % 2 != 0) throw std::invalid_argument("subsample_schedule: factors must be even and >= 6");
    if (i > 0 && f > subsample_schedule[i - 1].second) {
      throw std::invalid_argument("subsample_schedule: factor must never increase");
    }
  }
  for (std::size_t i = 0; i < source_schedule.size(); ++i) {
    const int k = source_schedule[i].second;
    if (k < 1) throw std::invalid_argument("source_schedule: source count must be >= 1");
    if (i > 0 && k < source_schedule[i - 1].second) {
      throw std::invalid_argument("source_schedule: source count must never decrease");
    }
  }
  if (rays_per_step < 1) throw std::invalid_argument("rays_per_step must be >= 1");
  if (samples_per_ray < 1) throw std::invalid_argument("samples_per_ray must be >= 1");
  if (!(mask_boost > 0.0) || !std::isfinite(mask_boost)) throw std::invalid_argument("mask_boost must be > 0");
  if (!(lr_flow >= 0.0) || !(lr_backbone >= 0.0)) throw std::invalid_argument("learning rates must be >= 0");
  if (lr_halving_period < 1) throw std::invalid_argument("lr_halving_period must be >= 1");
  if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
  if (chunk_rays < 1) throw std::invalid_argument("chunk_rays must be >= 1");
  if (model.flow.window < 1) throw std::invalid_argument("flow.window must be >= 1");
  weights.validate();
}

int TrainConfig::sources_at(std::int64_t step) const { return schedule_at(source_schedule, step); }
int TrainConfig::subsample_at(std::int64_t step) const { return schedule_at(subsample_schedule, step); }

double TrainConfig::lr_flow_at(std::int64_t step) const {
  return lr_flow * std::ldexp(1.0, -static_cast<int>(step / lr_halving_period));
}

double TrainConfig::lr_backbone_at(std::int64_t step) const {
  return lr_backbone * std::ldexp(1.0, -static_cast<int>(step / lr_halving_period));
}

namespace {

template <typename T>
void read_field(json& j, const char* key, T& dst) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  try {
    dst = it->get<T>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config field '") + key + "': " + e.what());
  }
  j.erase(it);
}

void read_schedule(json& j, const char* key, Schedule& dst) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  Schedule s;
  try {
    for (const auto& entry : *it) {
      if (!entry.is_array() || entry.size() != 2) throw std::invalid_argument("entries must be [step, value]");
      s.emplace_back(entry[0].get<std::int64_t>(), entry[1].get<int>());
    }
  } catch (const std::exception& e) {
    throw std::invalid_argument(std::string("config field '") + key + "': " + e.what());
  }
  dst = std::move(s);
  j.erase(it);
}

void reject_leftovers(const json& j, const std::string& where) {
  if (!j.empty()) {
    throw std::invalid_argument("unknown config field '" + j.begin().key() + "'" + where);
  }
}

}  // namespace

TrainConfig train_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  TrainConfig c;
  read_field(j, "total_steps", c.total_steps);
  read_field(j, "rays_per_step", c.rays_per_step);
  read_field(j, "samples_per_ray", c.samples_per_ray);
  read_schedule(j, "source_schedule", c.source_schedule);
  read_schedule(j, "subsample_schedule", c.subsample_schedule);
  read_field(j, "mask_boost", c.mask_boost);
  read_field(j, "lr_flow", c.lr_flow);
  read_field(j, "lr_backbone", c.lr_backbone);
  read_field(j, "lr_halving_period", c.lr_halving_period);
  read_field(j, "seed", c.seed);
  read_field(j, "finetune_backbone", c.finetune_backbone);
  read_field(j, "of_updates_backbone", c.of_updates_backbone);
  read_field(j, "jitter_samples", c.jitter_samples);
  read_field(j, "checkpoint_every", c.checkpoint_every);
  read_field(j, "chunk_rays", c.chunk_rays);
  read_field(j, "alpha_of", c.weights.alpha_of);
  read_field(j, "alpha_cyc", c.weights.alpha_cyc);
  read_field(j, "alpha_slow", c.weights.alpha_slow);
  read_field(j, "alpha_spat", c.weights.alpha_spat);
  read_field(j, "alpha_temp", c.weights.alpha_temp);
  read_field(j, "alpha_reg", c.weights.alpha_reg);
  read_field(j, "anneal_steps", c.weights.anneal_steps);
  if (auto it = j.find("flow"); it != j.end()) {
    json f = *it;
    read_field(f, "depth", c.model.flow.depth);
    read_field(f, "width", c.model.flow.width);
    read_field(f, "skip_layer", c.model.flow.skip_layer);
    read_field(f, "frequencies", c.model.flow.encoding.frequencies);
    read_field(f, "window", c.model.flow.window);
    reject_leftovers(f, " in 'flow'");
    j.erase(it);
  }
  if (auto it = j.find("ibr"); it != j.end()) {
    json b = *it;
    read_field(b, "gamma", c.model.ibr.gamma);
    read_field(b, "hidden", c.model.ibr.hidden);
    read_field(b, "prior_sharpness", c.model.ibr.prior_sharpness);
    read_field(b, "near", c.model.ibr.near);
    read_field(b, "far", c.model.ibr.far);
    reject_leftovers(b, " in 'ibr'");
    j.erase(it);
  }
  reject_leftovers(j, "");
  c.finalize();
  return c;
}

std::string train_config_to_json(const TrainConfig& c) {
  auto sched = [](const Schedule& s) {
    json a = json::array();
    for (const auto& [at, v] : s) a.push_back({at, v});
    return a;
  };
  json j = {
      {"total_steps", c.total_steps},
      {"rays_per_step", c.rays_per_step},
      {"samples_per_ray", c.samples_per_ray},
      {"source_schedule", sched(c.source_schedule)},
      {"subsample_schedule", sched(c.subsample_schedule)},
      {"mask_boost", c.mask_boost},
      {"lr_flow", c.lr_flow},
      {"lr_backbone", c.lr_backbone},
      {"lr_halving_period", c.lr_halving_period},
      {"seed", c.seed},
      {"finetune_backbone", c.finetune_backbone},
      {"of_updates_backbone", c.of_updates_backbone},
      {"jitter_samples", c.jitter_samples},
      {"checkpoint_every", c.checkpoint_every},
      {"chunk_rays", c.chunk_rays},
      {"alpha_of", c.weights.alpha_of},
      {"alpha_cyc", c.weights.alpha_cyc},
      {"alpha_slow", c.weights.alpha_slow},
      {"alpha_spat", c.weights.alpha_spat},
      {"alpha_temp", c.weights.alpha_temp},
      {"alpha_reg", c.weights.alpha_reg},
      {"anneal_steps", c.weights.anneal_steps},
      {"flow",
       {{"depth", c.model.flow.depth},
        {"width", c.model.flow.width},
        {"skip_layer", c.model.flow.skip_layer},
        {"frequencies", c.model.flow.encoding.frequencies},
        {"window", c.model.flow.window}}},
      {"ibr",
       {{"gamma", c.model.ibr.gamma},
        {"hidden", c.model.ibr.hidden},
        {"prior_sharpness", c.model.ibr.prior_sharpness},
        {"near", c.model.ibr.near},
        {"far", c.model.ibr.far}}},
  };
  return j.dump(2);
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return train_config_from_json(ss.str());
}

// --- levels ------------------------------------------------------------------

std::optional<Vec2> Level::flow(int t_target, int t_source, int x, int y) const {
  const int slot = Dataset::flow_slot(t_source - t_target, window);
  if (slot < 0) return std::nullopt;
  const auto& f = flows.at(t_target - 1);
  const std::size_t k = ((static_cast<std::size_t>(slot) * height + y) * width + x) * 2;
  if (std::isnan(f[k]) || std::isnan(f[k + 1])) return std::nullopt;
  return Vec2(f[k], f[k + 1]);
}

Level build_level(const Dataset& dataset, int factor) {
  if (factor < 1) throw std::invalid_argument("build_level: factor must be >= 1");
  const int fw = dataset.spec.width;
  const int fh = dataset.spec.height;
  Level lv;
  lv.factor = factor;
  lv.width = fw / factor;
  lv.height = fh / factor;
  lv.window = dataset.flow_window;
  if (lv.width < 1 || lv.height < 1) throw std::invalid_argument("build_level: factor larger than the image");
  const int slots = 2 * lv.window;
  const double inv_area = 1.0 / (factor * factor);
  for (int t = 1; t <= dataset.num_frames(); ++t) {
    const Observation& o = dataset.frame(t);
    Observation s;
    s.t = t;
    s.camera = o.camera.subsampled(factor);
    s.image = Image(lv.width, lv.height, o.image.channels);
    Mask m(lv.width, lv.height);
    std::vector<double> flow(static_cast<std::size_t>(slots) * lv.width * lv.height * 2,
                             std::numeric_limits<double>::quiet_NaN());
    const auto& fine_flow = dataset.flows.at(t - 1);
    for (int y = 0; y < lv.height; ++y) {
      for (int x = 0; x < lv.width; ++x) {
        for (int c = 0; c < o.image.channels; ++c) {
          double acc = 0.0;
          for (int dy = 0; dy < factor; ++dy)
            for (int dx = 0; dx < factor; ++dx) acc += o.image.at(x * factor + dx, y * factor + dy, c);
          s.image.at(x, y, c) = static_cast<float>(acc * inv_area);
        }
        bool any = false;
        for (int dy = 0; dy < factor && !any; ++dy)
          for (int dx = 0; dx < factor && !any; ++dx)
            any = dataset.masks.at(t - 1).at(x * factor + dx, y * factor + dy) != 0;
        m.at(x, y) = any ? 1 : 0;
        for (int slot = 0; slot < slots; ++slot) {
          Vec2 acc = Vec2::Zero();
          int n = 0;
          for (int dy = 0; dy < factor; ++dy) {
            for (int dx = 0; dx < factor; ++dx) {
              const std::size_t k =
                  ((static_cast<std::size_t>(slot) * fh + y * factor + dy) * fw + x * factor + dx) * 2;
              if (std::isnan(fine_flow[k]) || std::isnan(fine_flow[k + 1])) continue;
              acc += Vec2(fine_flow[k], fine_flow[k + 1]);
              ++n;
            }
          }
          if (n == 0) continue;
          acc /= static_cast<double>(n) * factor;
          const std::size_t k = ((static_cast<std::size_t>(slot) * lv.height + y) * lv.width + x) * 2;
          flow[k] = acc.x();
          flow[k + 1] = acc.y();
        }
      }
    }
    lv.frames.push_back(std::move(s));
    lv.masks.push_back(std::move(m));
    lv.flows.push_back(std::move(flow));
  }
  return lv;
}

// --- sampling ------------------------------------------------------------------

std::vector<Pixel> sample_pixels(const Mask& mask, int count, double mask_boost, std::mt19937_64& rng) {
  if (count < 0) throw std::invalid_argument("sample_pixels: negative count");
  if (!(mask_boost > 0.0)) throw std::invalid_argument("sample_pixels: mask_boost must be > 0");
  const std::size_t total = mask.data.size();
  // Weighted sampling without replacement: keep the largest log(u) / w.
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<std::pair<double, std::size_t>> keys(total);
  for (std::size_t i = 0; i < total; ++i) {
    const double u = 1.0 - uni(rng);  // (0, 1]
    const double w = mask.data[i] ? mask_boost : 1.0;
    keys[i] = {std::log(u) / w, i};
  }
  const std::size_t k = std::min(total, static_cast<std::size_t>(count));
  std::partial_sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(k), keys.end(),
                    [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
  std::vector<Pixel> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    const auto idx = keys[i].second;
    out.push_back({static_cast<int>(idx % mask.width), static_cast<int>(idx / mask.width)});
  }
  return out;
}

RayBatch sample_ray_batch(const Level& level, const TrainConfig& config, std::int64_t step,
                          std::mt19937_64& rng) {
  const int t_count = static_cast<int>(level.frames.size());
  if (t_count < 2) throw std::invalid_argument("sample_ray_batch: need at least two frames");
  RayBatch b;
  b.target = std::uniform_int_distribution<int>(1, t_count)(rng);
  for (int s : select_sources(b.target, config.sources_at(step), t_count)) {
    if (std::abs(s - b.target) <= config.model.flow.window) b.sources.push_back(s);
  }
  const int per_view = std::max(1, config.rays_per_step / static_cast<int>(b.sources.size()));
  const Mask& mask = level.masks.at(b.target - 1);
  b.pixels = sample_pixels(mask, per_view, config.mask_boost, rng);
  const auto r = static_cast<Eigen::Index>(b.pixels.size());
  const Image& img = level.frames.at(b.target - 1).image;
  b.colors.resize(r, 3);
  b.masked.resize(r);
  for (Eigen::Index i = 0; i < r; ++i) {
    const Pixel p = b.pixels[i];
    for (int c = 0; c < 3; ++c) b.colors(i, c) = img.at(p.x, p.y, c);
    b.masked[i] = mask.at(p.x, p.y);
  }
  for (int s : b.sources) {
    Matrix gt(r, 2);
    for (Eigen::Index i = 0; i < r; ++i) {
      const auto o = level.flow(b.target, s, b.pixels[i].x, b.pixels[i].y);
      gt(i, 0) = o ? o->x() : std::numeric_limits<double>::quiet_NaN();
      gt(i, 1) = o ? o->y() : std::numeric_limits<double>::quiet_NaN();
    }
    b.gt_flows.push_back(std::move(gt));
  }
  return b;
}

std::mt19937_64 step_rng(std::uint64_t seed, std::int64_t step) {
  const auto s = static_cast<std::uint64_t>(step);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32), 0x464942u};
  return std::mt19937_64(seq);
}

// --- one step ------------------------------------------------------------------

namespace {

struct ChunkOut {
  diff::GradBuffer flow_grad;
  diff::GradBuffer ibr_grad;
  LossComponents parts;
  double flow_mass = 0.0;
  int flow_rays = 0;
  int valid_rays = 0;
  int valid_samples = 0;
};

Matrix row_mask(const std::vector<std::uint8_t>& ray_valid, int samples, int cols) {
  Matrix m(static_cast<Eigen::Index>(ray_valid.size()) * samples, cols);
  for (Eigen::Index i = 0; i < m.rows(); ++i) m.row(i).setConstant(ray_valid[i / samples] ? 1.0 : 0.0);
  return m;
}

}  // namespace

LossComponents loss_normalizers(int rays, int samples_per_ray, int sources) {
  const double r = std::max(1, rays);
  const double rn = r * std::max(1, samples_per_ray);
  LossComponents c;
  c.rgb = 1.0 / (3.0 * r);
  c.of = 1.0 / (2.0 * r * std::max(1, sources));
  c.cyc = 1.0 / (6.0 * rn);
  c.temp = 1.0 / (3.0 * rn);
  c.slow = 1.0 / (6.0 * rn);
  c.spat = 1.0 / (12.0 * rn);
  return c;
}

namespace {

[[noreturn]] void non_finite(const RayBatch& batch, const CameraMatrix& camera, std::size_t first,
                             std::size_t count, const Matrix& color, std::int64_t step) {
  std::size_t bad = first;
  for (std::size_t r = 0; r < count; ++r) {
    if (!color.row(static_cast<Eigen::Index>(r)).allFinite()) {
      bad = first + r;
      break;
    }
  }
  const Pixel p = batch.pixels[bad];
  const Ray ray = cast_ray(camera, p, batch.target);
  std::ostringstream msg;
  msg.precision(17);
  msg << "non-finite loss at step " << step << ": target frame " << batch.target << ", pixel (" << p.x
      << ", " << p.y << "), origin (" << ray.origin.transpose() << "), direction ("
      << ray.direction.transpose() << "), sources";
  for (int s : batch.sources) msg << ' ' << s;
  throw std::runtime_error(msg.str());
}

}  // namespace

StepStats evaluate_batch(Model& model, const Level& level, const TrainConfig& config,
                         std::int64_t step, const RayBatch& batch, std::mt19937_64& rng) {
  const int n = config.samples_per_ray;
  const auto& ibr_cfg = model.ibr.config();
  const CameraMatrix& camera = level.frames.at(batch.target - 1).camera;
  const std::size_t rays = batch.pixels.size();
  const int t_count = model.flow.config().num_frames;
  const double t = batch.target;

  // Sample distances are drawn serially so the stream does not depend on threads.
  Matrix points(static_cast<Eigen::Index>(rays) * n, 3);
  Matrix dist(static_cast<Eigen::Index>(rays) * n, 1);
  for (std::size_t r = 0; r < rays; ++r) {
    const Ray ray = cast_ray(camera, batch.pixels[r], t);
    const RaySampleSet s =
        sample_along_ray(ray, ibr_cfg.near, ibr_cfg.far, n, config.jitter_samples ? &rng : nullptr);
    for (int k = 0; k < n; ++k) {
      const auto i = static_cast<Eigen::Index>(r) * n + k;
      points.row(i) = s.base_points[k].transpose();
      dist(i, 0) = s.distances[k];
    }
  }
  std::vector<SourceView> views;
  for (int s : batch.sources) {
    const Observation& o = level.frames.at(s - 1);
    views.push_back({&o.image, o.camera, s});
  }

  const std::size_t chunk = static_cast<std::size_t>(config.chunk_rays);
  const std::size_t chunks = (rays + chunk - 1) / chunk;
  std::vector<ChunkOut> outs(chunks);
  const double alpha_of = config.weights.alpha_of_at(step);
  const LossComponents scale = loss_normalizers(static_cast<int>(rays), n, static_cast<int>(batch.sources.size()));

  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t r0 = c * chunk;
    const std::size_t rc = std::min(rays, r0 + chunk) - r0;
    const auto rows = static_cast<Eigen::Index>(rc) * n;
    const Matrix pts_m = points.middleRows(static_cast<Eigen::Index>(r0) * n, rows);
    const Matrix dist_m = dist.middleRows(static_cast<Eigen::Index>(r0) * n, rows);

    Tape tape;
    const auto fb = model.flow.bind(tape);
    const auto ib = model.ibr.bind(tape);
    const Var pts = tape.constant(pts_m);
    const BentSamples bent = bend_samples(tape, model.flow, fb, pts, t, batch.sources);
    std::vector<Var> bent_vars;
    for (int s : batch.sources) bent_vars.push_back(bent.positions.at(s));
    RayRender render = render_rays_ibr(tape, model.ibr, ib, views, bent_vars, dist_m, n);

    LossVars lv;
    const Matrix truth = batch.colors.middleRows(static_cast<Eigen::Index>(r0), static_cast<Eigen::Index>(rc));
    lv.rgb = loss_rgb(tape, render.color, truth, render.ray_valid);

    if (alpha_of > 0.0) {
      Matrix pixels(static_cast<Eigen::Index>(rc), 2);
      for (std::size_t r = 0; r < rc; ++r) {
        pixels(static_cast<Eigen::Index>(r), 0) = batch.pixels[r0 + r].x;
        pixels(static_cast<Eigen::Index>(r), 1) = batch.pixels[r0 + r].y;
      }
      std::vector<Matrix> gt;
      for (const Matrix& g : batch.gt_flows) gt.push_back(g.middleRows(static_cast<Eigen::Index>(r0), static_cast<Eigen::Index>(rc)));
      RayRender of_render = render;
      // With the switch off the weights act as constants in the flow loss,
      // which keeps its gradient out of the backbone.
      if (!config.of_updates_backbone) of_render.weights = tape.detach(render.weights);
      lv.of = loss_optical_flow(tape, of_render, pixels, gt, render.ray_valid);
    }

    // Regularizers act on the base samples of renderable rays only.
    const Matrix keep6 = row_mask(render.ray_valid, n, 6);
    const Var base = tape.mul_const(bent.base_flow, keep6);
    auto neighbour_flow = [&](int frame, int head) -> Var {
      if (frame < 1 || frame > t_count) return Var{};
      if (const auto it = bent.chain_flow.find(frame); it != bent.chain_flow.end()) {
        return tape.mul_const(it->second, keep6);
      }
      Var pos;
      if (const auto it = bent.positions.find(frame); it != bent.positions.end()) pos = it->second;
      else pos = tape.add(pts, tape.slice_cols(bent.base_flow, head, 3));
      return tape.mul_const(model.flow.eval(tape, fb, pos, frame), keep6);
    };
    lv.cyc = loss_cycle(tape, base, neighbour_flow(batch.target - 1, 3), neighbour_flow(batch.target + 1, 0));
    lv.temp = loss_temporal(tape, base);
    lv.slow = loss_slow(tape, base);
    lv.spat = loss_spatial(tape, base, pts_m, along_ray_neighbors(static_cast<int>(rc), n));

    // Each term becomes a mean over its nominal element count for the whole
    // batch, so the weights keep their meaning as the batch shape changes.
    LossVars mean;
    mean.rgb = tape.scale(lv.rgb, scale.rgb);
    if (lv.of.valid()) mean.of = tape.scale(lv.of, scale.of);
    mean.cyc = tape.scale(lv.cyc, scale.cyc);
    mean.temp = tape.scale(lv.temp, scale.temp);
    mean.slow = tape.scale(lv.slow, scale.slow);
    mean.spat = tape.scale(lv.spat, scale.spat);
    lv = mean;
    const Var total = total_loss(tape, lv, config.weights, step);
    if (!std::isfinite(tape.scalar(total))) {
      non_finite(batch, camera, r0, rc, tape.value(render.color), step);
    }
    tape.backward(total);
    ChunkOut& out = outs[c];
    out.flow_grad = model.flow.params().make_grad_buffer();
    out.ibr_grad = model.ibr.params().make_grad_buffer();
    tape.collect(model.flow.params(), out.flow_grad);
    tape.collect(model.ibr.params(), out.ibr_grad);
    out.parts.rgb = tape.scalar(lv.rgb);
    out.parts.of = lv.of.valid() ? tape.scalar(lv.of) : 0.0;
    out.parts.cyc = tape.scalar(lv.cyc);
    out.parts.temp = tape.scalar(lv.temp);
    out.parts.slow = tape.scalar(lv.slow);
    out.parts.spat = tape.scalar(lv.spat);
    out.valid_rays = static_cast<int>(std::count(render.ray_valid.begin(), render.ray_valid.end(), 1));
    out.valid_samples = static_cast<int>(std::count(render.sample_valid.begin(), render.sample_valid.end(), 1));

    const Matrix& w = tape.value(render.weights);
    const Matrix& f = tape.value(bent.base_flow);
    for (std::size_t r = 0; r < rc; ++r) {
      if (!batch.masked[r0 + r] || !render.ray_valid[r]) continue;
      double m = 0.0;
      for (int k = 0; k < n; ++k) {
        const auto i = static_cast<Eigen::Index>(r) * n + k;
        m += w(i, 0) * f.block<1, 3>(i, 0).norm();
      }
      out.flow_mass += m;
      ++out.flow_rays;
    }
  });

  // Reduce in chunk order so the result does not depend on scheduling.
  diff::GradBuffer flow_grad = model.flow.params().make_grad_buffer();
  diff::GradBuffer ibr_grad = model.ibr.params().make_grad_buffer();
  StepStats st;
  st.step = step;
  double mass = 0.0;
  int mass_rays = 0;
  for (const ChunkOut& o : outs) {
    diff::add_into(flow_grad, o.flow_grad);
    diff::add_into(ibr_grad, o.ibr_grad);
    st.components.rgb += o.parts.rgb;
    st.components.of += o.parts.of;
    st.components.cyc += o.parts.cyc;
    st.components.temp += o.parts.temp;
    st.components.slow += o.parts.slow;
    st.components.spat += o.parts.spat;
    mass += o.flow_mass;
    mass_rays += o.flow_rays;
    st.valid_rays += o.valid_rays;
    st.valid_samples += o.valid_samples;
  }
  model.flow.params().zero_grad();
  model.ibr.params().zero_grad();
  model.flow.params().accumulate(flow_grad);
  model.ibr.params().accumulate(ibr_grad);

  st.total = total_loss(st.components, config.weights, step);
  st.factor = level.factor;
  st.sources = static_cast<int>(batch.sources.size());
  st.rays = static_cast<int>(rays);
  st.lr_flow = config.lr_flow_at(step);
  st.lr_backbone = config.finetune_backbone ? config.lr_backbone_at(step) : 0.0;
  st.alpha_of = alpha_of;
  st.mean_flow_masked = mass_rays > 0 ? mass / mass_rays : 0.0;
  return st;
}

StepStats train_step(Model& model, const Level& level, const TrainConfig& config, std::int64_t step,
                     const RayBatch& batch, std::mt19937_64& rng) {
  StepStats st = evaluate_batch(model, level, config, step, batch, rng);
  diff::adam_step(model.flow.params(), diff::AdamConfig{st.lr_flow});
  if (config.finetune_backbone) {
    diff::adam_step(model.ibr.params(), diff::AdamConfig{st.lr_backbone});
  } else {
    model.ibr.params().zero_grad();
  }
  return st;
}

// --- schedule ------------------------------------------------------------------

std::string metrics_csv_header() {
  return "step,total,rgb,of,cyc,temp,slow,spat,f,sources,lr_flow,lr_backbone,alpha_of,"
         "mean_flow_masked,rays";
}

std::string metrics_csv_row(const StepStats& s) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%d,%.17g,%.17g,%.17g,%.17g,%d",
                static_cast<long long>(s.step), s.total, s.components.rgb, s.components.of,
                s.components.cyc, s.components.temp, s.components.slow, s.components.spat, s.factor,
                s.sources, s.lr_flow, s.lr_backbone, s.alpha_of, s.mean_flow_masked, s.rays);
  return buf;
}

namespace {

std::string checkpoint_name(std::int64_t step) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "ckpt_%06lld.bin", static_cast<long long>(step));
  return buf;
}

// Keeps the header and the rows logged before `step`.
void trim_csv(const std::filesystem::path& path, std::int64_t step) {
  std::vector<std::string> keep;
  if (std::ifstream in(path); in) {
    std::string line;
    while (std::getline(in, line)) {
      if (keep.empty()) {
        keep.push_back(line);
        continue;
      }
      if (std::stoll(line.substr(0, line.find(','))) < step) keep.push_back(line);
    }
  }
  if (keep.empty()) keep.push_back(metrics_csv_header());
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

}  // namespace

RunResult run_schedule(Model& model, const TrainConfig& config_in, const Dataset& dataset,
                       const RunOptions& options) {
  TrainConfig config = config_in;
  config.finalize();
  if (model.flow.config().num_frames != dataset.num_frames()) {
    throw std::invalid_argument("run_schedule: model and dataset disagree on the frame count");
  }
  std::int64_t start = 0;
  if (options.resume) start = model.load(*options.resume);
  if (start > config.total_steps) throw std::invalid_argument("run_schedule: checkpoint is past total_steps");

  std::ofstream csv;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    const auto path = options.out_dir / "metrics.csv";
    if (start > 0) {
      trim_csv(path, start);
      csv.open(path, std::ios::app);
    } else {
      csv.open(path, std::ios::trunc);
      csv << metrics_csv_header() << '\n';
    }
    if (!csv) throw std::runtime_error("cannot write " + path.string());
  }

  std::map<int, Level> levels;
  RunResult result;
  std::int64_t s = start;
  for (; s < config.total_steps; ++s) {
    if (options.stop_after && s >= *options.stop_after) break;
    const int f = config.subsample_at(s);
    auto it = levels.find(f);
    if (it == levels.end()) it = levels.emplace(f, build_level(dataset, f)).first;
    std::mt19937_64 rng = step_rng(config.seed, s);
    const RayBatch batch = sample_ray_batch(it->second, config, s, rng);
    const StepStats st = train_step(model, it->second, config, s, batch, rng);
    if (csv.is_open()) {
      csv << metrics_csv_row(st) << '\n';
      csv.flush();
    }
    if (options.on_step) options.on_step(st);
    result.log.push_back(st);
    const std::int64_t done = s + 1;
    if (!options.out_dir.empty() && config.checkpoint_every > 0 && done % config.checkpoint_every == 0 &&
        done < config.total_steps) {
      model.save(options.out_dir / checkpoint_name(done), done);
    }
  }
  result.steps_done = s;
  if (!options.out_dir.empty()) {
    if (s >= config.total_steps) model.save(options.out_dir / "final.bin", s);
    else model.save(options.out_dir / checkpoint_name(s), s);
  }
  return result;
}

}  // namespace flowibr
