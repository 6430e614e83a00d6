#include "flowibr/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace flowibr {

using diff::Matrix;
using diff::Tape;
using diff::Var;

double LossWeights::alpha_of_at(std::int64_t step) const {
  if (step >= anneal_steps) return 0.0;
  if (step <= 0) return alpha_of;
  return alpha_of * (1.0 - static_cast<double>(step) / static_cast<double>(anneal_steps));
}

void LossWeights::validate() const {
  for (double a : {alpha_of, alpha_cyc, alpha_slow, alpha_spat, alpha_temp, alpha_reg}) {
    if (!(a >= 0.0) || !std::isfinite(a)) throw std::invalid_argument("loss weights must be finite and >= 0");
  }
  if (anneal_steps < 1) throw std::invalid_argument("anneal_steps must be >= 1");
}

double total_loss(const LossComponents& c, const LossWeights& w, std::int64_t step) {
  const double reg = w.alpha_temp * c.temp + w.alpha_slow * c.slow + w.alpha_spat * c.spat;
  return c.rgb + w.alpha_of_at(step) * c.of + w.alpha_cyc * c.cyc + w.alpha_reg * reg;
}

Var total_loss(Tape& tape, const LossVars& c, const LossWeights& w, std::int64_t step) {
  std::vector<Var> terms;
  std::vector<double> weights;
  auto push = [&](Var v, double a) {
    if (!v.valid() || a == 0.0) return;
    terms.push_back(v);
    weights.push_back(a);
  };
  push(c.rgb, 1.0);
  push(c.of, w.alpha_of_at(step));
  push(c.cyc, w.alpha_cyc);
  push(c.temp, w.alpha_reg * w.alpha_temp);
  push(c.slow, w.alpha_reg * w.alpha_slow);
  push(c.spat, w.alpha_reg * w.alpha_spat);
  return tape.add_scalars(terms, weights);
}

// ---------------------------------------------------------------------------

Var loss_rgb(Tape& tape, Var pred, const Matrix& truth, std::span<const std::uint8_t> row_mask) {
  if (tape.rows(pred) != truth.rows() || tape.cols(pred) != truth.cols()) {
    throw std::invalid_argument("loss_rgb: prediction and truth differ in shape");
  }
  Var diff = tape.add_const(pred, -truth);
  if (!row_mask.empty()) {
    if (static_cast<Eigen::Index>(row_mask.size()) != truth.rows()) {
      throw std::invalid_argument("loss_rgb: mask length mismatch");
    }
    Matrix m(truth.rows(), truth.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i) m.row(i).setConstant(row_mask[i] ? 1.0 : 0.0);
    diff = tape.mul_const(diff, m);
  }
  return tape.sum(tape.square(diff));
}

double loss_rgb(std::span<const Vec3> pred, std::span<const Vec3> truth) {
  if (pred.size() != truth.size()) throw std::invalid_argument("loss_rgb: count mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]).squaredNorm();
  return s;
}

// ---------------------------------------------------------------------------

Var weighted_displacement(Tape& tape, Var weights, Var uv, const Matrix& pixels,
                          int samples_per_ray, std::span<const std::uint8_t> usable,
                          std::vector<std::uint8_t>* defined) {
  const Matrix& a = tape.value(weights);
  const Matrix& q = tape.value(uv);
  const Eigen::Index rn = a.rows();
  if (samples_per_ray < 1 || rn % samples_per_ray != 0 || q.rows() != rn || q.cols() != 2 ||
      pixels.rows() != rn / samples_per_ray || pixels.cols() != 2 ||
      static_cast<Eigen::Index>(usable.size()) != rn) {
    throw std::invalid_argument("weighted_displacement: shape mismatch");
  }
  const Eigen::Index rays = rn / samples_per_ray;
  Matrix d = Matrix::Zero(rays, 2);
  Matrix mass = Matrix::Zero(rays, 1);
  std::vector<std::uint8_t> ok(rays, 0);
  for (Eigen::Index r = 0; r < rays; ++r) {
    for (int n = 0; n < samples_per_ray; ++n) {
      const Eigen::Index i = r * samples_per_ray + n;
      if (!usable[i]) continue;
      mass(r, 0) += a(i, 0);
      d.row(r) += a(i, 0) * (q.row(i) - pixels.row(r));
    }
    if (mass(r, 0) > 0.0) {
      d.row(r) /= mass(r, 0);
      ok[r] = 1;
    }
  }
  if (defined) *defined = ok;
  std::vector<std::uint8_t> use(usable.begin(), usable.end());
  return tape.custom({weights, uv}, std::move(d),
                     [weights, uv, pixels, samples_per_ray, use, ok, mass](Tape& t, int self) {
    const Matrix& g = t.node_grad(self);
    const Matrix& d = t.value(Var{self});
    const Matrix& a = t.value(weights);
    const Matrix& q = t.value(uv);
    Matrix* ga = t.requires_grad(weights) ? &t.grad_ref(weights) : nullptr;
    Matrix* gq = t.requires_grad(uv) ? &t.grad_ref(uv) : nullptr;
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      if (!ok[r]) continue;
      const double m = mass(r, 0);
      for (int n = 0; n < samples_per_ray; ++n) {
        const Eigen::Index i = r * samples_per_ray + n;
        if (!use[i]) continue;
        if (ga) (*ga)(i, 0) += g.row(r).dot(q.row(i) - pixels.row(r) - d.row(r)) / m;
        if (gq) gq->row(i) += (a(i, 0) / m) * g.row(r);
      }
    }
  });
}

Var loss_optical_flow(Tape& tape, const RayRender& render, const Matrix& pixels,
                      std::span<const Matrix> gt, std::span<const std::uint8_t> ray_mask) {
  if (gt.size() != render.uv.size()) throw std::invalid_argument("loss_optical_flow: one flow per source");
  std::vector<Var> terms;
  for (std::size_t s = 0; s < gt.size(); ++s) {
    std::vector<std::uint8_t> defined;
    const Var d = weighted_displacement(tape, render.weights, render.uv[s], pixels,
                                        render.samples_per_ray, render.in_front[s], &defined);
    if (gt[s].rows() != pixels.rows() || gt[s].cols() != 2) {
      throw std::invalid_argument("loss_optical_flow: ground truth must be R x 2");
    }
    Matrix target = Matrix::Zero(gt[s].rows(), 2);
    Matrix keep = Matrix::Zero(gt[s].rows(), 2);
    for (Eigen::Index r = 0; r < target.rows(); ++r) {
      const bool has = std::isfinite(gt[s](r, 0)) && std::isfinite(gt[s](r, 1));
      const bool in_batch = ray_mask.empty() || ray_mask[r];
      if (!has || !defined[r] || !in_batch) continue;
      target.row(r) = gt[s].row(r);
      keep.row(r).setOnes();
    }
    terms.push_back(tape.sum(tape.mul_const(tape.abs(tape.add_const(d, -target)), keep)));
  }
  if (terms.empty()) return tape.constant_scalar(0.0);
  const std::vector<double> ones(terms.size(), 1.0);
  return tape.add_scalars(terms, ones);
}

double loss_optical_flow(const BackboneOutput& output, const Vec2& target_pixel,
                         const std::map<int, Vec2>& gt_flow) {
  double loss = 0.0;
  for (const auto& [frame, uv] : output.per_source_uv) {
    const auto it = gt_flow.find(frame);
    if (it == gt_flow.end()) continue;
    if (uv.size() != output.ray_weights.size()) {
      throw std::invalid_argument("loss_optical_flow: uv and weights differ in length");
    }
    Vec2 d = Vec2::Zero();
    for (std::size_t n = 0; n < uv.size(); ++n) d += output.ray_weights[n] * (uv[n] - target_pixel);
    loss += (it->second - d).cwiseAbs().sum();
  }
  return loss;
}

// ---------------------------------------------------------------------------

Var loss_cycle(Tape& tape, Var base, Var prev, Var next) {
  std::vector<Var> terms;
  if (prev.valid()) {
    terms.push_back(tape.sum(tape.abs(tape.add(tape.slice_cols(base, 3, 3), tape.slice_cols(prev, 0, 3)))));
  }
  if (next.valid()) {
    terms.push_back(tape.sum(tape.abs(tape.add(tape.slice_cols(next, 3, 3), tape.slice_cols(base, 0, 3)))));
  }
  if (terms.empty()) return tape.constant_scalar(0.0);
  const std::vector<double> ones(terms.size(), 1.0);
  return tape.add_scalars(terms, ones);
}

Var loss_cycle(Tape& tape, const FlowField& field, const FlowField::Bound& bound, Var points,
               double frame) {
  const Var base = field.eval(tape, bound, points, frame);
  Var prev, next;
  if (frame - 1.0 >= 1.0) {
    prev = field.eval(tape, bound, tape.add(points, tape.slice_cols(base, 3, 3)), frame - 1.0);
  }
  if (frame + 1.0 <= field.config().num_frames) {
    next = field.eval(tape, bound, tape.add(points, tape.slice_cols(base, 0, 3)), frame + 1.0);
  }
  return loss_cycle(tape, base, prev, next);
}

double loss_cycle(const FlowField& field, std::span<const std::pair<Vec3, double>> points) {
  double s = 0.0;
  for (const auto& [p, t] : points) {
    const FlowPair here = field.eval(p, t);
    const FlowPair before = field.eval(p + here.backward, t - 1.0);
    const FlowPair after = field.eval(p + here.forward, t + 1.0);
    s += (here.backward + before.forward).cwiseAbs().sum();
    s += (after.backward + here.forward).cwiseAbs().sum();
  }
  return s;
}

Var loss_temporal(Tape& tape, Var flow) {
  return tape.sum(tape.square(tape.add(tape.slice_cols(flow, 0, 3), tape.slice_cols(flow, 3, 3))));
}

double loss_temporal(const FlowField& field, std::span<const std::pair<Vec3, double>> points) {
  double s = 0.0;
  for (const auto& [p, t] : points) {
    const FlowPair f = field.eval(p, t);
    s += (f.forward + f.backward).squaredNorm();
  }
  return s;
}

Var loss_slow(Tape& tape, Var flow) { return tape.sum(tape.abs(flow)); }

double loss_slow(const FlowField& field, std::span<const std::pair<Vec3, double>> points) {
  double s = 0.0;
  for (const auto& [p, t] : points) {
    const FlowPair f = field.eval(p, t);
    s += f.forward.cwiseAbs().sum() + f.backward.cwiseAbs().sum();
  }
  return s;
}

double spatial_weight(const Vec3& a, const Vec3& b) { return std::exp(-2.0 * (a - b).squaredNorm()); }

NeighborList along_ray_neighbors(int rays, int samples_per_ray) {
  if (rays < 0 || samples_per_ray < 1) throw std::invalid_argument("along_ray_neighbors: bad sizes");
  NeighborList out(static_cast<std::size_t>(rays) * samples_per_ray);
  for (int r = 0; r < rays; ++r) {
    for (int n = 0; n < samples_per_ray; ++n) {
      const int i = r * samples_per_ray + n;
      out[i] = {r * samples_per_ray + std::max(n - 1, 0),
                r * samples_per_ray + std::min(n + 1, samples_per_ray - 1)};
    }
  }
  return out;
}

Var loss_spatial(Tape& tape, Var flow, const Matrix& points, const NeighborList& neighbors) {
  const Matrix& f = tape.value(flow);
  if (f.cols() != 6 || points.rows() != f.rows() || points.cols() != 3 ||
      static_cast<Eigen::Index>(neighbors.size()) != f.rows()) {
    throw std::invalid_argument("loss_spatial: shape mismatch");
  }
  // Pairs with their kernel weight; the gradient is a sign pattern scaled by it.
  std::vector<std::pair<int, int>> pairs;
  std::vector<double> w;
  double total = 0.0;
  std::uint64_t signs = 0;
  for (std::size_t i = 0; i < neighbors.size(); ++i) {
    for (int j : neighbors[i]) {
      if (j < 0 || j >= f.rows()) throw std::out_of_range("loss_spatial: neighbor index");
      const double wij = std::exp(-2.0 * (points.row(i) - points.row(j)).squaredNorm());
      pairs.emplace_back(static_cast<int>(i), j);
      w.push_back(wij);
      for (int c = 0; c < 6; ++c) {
        const double d = f(i, c) - f(j, c);
        total += wij * std::abs(d);
        signs = signs * 3 + (d > 0.0 ? 1 : (d < 0.0 ? 2 : 0));
      }
    }
  }
  tape.note_kink(signs);
  Matrix y(1, 1);
  y(0, 0) = total;
  return tape.custom({flow}, std::move(y), [flow, pairs = std::move(pairs), w = std::move(w)](Tape& t, int self) {
    const double g = t.node_grad(self)(0, 0);
    const Matrix& f = t.value(flow);
    Matrix& gf = t.grad_ref(flow);
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      const auto [i, j] = pairs[k];
      for (int c = 0; c < 6; ++c) {
        const double d = f(i, c) - f(j, c);
        const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        gf(i, c) += g * w[k] * s;
        gf(j, c) -= g * w[k] * s;
      }
    }
  });
}

double loss_spatial(const FlowField& field, std::span<const Vec3> points, double frame,
                    const NeighborList& neighbors) {
  if (neighbors.size() != points.size()) throw std::invalid_argument("loss_spatial: neighbor list size");
  std::vector<FlowPair> flows;
  flows.reserve(points.size());
  for (const Vec3& p : points) flows.push_back(field.eval(p, frame));
  double s = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (int j : neighbors[i]) {
      if (j < 0 || j >= static_cast<int>(points.size())) throw std::out_of_range("loss_spatial: neighbor index");
      const double w = spatial_weight(points[i], points[j]);
      s += w * ((flows[i].forward - flows[j].forward).cwiseAbs().sum() +
                (flows[i].backward - flows[j].backward).cwiseAbs().sum());
    }
  }
  return s;
}

}  // namespace flowibr
