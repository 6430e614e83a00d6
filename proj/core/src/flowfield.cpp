#include "flowibr/flowfield.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

namespace flowibr {

using diff::Matrix;
using diff::Tape;
using diff::Var;

int encoded_size(const EncodingConfig& cfg) {
  if (cfg.frequencies < 0) throw std::invalid_argument("EncodingConfig: L must be >= 0");
  return 3 * (2 * cfg.frequencies + 1) + 1;
}

namespace {

void encode_row(const double* p, double t, int frequencies, double* out) {
  out[0] = p[0];
  out[1] = p[1];
  out[2] = p[2];
  int col = 3;
  double freq = std::numbers::pi;
  for (int k = 0; k < frequencies; ++k) {
    for (int d = 0; d < 3; ++d) out[col + d] = std::sin(freq * p[d]);
    for (int d = 0; d < 3; ++d) out[col + 3 + d] = std::cos(freq * p[d]);
    col += 6;
    freq *= 2.0;
  }
  out[col] = t;
}

Matrix encode_matrix(const Matrix& points, double t, int frequencies) {
  Matrix out(points.rows(), 3 * (2 * frequencies + 1) + 1);
  for (Eigen::Index r = 0; r < points.rows(); ++r) {
    encode_row(points.row(r).data(), t, frequencies, out.row(r).data());
  }
  return out;
}

}  // namespace

Eigen::VectorXd encode(const Vec3& p, double t, const EncodingConfig& cfg) {
  Eigen::VectorXd out(encoded_size(cfg));
  encode_row(p.data(), t, cfg.frequencies, out.data());
  return out;
}

Var encode(Tape& tape, Var points, double t, const EncodingConfig& cfg) {
  const Matrix& p = tape.value(points);
  if (p.cols() != 3) throw std::invalid_argument("encode: points must be n x 3");
  const int frequencies = cfg.frequencies;
  (void)encoded_size(cfg);
  return tape.custom({points}, encode_matrix(p, t, frequencies),
                     [points, frequencies](Tape& tp, int self) {
                       const Matrix& gy = tp.node_grad(self);
                       const Matrix& enc = tp.value(Var{self});
                       Matrix& gp = tp.grad_ref(points);
                       for (Eigen::Index r = 0; r < gy.rows(); ++r) {
                         for (int d = 0; d < 3; ++d) gp(r, d) += gy(r, d);
                         int col = 3;
                         double freq = std::numbers::pi;
                         for (int k = 0; k < frequencies; ++k) {
                           for (int d = 0; d < 3; ++d) {
                             const double s = enc(r, col + d);
                             const double c = enc(r, col + 3 + d);
                             gp(r, d) += freq * (gy(r, col + d) * c - gy(r, col + 3 + d) * s);
                           }
                           col += 6;
                           freq *= 2.0;
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------

FlowField::FlowField(FlowFieldConfig config, std::uint64_t seed) : config_(config) {
  if (config_.depth < 4) throw std::invalid_argument("FlowField: depth must be >= 4");
  if (config_.width < 1) throw std::invalid_argument("FlowField: width must be >= 1");
  if (config_.skip_layer < 1 || config_.skip_layer >= config_.depth - 1) {
    throw std::invalid_argument("FlowField: skip layer must be a hidden layer");
  }
  if (config_.num_frames < 2) throw std::invalid_argument("FlowField: need >= 2 frames");
  if (config_.window < 1) throw std::invalid_argument("FlowField: window must be >= 1");

  std::mt19937_64 rng(seed);
  const int in = input_size();
  for (int l = 0; l < config_.depth; ++l) {
    int fan_in = l == 0 ? in : config_.width;
    if (l == config_.skip_layer) fan_in += in;
    const int fan_out = l == config_.depth - 1 ? 6 : config_.width;
    Matrix w = Matrix::Zero(fan_out, fan_in);
    if (l != config_.depth - 1) {
      const double bound = std::sqrt(6.0 / fan_in);
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
    }
    weight_ids_.push_back(params_.add("flow.w" + std::to_string(l), std::move(w)));
    bias_ids_.push_back(params_.add("flow.b" + std::to_string(l), Matrix::Zero(1, fan_out)));
  }
}

double FlowField::normalized_time(double frame) const {
  return (frame - 1.0) / (config_.num_frames - 1.0);
}

Matrix FlowField::eval_batch(const Matrix& points, double frame) const {
  if (points.cols() != 3) throw std::invalid_argument("eval_batch: points must be n x 3");
  const Matrix x = encode_matrix(points, normalized_time(frame), config_.encoding.frequencies);
  Matrix h = x;
  for (int l = 0; l < config_.depth; ++l) {
    const Matrix& w = params_[weight_ids_[l]].value;
    const Matrix& b = params_[bias_ids_[l]].value;
    if (l == config_.skip_layer) {
      Matrix cat(h.rows(), h.cols() + x.cols());
      cat << h, x;
      h = std::move(cat);
    }
    Matrix y = h * w.transpose();
    y.rowwise() += b.row(0);
    if (l != config_.depth - 1) y = y.cwiseMax(0.0);
    h = std::move(y);
  }
  return h;
}

FlowPair FlowField::eval(const Vec3& p, double frame) const {
  Matrix pts(1, 3);
  pts << p.x(), p.y(), p.z();
  const Matrix out = eval_batch(pts, frame);
  FlowPair f;
  f.forward = Vec3(out(0, 0), out(0, 1), out(0, 2));
  f.backward = Vec3(out(0, 3), out(0, 4), out(0, 5));
  return f;
}

FlowField::Bound FlowField::bind(Tape& tape) const {
  Bound b;
  for (int l = 0; l < config_.depth; ++l) {
    b.weights.push_back(tape.param(params_, weight_ids_[l]));
    b.biases.push_back(tape.param(params_, bias_ids_[l]));
  }
  return b;
}

Var FlowField::eval(Tape& tape, const Bound& bound, Var points, double frame) const {
  const Var x = encode(tape, points, normalized_time(frame), config_.encoding);
  Var h = x;
  for (int l = 0; l < config_.depth; ++l) {
    if (l == config_.skip_layer) {
      const Var parts[] = {h, x};
      h = tape.concat_cols(parts);
    }
    h = tape.affine(h, bound.weights[l], bound.biases[l]);
    if (l != config_.depth - 1) h = tape.relu(h);
  }
  return h;
}

void FlowField::set_constant(const Vec3& forward, const Vec3& backward) {
  auto& w = params_[weight_ids_.back()].value;
  auto& b = params_[bias_ids_.back()].value;
  w.setZero();
  b << forward.x(), forward.y(), forward.z(), backward.x(), backward.y(), backward.z();
}

// ---------------------------------------------------------------------------

FlowPair eval_flow(const FlowField& field, const Vec3& p, double frame) {
  return field.eval(p, frame);
}

Vec3 displace(const FlowField& field, const Vec3& p, double frame, Direction dir) {
  const FlowPair f = field.eval(p, frame);
  return p + (dir == Direction::kForward ? f.forward : f.backward);
}

TimeNeighbors time_neighbors(double t, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("time_neighbors: dt must be positive");
  const double s = t / dt;
  TimeNeighbors n;
  n.backward_frame = static_cast<int>(std::floor(s));
  n.forward_frame = static_cast<int>(std::ceil(s));
  n.delta_b = s - n.backward_frame;
  n.delta_f = n.forward_frame - s;
  return n;
}

Vec3 continuous_time_step(const FlowField& field, const Vec3& p, double t, double dt,
                          Direction dir) {
  const TimeNeighbors n = time_neighbors(t, dt);
  const FlowPair f = field.eval(p, t / dt);
  return dir == Direction::kForward ? Vec3(n.delta_f * f.forward) : Vec3(n.delta_b * f.backward);
}

namespace {

void check_target(const FlowField& field, double t_from, int t_to) {
  const auto& cfg = field.config();
  if (t_to < 1 || t_to > cfg.num_frames) {
    throw std::out_of_range("compose_flow: target frame " + std::to_string(t_to) +
                            " outside observation range");
  }
  if (std::abs(t_to - t_from) > cfg.window) {
    throw std::out_of_range("compose_flow: target frame beyond the composition window");
  }
}

// Integer-frame recursion: zero at the target, otherwise one displacement step
// and recurse from the adjacent frame.
Vec3 bend_from_frame(const FlowField& field, const Vec3& p, int frame, int t_to) {
  if (frame == t_to) return p;
  if (frame < t_to) {
    return bend_from_frame(field, displace(field, p, frame, Direction::kForward), frame + 1, t_to);
  }
  return bend_from_frame(field, displace(field, p, frame, Direction::kBackward), frame - 1, t_to);
}

}  // namespace

Vec3 bend_point(const FlowField& field, const Vec3& p, double t_from, int t_to) {
  check_target(field, t_from, t_to);
  if (std::floor(t_from) == t_from) {
    return bend_from_frame(field, p, static_cast<int>(t_from), t_to);
  }
  const TimeNeighbors n = time_neighbors(t_from, 1.0);
  if (t_to > t_from) {
    const Vec3 q = p + continuous_time_step(field, p, t_from, 1.0, Direction::kForward);
    return bend_from_frame(field, q, n.forward_frame, t_to);
  }
  const Vec3 q = p + continuous_time_step(field, p, t_from, 1.0, Direction::kBackward);
  return bend_from_frame(field, q, n.backward_frame, t_to);
}

Vec3 compose_flow(const FlowField& field, const Vec3& p, double t_from, int t_to) {
  return bend_point(field, p, t_from, t_to) - p;
}

BentSamples bend_samples(Tape& tape, const FlowField& field, const FlowField::Bound& bound,
                         Var points, double t_from, std::span<const int> targets) {
  BentSamples out;
  int max_fwd = std::numeric_limits<int>::min();
  int min_bwd = std::numeric_limits<int>::max();
  for (int t : targets) {
    check_target(field, t_from, t);
    if (t > t_from) max_fwd = std::max(max_fwd, t);
    if (t < t_from) min_bwd = std::min(min_bwd, t);
    if (t == t_from) out.positions[t] = points;
  }
  out.base_flow = field.eval(tape, bound, points, t_from);

  const bool integral = std::floor(t_from) == t_from;
  const TimeNeighbors n = integral ? TimeNeighbors{static_cast<int>(t_from) - 1,
                                                   static_cast<int>(t_from) + 1, 1.0, 1.0}
                                   : time_neighbors(t_from, 1.0);

  auto step = [&](Var pos, Var flow, int head, double delta) {
    Var s = tape.slice_cols(flow, head, 3);
    if (delta != 1.0) s = tape.scale(s, delta);
    return tape.add(pos, s);
  };

  if (max_fwd != std::numeric_limits<int>::min()) {
    int frame = n.forward_frame;
    Var pos = step(points, out.base_flow, 0, n.delta_f);
    out.positions[frame] = pos;
    while (frame < max_fwd) {
      const Var f = field.eval(tape, bound, pos, frame);
      out.chain_flow[frame] = f;
      pos = step(pos, f, 0, 1.0);
      ++frame;
      out.positions[frame] = pos;
    }
  }
  if (min_bwd != std::numeric_limits<int>::max()) {
    int frame = n.backward_frame;
    Var pos = step(points, out.base_flow, 3, n.delta_b);
    out.positions[frame] = pos;
    while (frame > min_bwd) {
      const Var f = field.eval(tape, bound, pos, frame);
      out.chain_flow[frame] = f;
      pos = step(pos, f, 3, 1.0);
      --frame;
      out.positions[frame] = pos;
    }
  }
  return out;
}

}  // namespace flowibr
