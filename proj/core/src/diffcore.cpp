#include "flowibr/diffcore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>

namespace flowibr::diff {

// ---------------------------------------------------------------------------
// ParamStore

std::size_t ParamStore::add(std::string name, Matrix init) {
  for (const auto& e : entries_) {
    if (e.name == name) throw std::invalid_argument("ParamStore: duplicate name " + name);
  }
  Entry e;
  e.name = std::move(name);
  e.grad = Matrix::Zero(init.rows(), init.cols());
  e.adam_m = Matrix::Zero(init.rows(), init.cols());
  e.adam_v = Matrix::Zero(init.rows(), init.cols());
  e.value = std::move(init);
  entries_.push_back(std::move(e));
  return entries_.size() - 1;
}

std::size_t ParamStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return i;
  }
  throw std::out_of_range("ParamStore: no parameter named " + name);
}

std::size_t ParamStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.grad.setZero();
}

GradBuffer ParamStore::make_grad_buffer() const {
  GradBuffer b;
  b.reserve(entries_.size());
  for (const auto& e : entries_) b.push_back(Matrix::Zero(e.value.rows(), e.value.cols()));
  return b;
}

void ParamStore::accumulate(const GradBuffer& buffer) {
  if (buffer.size() != entries_.size()) {
    throw std::invalid_argument("ParamStore::accumulate: buffer size mismatch");
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (buffer[i].rows() != entries_[i].grad.rows() ||
        buffer[i].cols() != entries_[i].grad.cols()) {
      throw std::invalid_argument("ParamStore::accumulate: shape mismatch for " +
                                  entries_[i].name);
    }
    entries_[i].grad += buffer[i];
  }
}

std::vector<double> ParamStore::flat_values() const {
  std::vector<double> out;
  out.reserve(num_scalars());
  for (const auto& e : entries_) out.insert(out.end(), e.value.data(), e.value.data() + e.value.size());
  return out;
}

std::vector<double> ParamStore::flat_grads() const {
  std::vector<double> out;
  out.reserve(num_scalars());
  for (const auto& e : entries_) out.insert(out.end(), e.grad.data(), e.grad.data() + e.grad.size());
  return out;
}

void ParamStore::set_flat_values(std::span<const double> values) {
  if (values.size() != num_scalars()) {
    throw std::invalid_argument("ParamStore::set_flat_values: size mismatch");
  }
  std::size_t k = 0;
  for (auto& e : entries_) {
    for (Eigen::Index i = 0; i < e.value.size(); ++i) e.value.data()[i] = values[k++];
  }
}

bool ParamStore::bitwise_equal(const ParamStore& other) const {
  if (other.entries_.size() != entries_.size() || other.step_ != step_) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols())
      return false;
    for (Eigen::Index k = 0; k < a.value.size(); ++k) {
      if (std::bit_cast<std::uint64_t>(a.value.data()[k]) !=
              std::bit_cast<std::uint64_t>(b.value.data()[k]) ||
          std::bit_cast<std::uint64_t>(a.adam_m.data()[k]) !=
              std::bit_cast<std::uint64_t>(b.adam_m.data()[k]) ||
          std::bit_cast<std::uint64_t>(a.adam_v.data()[k]) !=
              std::bit_cast<std::uint64_t>(b.adam_v.data()[k]))
        return false;
    }
  }
  return true;
}

void adam_step(ParamStore& store, const AdamConfig& config) {
  store.advance_step();
  const double t = static_cast<double>(store.step());
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& e = store[i];
    e.adam_m = config.beta1 * e.adam_m + (1.0 - config.beta1) * e.grad;
    e.adam_v = config.beta2 * e.adam_v + (1.0 - config.beta2) * e.grad.cwiseProduct(e.grad);
    for (Eigen::Index k = 0; k < e.value.size(); ++k) {
      const double m_hat = e.adam_m.data()[k] / c1;
      const double v_hat = e.adam_v.data()[k] / c2;
      e.value.data()[k] -= config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
    }
    e.grad.setZero();
  }
}

void add_into(GradBuffer& dst, const GradBuffer& src) {
  if (dst.size() != src.size()) throw std::invalid_argument("add_into: size mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// ---------------------------------------------------------------------------
// Tape

namespace {

std::uint64_t mix(std::uint64_t h, std::uint64_t bits) {
  h ^= bits;
  h *= 0x100000001b3ULL;
  h ^= h >> 29;
  return h;
}

void shape_error(const char* op, const Matrix& a, const Matrix& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) +
                              "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                              "x" + std::to_string(b.cols()) + ")");
}

}  // namespace

Var Tape::push(Matrix value, std::vector<int> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (int i : inputs) n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

void Tape::need_same_shape(Var a, Var b, const char* op) const {
  const auto& va = value(a);
  const auto& vb = value(b);
  if (va.rows() != vb.rows() || va.cols() != vb.cols()) shape_error(op, va, vb);
}

Var Tape::constant(Matrix value) { return push(std::move(value), {}, nullptr); }

Var Tape::constant_scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

Var Tape::input(Matrix value) {
  Var v = push(std::move(value), {}, nullptr);
  nodes_.back().requires_grad = true;
  return v;
}

Var Tape::param(const ParamStore& store, std::size_t index) {
  Var v = input(store[index].value);
  nodes_.back().store = &store;
  nodes_.back().param_index = index;
  return v;
}

double Tape::scalar(Var v) const {
  const auto& m = value(v);
  if (m.rows() != 1 || m.cols() != 1) throw std::invalid_argument("Tape::scalar: not 1x1");
  return m(0, 0);
}

Matrix Tape::grad(Var v) const {
  const auto& n = nodes_.at(v.id);
  if (n.has_grad) return n.grad;
  return Matrix::Zero(n.value.rows(), n.value.cols());
}

Matrix& Tape::grad_ref(Var v) {
  auto& n = nodes_.at(v.id);
  if (!n.has_grad) {
    n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::note_kink(std::uint64_t bits) { kink_hash_ = mix(kink_hash_, bits); }

Var Tape::affine(Var x, Var w, Var b) {
  const auto& vx = value(x);
  const auto& vw = value(w);
  const auto& vb = value(b);
  if (vx.cols() != vw.cols()) shape_error("affine(x, W)", vx, vw);
  if (vb.rows() != 1 || vb.cols() != vw.rows()) shape_error("affine(W, b)", vw, vb);
  Matrix y = vx * vw.transpose();
  y.rowwise() += vb.row(0);
  return push(std::move(y), {x.id, w.id, b.id}, [x, w, b](Tape& t, int self) {
    const Matrix& gy = t.nodes_[self].grad;
    if (t.requires_grad(x)) t.grad_ref(x).noalias() += gy * t.value(w);
    if (t.requires_grad(w)) t.grad_ref(w).noalias() += gy.transpose() * t.value(x);
    if (t.requires_grad(b)) t.grad_ref(b) += gy.colwise().sum();
  });
}

Var Tape::relu(Var a) {
  const auto& va = value(a);
  Matrix y = va.cwiseMax(0.0);
  std::uint64_t bits = 0;
  int k = 0;
  for (Eigen::Index i = 0; i < va.size(); ++i) {
    bits = (bits << 1) | (va.data()[i] > 0.0 ? 1u : 0u);
    if (++k == 64) {
      note_kink(bits);
      bits = 0;
      k = 0;
    }
  }
  if (k) note_kink(bits);
  return push(std::move(y), {a.id}, [a](Tape& t, int self) {
    const Matrix& gy = t.nodes_[self].grad;
    const Matrix& va = t.value(a);
    Matrix& ga = t.grad_ref(a);
    for (Eigen::Index i = 0; i < va.size(); ++i) {
      if (va.data()[i] > 0.0) ga.data()[i] += gy.data()[i];
    }
  });
}

Var Tape::sin(Var a) {
  Matrix y = value(a).array().sin().matrix();
  return push(std::move(y), {a.id}, [a](Tape& t, int self) {
    t.grad_ref(a).array() += t.nodes_[self].grad.array() * t.value(a).array().cos();
  });
}

Var Tape::cos(Var a) {
  Matrix y = value(a).array().cos().matrix();
  return push(std::move(y), {a.id}, [a](Tape& t, int self) {
    t.grad_ref(a).array() -= t.nodes_[self].grad.array() * t.value(a).array().sin();
  });
}

Var Tape::exp(Var a) {
  Matrix y = value(a).array().exp().matrix();
  return push(std::move(y), {a.id}, [a](Tape& t, int self) {
    t.grad_ref(a).array() += t.nodes_[self].grad.array() * t.nodes_[self].value.array();
  });
}

Var Tape::abs(Var a) {
  const auto& va = value(a);
  std::uint64_t bits = 0;
  int k = 0;
  for (Eigen::Index i = 0; i < va.size(); ++i) {
    const double x = va.data()[i];
    bits = (bits << 2) | (x > 0.0 ? 1u : (x < 0.0 ? 2u : 0u));
    if (++k == 32) {
      note_kink(bits);
      bits = 0;
      k = 0;
    }
  }
  if (k) note_kink(bits);
  Matrix y = va.cwiseAbs();
  // Subgradient 0 at 0.
  return push(std::move(y), {a.id}, [a](Tape& t, int self) {
    const Matrix& gy = t.nodes_[self].grad;
    const Matrix& va = t.value(a);
    Matrix& ga = t.grad_ref(a);
    for (Eigen::Index i = 0; i < va.size(); ++i) {
      const double x = va.data()[i];
      if (x > 0.0) ga.data()[i] += gy.data()[i];
      else if (x < 0.0) ga.data()[i] -= gy.data()[i];
    }
  });
}

Var Tape::square(Var a) {
  Matrix y = value(a).array().square().matrix();
  return push(std::move(y), {a.id}, [a](Tape& t, int self) {
    t.grad_ref(a).array() += 2.0 * t.nodes_[self].grad.array() * t.value(a).array();
  });
}

Var Tape::add(Var a, Var b) {
  need_same_shape(a, b, "add");
  Matrix y = value(a) + value(b);
  return push(std::move(y), {a.id, b.id}, [a, b](Tape& t, int self) {
    const Matrix& gy = t.nodes_[self].grad;
    if (t.requires_grad(a)) t.grad_ref(a) += gy;
    if (t.requires_grad(b)) t.grad_ref(b) += gy;
  });
}

Var Tape::sub(Var a, Var b) {
  need_same_shape(a, b, "sub");
  Matrix y = value(a) - value(b);
  return push(std::move(y), {a.id, b.id}, [a, b](Tape& t, int self) {
    const Matrix& gy = t.nodes_[self].grad;
    if (t.requires_grad(a)) t.grad_ref(a) += gy;
    if (t.requires_grad(b)) t.grad_ref(b) -= gy;
  });
}

Var Tape::mul(Var a, Var b) {
  need_same_shape(a, b, "mul");
  Matrix y = value(a).cwiseProduct(value(b));
  return push(std::move(y), {a.id, b.id}, [a, b](Tape& t, int self) {
    const Matrix& gy = t.nodes_[self].grad;
    if (t.requires_grad(a)) t.grad_ref(a) += gy.cwiseProduct(t.value(b));
    if (t.requires_grad(b)) t.grad_ref(b) += gy.cwiseProduct(t.value(a));
  });
}

Var Tape::scale(Var a, double s) {
  Matrix y = value(a) * s;
  return push(std::move(y), {a.id}, [a, s](Tape& t, int self) {
    t.grad_ref(a) += s * t.nodes_[self].grad;
  });
}

Var Tape::mul_col(Var a, Var s) {
  const auto& va = value(a);
  const auto& vs = value(s);
  if (vs.cols() != 1 || vs.rows() != va.rows()) shape_error("mul_col", va, vs);
  Matrix y = va.array().colwise() * vs.col(0).array();
  return push(std::move(y), {a.id, s.id}, [a, s](Tape& t, int self) {
    const Matrix& gy = t.nodes_[self].grad;
    if (t.requires_grad(a)) {
      t.grad_ref(a).array() += gy.array().colwise() * t.value(s).col(0).array();
    }
    if (t.requires_grad(s)) {
      t.grad_ref(s).col(0) += gy.cwiseProduct(t.value(a)).rowwise().sum();
    }
  });
}

Var Tape::mul_const(Var a, const Matrix& c) {
  const auto& va = value(a);
  if (va.rows() != c.rows() || va.cols() != c.cols()) shape_error("mul_const", va, c);
  Matrix y = va.cwiseProduct(c);
  return push(std::move(y), {a.id}, [a, c](Tape& t, int self) {
    t.grad_ref(a) += t.nodes_[self].grad.cwiseProduct(c);
  });
}

Var Tape::add_const(Var a, const Matrix& c) {
  const auto& va = value(a);
  if (va.rows() != c.rows() || va.cols() != c.cols()) shape_error("add_const", va, c);
  Matrix y = va + c;
  return push(std::move(y), {a.id}, [a](Tape& t, int self) {
    t.grad_ref(a) += t.nodes_[self].grad;
  });
}

Var Tape::sum(Var a) {
  Matrix y(1, 1);
  y(0, 0) = value(a).sum();
  return push(std::move(y), {a.id}, [a](Tape& t, int self) {
    t.grad_ref(a).array() += t.nodes_[self].grad(0, 0);
  });
}

Var Tape::row_sum(Var a) {
  Matrix y = value(a).rowwise().sum();
  return push(std::move(y), {a.id}, [a](Tape& t, int self) {
    const Matrix& gy = t.nodes_[self].grad;
    t.grad_ref(a).colwise() += gy.col(0);
  });
}

Var Tape::softmax(Var a) {
  const auto& va = value(a);
  Matrix y(va.rows(), va.cols());
  for (Eigen::Index r = 0; r < va.rows(); ++r) {
    const double m = va.row(r).maxCoeff();
    y.row(r) = (va.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return push(std::move(y), {a.id}, [a](Tape& t, int self) {
    const Matrix& gy = t.nodes_[self].grad;
    const Matrix& y = t.nodes_[self].value;
    Matrix& ga = t.grad_ref(a);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = gy.row(r).dot(y.row(r));
      ga.row(r).array() += y.row(r).array() * (gy.row(r).array() - dot);
    }
  });
}

Var Tape::segment_softmax(Var a, int group, std::span<const std::uint8_t> mask) {
  const auto& va = value(a);
  if (va.cols() != 1 || group <= 0 || va.rows() % group != 0 ||
      static_cast<Eigen::Index>(mask.size()) != va.rows()) {
    throw std::invalid_argument("segment_softmax: expected n x 1 input, n divisible by group");
  }
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  Matrix y = Matrix::Zero(va.rows(), 1);
  for (Eigen::Index g = 0; g < va.rows(); g += group) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < group; ++i)
      if (m[g + i]) mx = std::max(mx, va(g + i, 0));
    if (!std::isfinite(mx)) continue;
    double z = 0.0;
    for (int i = 0; i < group; ++i) {
      if (m[g + i]) {
        y(g + i, 0) = std::exp(va(g + i, 0) - mx);
        z += y(g + i, 0);
      }
    }
    for (int i = 0; i < group; ++i) y(g + i, 0) /= z;
  }
  return push(std::move(y), {a.id}, [a, group, m = std::move(m)](Tape& t, int self) {
    const Matrix& gy = t.nodes_[self].grad;
    const Matrix& y = t.nodes_[self].value;
    Matrix& ga = t.grad_ref(a);
    for (Eigen::Index g = 0; g < y.rows(); g += group) {
      double dot = 0.0;
      for (int i = 0; i < group; ++i) dot += gy(g + i, 0) * y(g + i, 0);
      for (int i = 0; i < group; ++i) {
        if (m[g + i]) ga(g + i, 0) += y(g + i, 0) * (gy(g + i, 0) - dot);
      }
    }
  });
}

Var Tape::segment_sum(Var a, int group) {
  const auto& va = value(a);
  if (group <= 0 || va.rows() % group != 0) {
    throw std::invalid_argument("segment_sum: rows not divisible by group");
  }
  const Eigen::Index n = va.rows() / group;
  Matrix y = Matrix::Zero(n, va.cols());
  for (Eigen::Index r = 0; r < va.rows(); ++r) y.row(r / group) += va.row(r);
  return push(std::move(y), {a.id}, [a, group](Tape& t, int self) {
    const Matrix& gy = t.nodes_[self].grad;
    Matrix& ga = t.grad_ref(a);
    for (Eigen::Index r = 0; r < ga.rows(); ++r) ga.row(r) += gy.row(r / group);
  });
}

Var Tape::repeat_rows(Var a, int group) {
  const auto& va = value(a);
  if (group <= 0) throw std::invalid_argument("repeat_rows: group must be positive");
  Matrix y(va.rows() * group, va.cols());
  for (Eigen::Index r = 0; r < y.rows(); ++r) y.row(r) = va.row(r / group);
  return push(std::move(y), {a.id}, [a, group](Tape& t, int self) {
    const Matrix& gy = t.nodes_[self].grad;
    Matrix& ga = t.grad_ref(a);
    for (Eigen::Index r = 0; r < gy.rows(); ++r) ga.row(r / group) += gy.row(r);
  });
}

Var Tape::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Eigen::Index rows = value(parts[0]).rows();
  Eigen::Index cols = 0;
  for (Var p : parts) {
    if (value(p).rows() != rows) shape_error("concat_cols", value(parts[0]), value(p));
    cols += value(p).cols();
  }
  Matrix y(rows, cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (Var p : parts) {
    y.middleCols(off, value(p).cols()) = value(p);
    ids.push_back(p.id);
    offsets.push_back(off);
    off += value(p).cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return push(std::move(y), ids, [ps, offsets](Tape& t, int self) {
    const Matrix& gy = t.nodes_[self].grad;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (!t.requires_grad(ps[i])) continue;
      t.grad_ref(ps[i]) += gy.middleCols(offsets[i], t.value(ps[i]).cols());
    }
  });
}

Var Tape::slice_cols(Var a, int start, int count) {
  const auto& va = value(a);
  if (start < 0 || count < 0 || start + count > va.cols()) {
    throw std::invalid_argument("slice_cols: range outside matrix");
  }
  Matrix y = va.middleCols(start, count);
  return push(std::move(y), {a.id}, [a, start, count](Tape& t, int self) {
    t.grad_ref(a).middleCols(start, count) += t.nodes_[self].grad;
  });
}

Var Tape::detach(Var a) { return constant(value(a)); }

Var Tape::add_scalars(std::span<const Var> terms, std::span<const double> weights) {
  if (terms.size() != weights.size()) throw std::invalid_argument("add_scalars: size mismatch");
  Matrix y = Matrix::Zero(1, 1);
  std::vector<int> ids;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    y(0, 0) += weights[i] * scalar(terms[i]);
    ids.push_back(terms[i].id);
  }
  std::vector<Var> ts(terms.begin(), terms.end());
  std::vector<double> ws(weights.begin(), weights.end());
  return push(std::move(y), ids, [ts, ws](Tape& t, int self) {
    const double g = t.nodes_[self].grad(0, 0);
    for (std::size_t i = 0; i < ts.size(); ++i) {
      if (t.requires_grad(ts[i])) t.grad_ref(ts[i])(0, 0) += ws[i] * g;
    }
  });
}

Var Tape::custom(std::vector<Var> inputs, Matrix value, BackwardFn backward) {
  std::vector<int> ids;
  ids.reserve(inputs.size());
  for (Var v : inputs) ids.push_back(v.id);
  return push(std::move(value), std::move(ids), std::move(backward));
}

void Tape::backward(Var output) {
  const auto& out = nodes_.at(output.id);
  if (out.value.rows() != 1 || out.value.cols() != 1) {
    throw std::invalid_argument("Tape::backward: output must be a 1x1 scalar node");
  }
  for (auto& n : nodes_) n.has_grad = false;
  grad_ref(output)(0, 0) = 1.0;
  for (int i = output.id; i >= 0; --i) {
    auto& n = nodes_[i];
    if (n.has_grad && n.backward) n.backward(*this, i);
  }
}

void Tape::collect(const ParamStore& store, GradBuffer& buffer) const {
  if (buffer.size() != store.size()) throw std::invalid_argument("collect: buffer size mismatch");
  for (const auto& n : nodes_) {
    if (n.store == &store && n.has_grad) buffer[n.param_index] += n.grad;
  }
}

void Tape::backward(Var output, ParamStore& store) {
  backward(output);
  GradBuffer buf = store.make_grad_buffer();
  collect(store, buf);
  store.accumulate(buf);
}

}  // namespace flowibr::diff
