#pragma once

// Matrix-valued reverse-mode differentiation.
//
// Every node on a Tape holds a dense row-major matrix; rows are batch items
// (rays, samples) and columns are features. Operations are recorded in
// creation order, which is a topological order, and `backward` walks it in
// reverse exactly once.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace flowibr::diff {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using GradBuffer = std::vector<Matrix>;

class ParamStore {
 public:
  struct Entry {
    std::string name;
    Matrix value;
    Matrix grad;
    Matrix adam_m;
    Matrix adam_v;
  };

  std::size_t add(std::string name, Matrix init);

  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  [[nodiscard]] const Entry& operator[](std::size_t i) const { return entries_.at(i); }
  Entry& operator[](std::size_t i) { return entries_.at(i); }
  [[nodiscard]] std::size_t find(const std::string& name) const;
  [[nodiscard]] std::size_t num_scalars() const;

  [[nodiscard]] std::uint64_t step() const { return step_; }
  void set_step(std::uint64_t s) { step_ = s; }
  void advance_step() { ++step_; }

  void zero_grad();
  [[nodiscard]] GradBuffer make_grad_buffer() const;
  /// grad += buffer, shape-checked.
  void accumulate(const GradBuffer& buffer);

  /// Flat copies in declaration order (used by finite-difference checks).
  [[nodiscard]] std::vector<double> flat_values() const;
  [[nodiscard]] std::vector<double> flat_grads() const;
  void set_flat_values(std::span<const double> values);

  [[nodiscard]] bool bitwise_equal(const ParamStore& other) const;

 private:
  std::vector<Entry> entries_;
  std::uint64_t step_ = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam update using the accumulated grads, then zeroes them.
void adam_step(ParamStore& store, const AdamConfig& config);

/// Sums `src` into `dst` entry by entry.
void add_into(GradBuffer& dst, const GradBuffer& src);

struct Var {
  int id = -1;
  [[nodiscard]] bool valid() const { return id >= 0; }
};

class Tape {
 public:
  /// Backward hook: read grad(self) and add into the grads of the inputs.
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves.
  Var constant(Matrix value);
  Var constant_scalar(double v);
  /// A differentiable input whose gradient can be read after backward.
  Var input(Matrix value);
  /// A parameter leaf; its gradient is harvested with `collect`.
  Var param(const ParamStore& store, std::size_t index);

  [[nodiscard]] const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  [[nodiscard]] double scalar(Var v) const;
  /// Gradient of the last backward output w.r.t. v (zeros if untouched).
  [[nodiscard]] Matrix grad(Var v) const;
  [[nodiscard]] Eigen::Index rows(Var v) const { return value(v).rows(); }
  [[nodiscard]] Eigen::Index cols(Var v) const { return value(v).cols(); }
  [[nodiscard]] bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  // Dense ops. x: n x in, W: out x in, b: 1 x out -> n x out.
  Var affine(Var x, Var w, Var b);
  Var relu(Var a);
  Var sin(Var a);
  Var cos(Var a);
  Var exp(Var a);
  Var abs(Var a);
  Var square(Var a);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  /// Rows of a (n x c) scaled by the column vector s (n x 1).
  Var mul_col(Var a, Var s);
  Var mul_const(Var a, const Matrix& c);
  Var add_const(Var a, const Matrix& c);
  /// Sum of all entries -> 1 x 1.
  Var sum(Var a);
  /// Per-row sum -> n x 1.
  Var row_sum(Var a);
  /// Row-wise softmax over columns.
  Var softmax(Var a);
  /// Softmax of an n x 1 column within consecutive groups of `group` rows,
  /// restricted to rows with mask != 0. Masked rows get weight 0; a group with
  /// no unmasked row is all zeros.
  Var segment_softmax(Var a, int group, std::span<const std::uint8_t> mask);
  /// Sums consecutive groups of `group` rows -> (n / group) x c.
  Var segment_sum(Var a, int group);
  /// Repeats each row `group` times -> (n * group) x c.
  Var repeat_rows(Var a, int group);
  Var concat_cols(std::span<const Var> parts);
  Var slice_cols(Var a, int start, int count);
  /// Copy of the value with no gradient path.
  Var detach(Var a);
  Var add_scalars(std::span<const Var> terms, std::span<const double> weights);

  /// Records an op with a user-supplied backward.
  Var custom(std::vector<Var> inputs, Matrix value, BackwardFn backward);

  /// Access for custom backward hooks.
  [[nodiscard]] const Matrix& node_grad(int id) const { return nodes_[id].grad; }
  [[nodiscard]] bool node_has_grad(int id) const { return nodes_[id].has_grad; }
  Matrix& grad_ref(Var v);

  /// Reverse sweep from a 1 x 1 node. Clears previous gradients first.
  void backward(Var output);
  /// Adds gradients of all param leaves that reference `store` into `buffer`.
  void collect(const ParamStore& store, GradBuffer& buffer) const;
  /// backward + collect into store.grad.
  void backward(Var output, ParamStore& store);

  /// Hash of every non-smooth branch taken (ReLU signs, |x| signs, custom
  /// notes). Two evaluations with the same signature lie on the same smooth
  /// piece, which is what finite-difference checks need.
  [[nodiscard]] std::uint64_t kink_signature() const { return kink_hash_; }
  void note_kink(std::uint64_t bits);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<int> inputs;
    BackwardFn backward;
    const ParamStore* store = nullptr;
    std::size_t param_index = 0;
  };

  Var push(Matrix value, std::vector<int> inputs, BackwardFn backward);
  void need_same_shape(Var a, Var b, const char* op) const;

  std::vector<Node> nodes_;
  std::uint64_t kink_hash_ = 0xcbf29ce484222325ULL;
};

}  // namespace flowibr::diff
