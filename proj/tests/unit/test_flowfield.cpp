#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <numbers>
#include <random>

#include "flowibr/flowfield.hpp"
#include "test_support.hpp"

using namespace flowibr;
using flowibr::testing::random_field;

namespace {

FlowField constant_field(const Vec3& f, const Vec3& b, int frames = 12) {
  FlowFieldConfig cfg;
  cfg.num_frames = frames;
  cfg.width = 8;
  cfg.encoding.frequencies = 2;
  FlowField field(cfg, 1);
  field.set_constant(f, b);
  return field;
}

// Independent re-statement of the recursion: a plain loop over displace().
Vec3 brute_force(const FlowField& field, const Vec3& p, double t_from, int t_to) {
  Vec3 q = p;
  double t = t_from;
  if (std::floor(t) != t) {
    const double s = t;
    if (t_to > t) {
      const double delta = std::ceil(s) - s;
      q = q + Vec3(delta * eval_flow(field, q, s).forward);
      t = std::ceil(s);
    } else {
      const double delta = s - std::floor(s);
      q = q + Vec3(delta * eval_flow(field, q, s).backward);
      t = std::floor(s);
    }
  }
  int frame = static_cast<int>(t);
  while (frame < t_to) q = displace(field, q, frame++, Direction::kForward);
  while (frame > t_to) q = displace(field, q, frame--, Direction::kBackward);
  return q - p;
}

bool bitwise_equal(const Vec3& a, const Vec3& b) {
  for (int i = 0; i < 3; ++i) {
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  }
  return true;
}

}  // namespace

TEST(Encode, ZeroPointHasUnitCosines) {
  const EncodingConfig cfg{2};
  const Eigen::VectorXd e = encode(Vec3::Zero(), 0.5, cfg);
  ASSERT_EQ(e.size(), 16);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(e(i), 0.0);
  for (int k = 0; k < 2; ++k) {
    for (int i = 0; i < 3; ++i) {
      EXPECT_EQ(e(3 + 6 * k + i), 0.0);      // sin
      EXPECT_EQ(e(3 + 6 * k + 3 + i), 1.0);  // cos
    }
  }
  EXPECT_EQ(e(15), 0.5);
}

TEST(Encode, NoFrequenciesIsPointAndTime) {
  const Eigen::VectorXd e = encode(Vec3(1, 2, 3), 0.25, EncodingConfig{0});
  ASSERT_EQ(e.size(), 4);
  EXPECT_EQ(e, Eigen::Vector4d(1, 2, 3, 0.25));
}

TEST(Encode, UnitXAtOneFrequency) {
  const Eigen::VectorXd e = encode(Vec3(1, 0, 0), 0.0, EncodingConfig{1});
  EXPECT_NEAR(e(3), 0.0, 1e-15);
  EXPECT_EQ(e(6), -1.0);
}

TEST(Encode, LengthFormula) {
  for (int l : {0, 1, 2, 10}) {
    const EncodingConfig cfg{l};
    EXPECT_EQ(encoded_size(cfg), 3 * (2 * l + 1) + 1);
    EXPECT_EQ(encode(Vec3(0.3, -0.2, 1.1), 0.4, cfg).size(), encoded_size(cfg));
  }
}

TEST(Encode, TapeVersionMatchesValues) {
  diff::Tape tape;
  diff::Matrix pts(2, 3);
  pts << 0.1, -0.7, 2.3, 1.2, 0.4, -0.9;
  const EncodingConfig cfg{3};
  const diff::Matrix e = tape.value(encode(tape, tape.constant(pts), 0.6, cfg));
  for (int r = 0; r < 2; ++r) {
    const Eigen::VectorXd v = encode(pts.row(r).transpose(), 0.6, cfg);
    for (int c = 0; c < v.size(); ++c) EXPECT_NEAR(e(r, c), v(c), 1e-15);
  }
}

TEST(FlowField, ZeroInitializedOutput) {
  FlowFieldConfig cfg;
  cfg.num_frames = 5;
  const FlowField field(cfg, 3);
  const FlowPair f = field.eval(Vec3(0.3, 1.2, -2.0), 2.0);
  EXPECT_EQ(f.forward, Vec3::Zero());
  EXPECT_EQ(f.backward, Vec3::Zero());
}

TEST(FlowField, SameSeedSameOutput) {
  const FlowField a = random_field(9, 6);
  const FlowField b = random_field(9, 6);
  const Vec3 p(0.2, -0.3, 2.5);
  EXPECT_TRUE(bitwise_equal(a.eval(p, 3.0).forward, b.eval(p, 3.0).forward));
  FlowFieldConfig cfg;
  cfg.num_frames = 4;
  EXPECT_TRUE(FlowField(cfg, 5).params().bitwise_equal(FlowField(cfg, 5).params()));
  EXPECT_FALSE(FlowField(cfg, 5).params().bitwise_equal(FlowField(cfg, 6).params()));
}

TEST(FlowField, RejectsShallowNetworks) {
  FlowFieldConfig cfg;
  cfg.depth = 3;
  EXPECT_THROW(FlowField(cfg, 0), std::invalid_argument);
}

TEST(FlowField, BatchAndTapeAgreeWithPointEval) {
  const FlowField field = random_field(4, 8, 3, 16);
  diff::Matrix pts(3, 3);
  pts << 0.1, 0.2, 2.0, -0.5, 0.3, 3.1, 1.0, -1.0, 4.0;
  const diff::Matrix batch = field.eval_batch(pts, 5.0);
  diff::Tape tape;
  const auto bound = field.bind(tape);
  const diff::Matrix taped = tape.value(field.eval(tape, bound, tape.constant(pts), 5.0));
  for (int r = 0; r < 3; ++r) {
    const FlowPair f = field.eval(pts.row(r).transpose(), 5.0);
    for (int c = 0; c < 3; ++c) {
      EXPECT_NEAR(batch(r, c), f.forward(c), 1e-12);
      EXPECT_NEAR(batch(r, 3 + c), f.backward(c), 1e-12);
      EXPECT_NEAR(taped(r, c), f.forward(c), 1e-12);
    }
  }
}

TEST(FlowField, SquaredForwardNormGradientMatchesDifferences) {
  FlowField field = random_field(21, 6, 2, 8);
  diff::Matrix pts(4, 3);
  pts << 0.1, 0.2, 2.0, -0.5, 0.3, 3.1, 1.0, -1.0, 4.0, 0.0, 0.5, 2.5;
  const auto r = flowibr::testing::check_gradient(field.params(), [&](diff::Tape& t) {
    const auto b = field.bind(t);
    return t.sum(t.square(t.slice_cols(field.eval(t, b, t.constant(pts), 3.0), 0, 3)));
  });
  EXPECT_GT(r.checked, 100u);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Displace, ZeroAndConstantFields) {
  FlowFieldConfig cfg;
  cfg.num_frames = 4;
  const FlowField zero(cfg, 0);
  const Vec3 p(1, 2, 3);
  EXPECT_EQ(displace(zero, p, 2, Direction::kForward), p);
  const FlowField c = constant_field(Vec3(1, 0, 0), Vec3(-1, 0, 0));
  EXPECT_EQ(displace(c, p, 2, Direction::kForward), Vec3(2, 2, 3));
  EXPECT_EQ(displace(c, displace(c, p, 2, Direction::kForward), 3, Direction::kBackward), p);
}

TEST(ContinuousTime, NeighboursAndDeltas) {
  const TimeNeighbors n = time_neighbors(1.5, 1.0);
  EXPECT_EQ(n.backward_frame, 1);
  EXPECT_EQ(n.forward_frame, 2);
  EXPECT_EQ(n.delta_b, 0.5);
  EXPECT_EQ(n.delta_f, 0.5);
  const TimeNeighbors m = time_neighbors(6.0, 2.0);
  EXPECT_EQ(m.forward_frame, 3);
  EXPECT_EQ(m.delta_f, 0.0);
}

TEST(ContinuousTime, IntegerTimeGivesNoDisplacement) {
  const FlowField c = constant_field(Vec3(0.3, 0.1, 0), Vec3(0, 0, 0.2));
  EXPECT_EQ(continuous_time_step(c, Vec3(1, 1, 1), 4.0, 1.0, Direction::kForward), Vec3::Zero());
}

TEST(ContinuousTime, QuarterStepScalesForwardFlow) {
  const Vec3 s(0.4, -0.8, 1.2);
  const FlowField c = constant_field(s, Vec3::Zero());
  EXPECT_TRUE(continuous_time_step(c, Vec3::Zero(), 0.25, 1.0, Direction::kForward).isApprox(0.75 * s, 1e-15));
}

TEST(Compose, SameFrameIsExactlyZero) {
  const FlowField f = random_field(2, 10);
  EXPECT_EQ(compose_flow(f, Vec3(0.3, 0.2, 2.0), 4.0, 4), Vec3::Zero());
}

TEST(Compose, ConstantFlowThreeSteps) {
  const Vec3 s(0.125, -0.25, 0.5);
  const FlowField c = constant_field(s, -s);
  EXPECT_EQ(compose_flow(c, Vec3(0.5, 0.5, 2.0), 2.0, 5), 3.0 * s);
  EXPECT_EQ(compose_flow(c, Vec3(0.5, 0.5, 2.0), 5.0, 2), -3.0 * s);
}

TEST(Compose, SingleStepEqualsDisplace) {
  const FlowField f = random_field(8, 10);
  const Vec3 p(0.3, -0.4, 2.2);
  EXPECT_TRUE(bitwise_equal(compose_flow(f, p, 3.0, 4) + p, displace(f, p, 3.0, Direction::kForward)));
}

TEST(Compose, OutOfRangeTargetsThrow) {
  const FlowField f = random_field(8, 10);
  EXPECT_THROW(compose_flow(f, Vec3::Zero(), 3.0, 0), std::out_of_range);
  EXPECT_THROW(compose_flow(f, Vec3::Zero(), 3.0, 11), std::out_of_range);
  EXPECT_THROW(compose_flow(f, Vec3::Zero(), 1.0, 7), std::out_of_range);
}

TEST(Compose, MatchesBruteForceBitwise) {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const FlowField f = random_field(1000 + trial, 12, 1 + trial % 3, 8, 0.2);
    const Vec3 p(u(rng), u(rng), 3.0 + u(rng));
    const int from = 1 + static_cast<int>(rng() % 12);
    const int lo = std::max(1, from - 5), hi = std::min(12, from + 5);
    const int to = lo + static_cast<int>(rng() % (hi - lo + 1));
    const double t_from = trial % 4 == 3 && from < 12 ? from + 0.37 : from;
    if (std::abs(to - t_from) > 5) continue;
    EXPECT_TRUE(bitwise_equal(compose_flow(f, p, t_from, to), brute_force(f, p, t_from, to)))
        << "trial " << trial;
  }
}

TEST(Compose, ContinuousTimeConvergesToFrames) {
  const FlowField f = random_field(5, 12, 2, 8, 0.2);
  const Vec3 p(0.2, 0.1, 2.7);
  for (int to : {2, 4, 7}) {
    const Vec3 exact = compose_flow(f, p, 4.0, to);
    for (double eps : {1e-3, 1e-6}) {
      for (double t : {4.0 - eps, 4.0 + eps}) {
        if (std::abs(to - t) > 5) continue;
        EXPECT_LT((compose_flow(f, p, t, to) - exact).norm(), 50 * eps) << "to " << to << " t " << t;
      }
    }
  }
}

TEST(BendSamples, TapeMatchesValuePath) {
  const FlowField f = random_field(12, 12, 2, 8, 0.2);
  diff::Matrix pts(2, 3);
  pts << 0.1, 0.2, 2.5, -0.3, 0.4, 3.0;
  const std::vector<int> targets = {3, 5, 6, 9};
  for (double t : {6.0, 5.4}) {
    diff::Tape tape;
    const auto bound = f.bind(tape);
    const BentSamples b = bend_samples(tape, f, bound, tape.constant(pts), t, targets);
    for (int target : targets) {
      const diff::Matrix& m = tape.value(b.positions.at(target));
      for (int r = 0; r < 2; ++r) {
        const Vec3 want = bend_point(f, pts.row(r).transpose(), t, target);
        EXPECT_LT((m.row(r).transpose() - want).norm(), 1e-12);
      }
    }
  }
}
