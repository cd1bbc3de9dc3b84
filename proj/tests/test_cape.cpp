#include <gtest/gtest.h>

#include <random>

#include "causnvs/cape.hpp"

using namespace causnvs;

namespace {

Pose random_pose(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return Pose{q.toRotationMatrix(), Vec3(n(rng), n(rng), n(rng))};
}

Vec random_vec(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec v(d);
  for (int i = 0; i < d; ++i) v[i] = n(rng);
  return v;
}

// Dense I_{d/4} (x) m built entry by entry.
Eigen::MatrixXd dense_blocks(const Mat4& m, int d) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(d, d);
  for (int b = 0; b < d / 4; ++b) {
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) out(4 * b + r, 4 * b + c) = m(r, c);
    }
  }
  return out;
}

}  // namespace

TEST(Cape, PhiStructure) {
  EXPECT_EQ(phi(Pose::identity(), 8), Eigen::MatrixXd::Identity(8, 8));
  std::mt19937_64 rng(1);
  const Pose p = random_pose(rng);
  EXPECT_EQ(phi(p, 4), Eigen::MatrixXd(p.matrix()));
  const Eigen::MatrixXd m = phi(p, 12);
  EXPECT_EQ(m, dense_blocks(p.matrix(), 12));
  const Vec v = random_vec(12, rng);
  Vec blockwise(12);
  for (int b = 0; b < 3; ++b) blockwise.segment<4>(4 * b) = p.matrix() * v.segment<4>(4 * b);
  EXPECT_LT((m * v - blockwise).norm(), 1e-12);
  EXPECT_THROW(phi(p, 6), std::invalid_argument);
}

TEST(Cape, EncodeKeyAndQuery) {
  std::mt19937_64 rng(2);
  const Vec v = random_vec(16, rng);
  EXPECT_LT((encode_key(v, Pose::identity()) - v).norm(), 1e-15);
  EXPECT_LT((encode_query(v, Pose::identity()) - v).norm(), 1e-15);
  for (int i = 0; i < 20; ++i) {
    const Pose p = random_pose(rng);
    const Vec k = encode_key(v, p);
    EXPECT_LT((k - dense_blocks(p.matrix(), 16) * v).norm(), 1e-12 * (1 + v.norm()));
    EXPECT_LT((encode_key(2.5 * v, p) - 2.5 * k).norm(), 1e-12 * (1 + k.norm()));
    const Mat4 inv_t = p.matrix().inverse().transpose();
    EXPECT_LT((encode_query(v, p) - dense_blocks(inv_t, 16) * v).norm(), 1e-10 * (1 + v.norm()));
    Pose rot_only = p;
    rot_only.translation.setZero();
    EXPECT_LT((encode_query(v, rot_only) - encode_key(v, rot_only)).norm(), 1e-12);
  }
  EXPECT_THROW(encode_key(Vec::Zero(6), Pose::identity()), std::invalid_argument);
}

TEST(Cape, ScoreFactorizationAndInvariance) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 1000; ++i) {
    const Vec q = random_vec(8, rng), k = random_vec(8, rng);
    const Pose pq = random_pose(rng), pk = random_pose(rng);
    const double s = score(q, k, pq, pk);
    const double fact = q.dot(phi(relative(pq, pk), 8) * k);
    EXPECT_LE(std::abs(s - fact), 1e-6 * (1 + std::abs(s)));
    const Eigen::MatrixXd dense = phi(inverse(pq), 8).transpose();  // phi(P^-T) = phi(P^-1)^T
    const double two_sided = (dense * q).dot(phi(pk, 8) * k);
    EXPECT_LE(std::abs(s - two_sided), 1e-9 * (1 + std::abs(s)));
    if (i < 100) {
      const Pose g = random_pose(rng);
      const double sg = score(q, k, compose(g, pq), compose(g, pk));
      EXPECT_LE(std::abs(s - sg), 1e-6 * (1 + std::abs(s)));
    }
  }
  const Vec q = random_vec(8, rng), k = random_vec(8, rng);
  const Pose p = random_pose(rng);
  EXPECT_NEAR(score(q, k, p, p), q.dot(k), 1e-9 * (1 + std::abs(q.dot(k))));
  EXPECT_EQ(score(q, k, p, random_pose(rng), false), q.dot(k));
}

TEST(Cape, RotationSweepIsPeriodic) {
  std::mt19937_64 rng(4);
  const Vec q = random_vec(32, rng), k = random_vec(32, rng);
  SweepSpec spec;
  const SweepCurve c = sweep_analysis(q, k, spec);
  ASSERT_EQ(c.parameters.size(), 721u);
  EXPECT_NEAR(c.scores[0], c.scores[360], 1e-6);
  double max_abs = 0.0;
  for (double s : c.scores) max_abs = std::max(max_abs, std::abs(s));
  EXPECT_LT(rotation_period_error(c), 1e-6 * (1 + max_abs));
  EXPECT_GT(curve_range(c), 1e-3);
  for (std::size_t i = 1; i < c.parameters.size(); ++i) EXPECT_GT(c.parameters[i], c.parameters[i - 1]);
}

TEST(Cape, TranslationSweepIsAffine) {
  std::mt19937_64 rng(5);
  const Vec q = random_vec(32, rng), k = random_vec(32, rng);
  SweepSpec spec;
  spec.mode = SweepMode::Translation;
  spec.axis = Vec3(1, 2, -1);
  spec.start = 0.0;
  spec.stop = 2.0;
  spec.n_samples = 201;
  const SweepCurve c = sweep_analysis(q, k, spec);
  EXPECT_LT(translation_affine_residual(c), 1e-9);
  // samples 0, 50, 100 sit at t = 0, 0.5, 1.0
  EXPECT_NEAR(c.scores[100] - c.scores[0], 2.0 * (c.scores[50] - c.scores[0]), 1e-6);
}

TEST(Cape, DisabledSweepsAreConstant) {
  std::mt19937_64 rng(6);
  const Vec q = random_vec(16, rng), k = random_vec(16, rng);
  for (auto mode : {SweepMode::Rotation, SweepMode::Translation}) {
    SweepSpec spec;
    spec.mode = mode;
    spec.cape_enabled = false;
    if (mode == SweepMode::Translation) spec.stop = 3.0;
    EXPECT_EQ(curve_range(sweep_analysis(q, k, spec)), 0.0);
  }
}

TEST(Cape, SweepErrorsAndCsv) {
  const Vec q = Vec::Ones(8), k = Vec::Ones(8);
  SweepSpec bad;
  bad.axis = Vec3::Zero();
  EXPECT_THROW(sweep_analysis(q, k, bad), std::invalid_argument);
  SweepSpec few;
  few.n_samples = 2;
  EXPECT_THROW(sweep_analysis(q, k, few), std::invalid_argument);
  SweepSpec s;
  s.n_samples = 3;
  s.stop = 10.0;
  const std::string csv = sweep_analysis(q, k, s).to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "angle_deg,score");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}
