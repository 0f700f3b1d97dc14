#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "midalign/objectives.hpp"
#include "oracles.hpp"

namespace {

using namespace midalign;

Matrix<double> gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Matrix<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

std::vector<PooledEmbedding<double>> as_pooled(const Matrix<double>& m) {
  std::vector<PooledEmbedding<double>> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) out[static_cast<std::size_t>(i)].vector = m.row(i);
  return out;
}

corpus::TaskExample example(std::vector<TokenId> prompt, std::vector<TokenId> target) {
  corpus::TaskExample ex;
  ex.prompt_tokens = std::move(prompt);
  ex.target_tokens = std::move(target);
  ex.loss_mask.assign(ex.prompt_tokens.size(), false);
  ex.loss_mask.resize(ex.prompt_tokens.size() + ex.target_tokens.size(), true);
  return ex;
}

TEST(AlignmentLoss, SinglePairIsZero) {
  std::mt19937_64 rng(1);
  const auto s = gaussian(1, 8, rng), t = gaussian(1, 8, rng);
  EXPECT_EQ(objectives::alignment_loss(as_pooled(s), as_pooled(t), 0.1), 0.0);
}

TEST(AlignmentLoss, SymmetricTiesGiveLogTwo) {
  // cos(s1, t1) = cos(s1, t2) and cos(s2, t2) = cos(s2, t1).
  Matrix<double> s(2, 2), t(2, 2);
  s << 1.0, 0.0, 0.0, 1.0;
  t << 1.0, 1.0, 1.0, 1.0;
  for (double tau : {0.1, 1.0, 2.0}) {
    EXPECT_NEAR(objectives::alignment_loss(as_pooled(s), as_pooled(t), tau), std::log(2.0), 1e-15);
  }
}

TEST(AlignmentLoss, MatchesBruteForceOracle) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto s = gaussian(8, 16, rng), t = gaussian(8, 16, rng);
    const double got = objectives::alignment_loss(as_pooled(s), as_pooled(t), 0.1);
    const double want = oracle::alignment_loss(s, t, 0.1);
    EXPECT_NEAR(got, want, 1e-8 * std::max(1.0, std::abs(want)));
  }
}

TEST(AlignmentLoss, SymmetricVariantAveragesBothDirections) {
  std::mt19937_64 rng(3);
  const auto s = gaussian(6, 5, rng), t = gaussian(6, 5, rng);
  const double both = objectives::alignment_loss(as_pooled(s), as_pooled(t), 0.5, true);
  const double expected = 0.5 * (oracle::alignment_loss(s, t, 0.5) + oracle::alignment_loss(t, s, 0.5));
  EXPECT_NEAR(both, expected, 1e-12);
  EXPECT_NE(objectives::alignment_loss(as_pooled(s), as_pooled(t), 0.5), both);
}

TEST(AlignmentLoss, ZeroVectorAndBadTemperature) {
  Matrix<double> s = Matrix<double>::Ones(2, 3), t = Matrix<double>::Ones(2, 3);
  s.row(1).setZero();
  EXPECT_THROW(objectives::alignment_loss(as_pooled(s), as_pooled(t), 0.1), NumericError);
  EXPECT_THROW(objectives::alignment_loss(as_pooled(t), as_pooled(t), 0.0), ConfigError);
}

TEST(TaskLoss, UniformLogitsGiveLogV) {
  const auto ex = example({1, 10, 11, 3}, {5, 12, 2});
  for (int v : {16, 64, 300}) {
    const Matrix<double> logits = Matrix<double>::Constant(7, v, 0.37);
    EXPECT_NEAR(objectives::task_loss(logits, ex), std::log(static_cast<double>(v)), 1e-12);
  }
}

TEST(TaskLoss, ConfidentGoldIsNearZero) {
  const auto ex = example({1, 10, 11, 3}, {5, 12, 2});
  const auto seq = ex.sequence();
  Matrix<double> logits = Matrix<double>::Zero(static_cast<Eigen::Index>(seq.size()), 20);
  for (std::size_t p = 1; p < seq.size(); ++p) logits(static_cast<Eigen::Index>(p - 1), seq[p]) = 20.0;
  EXPECT_LT(objectives::task_loss(logits, ex), 1e-3);
}

TEST(TaskLoss, OnlyTargetPositionsCount) {
  const auto ex = example({1, 10, 11, 3}, {4});
  std::mt19937_64 rng(5);
  Matrix<double> logits = gaussian(5, 12, rng);
  const double before = objectives::task_loss(logits, ex);
  logits.topRows(3).setConstant(50.0);
  logits.row(4).setConstant(-50.0);
  EXPECT_EQ(objectives::task_loss(logits, ex), before);
}

TEST(TaskLoss, MatchesLogSoftmaxOracle) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<TokenId> tok(5, 39);
  std::uniform_int_distribution<int> len(1, 6);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<TokenId> prompt{1}, target;
    for (int i = len(rng); i > 0; --i) prompt.push_back(tok(rng));
    prompt.push_back(3);
    for (int i = len(rng); i > 0; --i) target.push_back(tok(rng));
    const auto ex = example(prompt, target);
    Matrix<double> logits = 3.0 * gaussian(static_cast<Eigen::Index>(prompt.size() + target.size()), 40, rng);
    const double want = oracle::task_loss(logits, ex);
    EXPECT_NEAR(objectives::task_loss(logits, ex), want, 1e-10 * std::max(1.0, want));
  }
}

TEST(TaskLoss, EmptyTargetIsAnInputError) {
  const auto ex = example({1, 10, 3}, {});
  EXPECT_THROW(objectives::task_loss(Matrix<double>::Zero(3, 8), ex), InputError);
}

TEST(LearningRate, WarmupJunctionAndDecay) {
  const double peak = 5e-4, w = 40.0;
  EXPECT_DOUBLE_EQ(objectives::lr_at(40, peak, w), peak);
  EXPECT_DOUBLE_EQ(objectives::lr_at(160, peak, w), peak / 2.0);
  EXPECT_DOUBLE_EQ(objectives::lr_at(20, peak, w), peak / 2.0);
  EXPECT_NEAR(objectives::lr_at(41, peak, w), peak, peak * 0.02);
  for (long s = 1; s < 400; ++s) {
    if (s < 40) {
      EXPECT_LT(objectives::lr_at(s, peak, w), objectives::lr_at(s + 1, peak, w));
    } else {
      EXPECT_GT(objectives::lr_at(s, peak, w), objectives::lr_at(s + 1, peak, w));
    }
  }
}

}  // namespace
