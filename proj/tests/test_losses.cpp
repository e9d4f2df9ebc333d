#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ctsfda/losses.hpp"

using namespace ctsfda;

namespace {

TimeSeriesBatch<double> series(std::vector<double> v) {
  const auto n = static_cast<std::int64_t>(v.size());
  return TimeSeriesBatch<double>(Tensor<double>({1, 1, n}, std::move(v)));
}

}  // namespace

TEST(MseLoss, ZeroOnIdentical) {
  std::mt19937_64 rng(1);
  auto x = TimeSeriesBatch<double>(randn<double>({4, 2, 8}, rng));
  EXPECT_EQ(mse_loss(x, x), 0.0);
}

TEST(MseLoss, HandExample) {
  // x=[1,2], x_hat=[0,0] -> (1+4)/2 = 2.5
  EXPECT_DOUBLE_EQ(mse_loss(series({1, 2}), series({0, 0})), 2.5);
}

TEST(MseLoss, QuadraticHomogeneity) {
  auto x = series({1, -2, 3});
  auto y = series({0.5, 0.5, 0.5});
  auto y2 = series({-0.5 + 1, 1.5 * 2 - 2 - 2.5 + 2.5, 3 - 2 * (3 - 0.5)});
  // doubling the error: x_hat' = x + 2*(x_hat - x)
  std::vector<double> doubled(3);
  for (int i = 0; i < 3; ++i)
    doubled[i] = x.values[i] + 2 * (y.values[i] - x.values[i]);
  EXPECT_NEAR(mse_loss(x, series(doubled)), 4 * mse_loss(x, y), 1e-12);
  (void)y2;
}

TEST(MseLoss, Symmetry) {
  std::mt19937_64 rng(2);
  auto a = TimeSeriesBatch<double>(randn<double>({2, 1, 16}, rng));
  auto b = TimeSeriesBatch<double>(randn<double>({2, 1, 16}, rng));
  EXPECT_DOUBLE_EQ(mse_loss(a, b), mse_loss(b, a));
}

TEST(MseLoss, ShapeMismatchRejected) {
  EXPECT_THROW(mse_loss(series({1, 2}), series({1, 2, 3})), ShapeError);
}

TEST(CrossEntropy, UniformLogits) {
  // uniform logits, K=3 -> ln 3
  Tensor<double> logits({2, 3}, {0, 0, 0, 5, 5, 5});
  LabelBatch labels({0, 2}, 3);
  EXPECT_NEAR(cross_entropy_loss(logits, labels), std::log(3.0), 1e-12);
}

TEST(CrossEntropy, PeakedLogitsApproachZero) {
  Tensor<double> logits({1, 3}, {50, 0, 0});
  LabelBatch labels({0}, 3);
  EXPECT_LT(cross_entropy_loss(logits, labels), 1e-12);
}

TEST(CrossEntropy, BatchPermutationInvariant) {
  Tensor<double> a({3, 2}, {1, 0, 0, 2, -1, 1});
  Tensor<double> b({3, 2}, {0, 2, -1, 1, 1, 0});
  EXPECT_NEAR(cross_entropy_loss(a, LabelBatch({0, 1, 1}, 2)),
              cross_entropy_loss(b, LabelBatch({1, 1, 0}, 2)), 1e-12);
}

TEST(CrossEntropy, LabelOutOfRangeRejected) {
  EXPECT_THROW(LabelBatch({0, 5}, 3), InvariantError);
}

TEST(TsallisUR, OneHotIsZero) {
  for (double q : {1.5, 2.0, 3.0}) {
    std::vector<ProbVector<double>> probs{{{1, 0, 0, 0}}};
    EXPECT_NEAR(tsallis_ur_loss(probs, q), 0.0, 1e-12);
  }
}

TEST(TsallisUR, UniformK5Q2) {
  std::vector<ProbVector<double>> probs{{{0.2, 0.2, 0.2, 0.2, 0.2}}};
  EXPECT_NEAR(tsallis_ur_loss(probs, 2.0), 0.8, 1e-12);
}

TEST(TsallisUR, HalfHalfQ2) {
  std::vector<ProbVector<double>> probs{{{0.5, 0.5}}};
  EXPECT_NEAR(tsallis_ur_loss(probs, 2.0), 0.5, 1e-12);
}

TEST(TsallisUR, InvalidSimplexRejected) {
  std::vector<ProbVector<double>> probs{{{0.9, 0.3}}};
  EXPECT_THROW(tsallis_ur_loss(probs, 2.0), InvariantError);
  std::vector<ProbVector<double>> neg{{{1.2, -0.2}}};
  EXPECT_THROW(tsallis_ur_loss(neg, 2.0), InvariantError);
}

TEST(TsallisUR, QMustExceedOne) {
  std::vector<ProbVector<double>> probs{{{0.5, 0.5}}};
  EXPECT_THROW(tsallis_ur_loss(probs, 1.0), ConfigError);
}

TEST(TsallisUR, MaximizedAtUniform) {
  // randomized simplex sampling never exceeds the uniform value
  const int k = 4;
  std::vector<ProbVector<double>> uniform{
      {std::vector<double>(k, 1.0 / k)}};
  const double peak = tsallis_ur_loss(uniform, 2.0);
  std::mt19937_64 rng(3);
  std::exponential_distribution<double> expd(1.0);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> p(k);
    double z = 0;
    for (auto& v : p) {
      v = expd(rng);
      z += v;
    }
    for (auto& v : p) v /= z;
    std::vector<ProbVector<double>> probs{{p}};
    EXPECT_LE(tsallis_ur_loss(probs, 2.0), peak + 1e-12);
  }
}

TEST(OverallLoss, LambdaZeroEqualsMse) {
  auto x = series({1, 2, 3});
  auto xh = series({1.5, 2, 2});
  std::vector<ProbVector<double>> probs{{{0.5, 0.5}}};
  AdaptConfig<double> cfg;
  cfg.lambda = 0;
  EXPECT_DOUBLE_EQ(overall_adapt_loss(x, xh, probs, cfg), mse_loss(x, xh));
}

TEST(OverallLoss, LinearCombination) {
  // mse=2.5, UR=0.5, lambda=0.1 -> 2.55
  auto x = series({1, 2});
  auto xh = series({0, 0});
  std::vector<ProbVector<double>> probs{{{0.5, 0.5}}};
  AdaptConfig<double> cfg;
  cfg.lambda = 0.1;
  cfg.q = 2.0;
  EXPECT_NEAR(overall_adapt_loss(x, xh, probs, cfg), 2.55, 1e-12);
}

TEST(OverallLoss, MonotoneInLambda) {
  auto x = series({1, 2});
  auto xh = series({0, 0});
  std::vector<ProbVector<double>> probs{{{0.5, 0.5}}};
  AdaptConfig<double> lo, hi;
  lo.lambda = 0.1;
  hi.lambda = 0.5;
  EXPECT_LT(overall_adapt_loss(x, xh, probs, lo),
            overall_adapt_loss(x, xh, probs, hi));
}
