#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "chainfl/fl_task.hpp"
#include "chainfl/model_math.hpp"
#include "chainfl/rng.hpp"
#include "test_support.hpp"

namespace chainfl {
namespace {

using testing::random_classification;
using testing::random_regression;
using testing::random_vector;
using testing::throws_code;

// Independent loss oracles, written without the library's helpers.
double oracle_squared(const std::vector<double>& w, const LabeledDataset& data) {
  double total = 0.0;
  for (const auto& s : data) {
    double pred = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) pred += w[i] * s.x[i];
    total += (pred - s.y) * (pred - s.y);
  }
  return total / static_cast<double>(data.size());
}

double oracle_cross_entropy(const std::vector<double>& w, const LabeledDataset& data) {
  const std::size_t d = data.feature_dim();
  const std::size_t k = w.size() / (d + 1);
  double total = 0.0;
  for (const auto& s : data) {
    std::vector<double> z(k);
    for (std::size_t c = 0; c < k; ++c) {
      z[c] = w[c * (d + 1) + d];
      for (std::size_t i = 0; i < d; ++i) z[c] += w[c * (d + 1) + i] * s.x[i];
    }
    double denom = 0.0;
    for (double v : z) denom += std::exp(v);
    total += -std::log(std::exp(z[static_cast<std::size_t>(s.y)]) / denom);
  }
  return total / static_cast<double>(data.size());
}

double oracle_loss(const std::vector<double>& w, const LabeledDataset& data, LossKind kind) {
  return kind == LossKind::squared ? oracle_squared(w, data) : oracle_cross_entropy(w, data);
}

std::size_t oracle_argmax(const std::vector<double>& w, const std::vector<double>& x) {
  const std::size_t d = x.size();
  const std::size_t k = w.size() / (d + 1);
  std::size_t best = 0;
  double best_z = -INFINITY;
  for (std::size_t c = 0; c < k; ++c) {
    double z = w[c * (d + 1) + d];
    for (std::size_t i = 0; i < d; ++i) z += w[c * (d + 1) + i] * x[i];
    if (z > best_z) {
      best_z = z;
      best = c;
    }
  }
  return best;
}

TEST(SgdStep, HalfSquareLossStepsToPointNine) {
  // (x w - y)^2 with x = sqrt(1/2), y = 0 is exactly w^2 / 2.
  const LabeledDataset batch({Sample{{std::sqrt(0.5)}, 0.0}});
  const ParamVector out = sgd_step(ParamVector{1.0}, batch, 0.1, LossKind::squared);
  EXPECT_NEAR(out[0], 0.9, 1e-15);
}

TEST(SgdStep, ZeroRateLeavesModelUnchanged) {
  std::mt19937_64 rng(3);
  const auto data = random_regression(rng, 7, 4);
  const ParamVector w(random_vector(rng, 4));
  EXPECT_EQ(sgd_step(w, data, 0.0, LossKind::squared), w);
}

TEST(SgdStep, TwoSampleRegressionHandGradient) {
  const LabeledDataset batch({Sample{{1.0}, 2.0}, Sample{{2.0}, 4.0}});
  // mean(2(wx - y)x) at w = 0 is (-4 - 16) / 2 = -10.
  const double expected = 0.0 - 0.1 * -10.0;
  const ParamVector out = sgd_step(ParamVector{0.0}, batch, 0.1, LossKind::squared);
  EXPECT_NEAR(out[0], expected, 1e-14);
}

TEST(SgdStep, InputIsNotModified) {
  const ParamVector w{0.5, -0.25};
  const ParamVector copy = w;
  const LabeledDataset batch({Sample{{1.0, 2.0}, 3.0}});
  (void)sgd_step(w, batch, 0.2, LossKind::squared);
  EXPECT_EQ(w, copy);
}

TEST(SgdStep, OverflowIsRejected) {
  const LabeledDataset batch({Sample{{1e200}, 0.0}});
  EXPECT_TRUE(throws_code([&] { (void)sgd_step(ParamVector{1e200}, batch, 1.0, LossKind::squared); },
                          errc::numeric_overflow));
}

TEST(SgdStep, EmptyBatchAndShapeErrors) {
  EXPECT_TRUE(throws_code([] { (void)sgd_step(ParamVector{1.0}, LabeledDataset{}, 0.1, LossKind::squared); },
                          errc::validation));
  const LabeledDataset batch({Sample{{1.0, 2.0}, 0.0}});
  EXPECT_TRUE(throws_code([&] { (void)sgd_step(ParamVector{1.0}, batch, 0.1, LossKind::squared); },
                          errc::shape_mismatch));
}

TEST(SgdStep, GradientMatchesCentralDifferences) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> dim(1, 6);
  std::uniform_int_distribution<int> count(1, 12);
  const double h = 1e-5;
  for (int trial = 0; trial < 200; ++trial) {
    const LossKind kind = trial % 2 == 0 ? LossKind::squared : LossKind::cross_entropy;
    const auto d = static_cast<std::size_t>(dim(rng));
    const auto n = static_cast<std::size_t>(count(rng));
    const std::size_t k = 2 + static_cast<std::size_t>(trial % 3);
    const LabeledDataset data = kind == LossKind::squared ? random_regression(rng, n, d)
                                                          : random_classification(rng, n, d, k);
    const std::size_t p = kind == LossKind::squared ? d : k * (d + 1);
    std::vector<double> w = random_vector(rng, p, 0.5);

    // sgd_step with mu = 1 returns w - grad.
    const ParamVector stepped = sgd_step(ParamVector(w), data, 1.0, kind);
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < p; ++i) {
      auto plus = w;
      auto minus = w;
      plus[i] += h;
      minus[i] -= h;
      const double fd = (oracle_loss(plus, data, kind) - oracle_loss(minus, data, kind)) / (2 * h);
      const double analytic = w[i] - stepped[i];
      num += (analytic - fd) * (analytic - fd);
      den += fd * fd;
    }
    const double rel = std::sqrt(num) / std::max(std::sqrt(den), 1e-8);
    EXPECT_LE(rel, 1e-4) << "trial " << trial;
  }
}

TEST(LocalTrain, SingleFullBatchEpochEqualsOneStep) {
  std::mt19937_64 data_rng(5);
  const auto data = random_regression(data_rng, 9, 3);
  const ParamVector w0(random_vector(data_rng, 3));
  Rng rng(17);
  const HyperParams hp{0.05, 1, static_cast<int>(data.size())};
  const ParamVector trained = local_train(w0, data, hp, LossKind::squared, rng);
  const ParamVector once = sgd_step(w0, data, 0.05, LossKind::squared);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(trained[i], once[i], 1e-14);
}

TEST(LocalTrain, ReplayIsBitIdentical) {
  std::mt19937_64 data_rng(8);
  const auto data = random_classification(data_rng, 33, 4, 3);
  const ParamVector w0(15, 0.0);
  const HyperParams hp{0.1, 4, 7};
  Rng a(99);
  Rng b(99);
  const ParamVector x = local_train(w0, data, hp, LossKind::cross_entropy, a);
  const ParamVector y = local_train(w0, data, hp, LossKind::cross_entropy, b);
  ASSERT_EQ(x.dim(), y.dim());
  EXPECT_EQ(std::memcmp(x.raw().data(), y.raw().data(), x.dim() * sizeof(double)), 0);
}

TEST(LocalTrain, ShortTrailingBatchIsTrained) {
  // 3 samples with B = 2 gives two steps per epoch; dropping the tail would
  // leave the third sample's target untouched.
  const LabeledDataset data({Sample{{1.0}, 1.0}, Sample{{1.0}, 1.0}, Sample{{1.0}, 1.0}});
  Rng rng(1);
  const ParamVector out = local_train(ParamVector{0.0}, data, HyperParams{0.25, 1, 2}, LossKind::squared, rng);
  // Each step on target 1 maps w -> w + 0.5 (1 - w).
  EXPECT_NEAR(out[0], 0.75, 1e-15);
}

TEST(LocalTrain, ReachesClosedFormOptimumOnSyntheticRegression) {
  const auto task = generate_synthetic_regression(21, 3, 20, 5, 0.0);
  const ParamVector opt = closed_form_optimum(task.pooled);
  Rng rng(4);
  const ParamVector w = local_train(ParamVector(5, 0.0), task.pooled, HyperParams{0.05, 50, 10}, LossKind::squared, rng);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(w[i], opt[i], 1e-3);
}

TEST(LocalTrain, RejectsBadHyperParams) {
  const LabeledDataset data({Sample{{1.0}, 1.0}});
  Rng rng(1);
  EXPECT_TRUE(throws_code([&] { (void)local_train(ParamVector{0.0}, data, HyperParams{0.1, 0, 1}, LossKind::squared, rng); },
                          errc::config));
  EXPECT_TRUE(throws_code([&] { (void)local_train(ParamVector{0.0}, LabeledDataset{}, HyperParams{}, LossKind::squared, rng); },
                          errc::validation));
}

TEST(WeightedAggregate, SpecExamples) {
  const std::vector<WeightedModel> sym{{ParamVector{1.0, 0.0}, 2}, {ParamVector{0.0, 1.0}, 2}};
  EXPECT_EQ(weighted_aggregate(sym), (ParamVector{0.5, 0.5}));
  const std::vector<WeightedModel> single{{ParamVector{3.0, 3.0}, 5}};
  EXPECT_EQ(weighted_aggregate(single), (ParamVector{3.0, 3.0}));
  const std::vector<WeightedModel> skew{{ParamVector{2.0, 2.0}, 1}, {ParamVector{0.0, 0.0}, 3}};
  // (1*2 + 3*0) / 4
  EXPECT_EQ(weighted_aggregate(skew), (ParamVector{0.5, 0.5}));
}

TEST(WeightedAggregate, Errors) {
  EXPECT_TRUE(throws_code([] { (void)weighted_aggregate(std::vector<WeightedModel>{}); }, errc::aggregation_empty));
  const std::vector<WeightedModel> mixed{{ParamVector{1.0}, 1}, {ParamVector{1.0, 2.0}, 1}};
  EXPECT_TRUE(throws_code([&] { (void)weighted_aggregate(mixed); }, errc::shape_mismatch));
  const std::vector<WeightedModel> nan{{ParamVector{std::nan("")}, 1}};
  EXPECT_TRUE(throws_code([&] { (void)weighted_aggregate(nan); }, errc::numeric_overflow));
}

TEST(WeightedAggregate, FuzzedProperties) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> count(1, 8);
  std::uniform_int_distribution<int> dim(1, 10);
  std::uniform_int_distribution<std::uint64_t> weight(1, 500);
  for (int trial = 0; trial < 500; ++trial) {
    const auto n = static_cast<std::size_t>(count(rng));
    const auto d = static_cast<std::size_t>(dim(rng));
    std::vector<WeightedModel> models;
    std::vector<ParamVector> plain;
    for (std::size_t j = 0; j < n; ++j) {
      models.push_back({ParamVector(random_vector(rng, d, 3.0)), weight(rng)});
      plain.push_back(models.back().params);
    }
    const ParamVector out = weighted_aggregate(models);

    // Convex hull, coordinatewise.
    for (std::size_t k = 0; k < d; ++k) {
      double lo = INFINITY;
      double hi = -INFINITY;
      for (const auto& m : models) {
        lo = std::min(lo, m.params[k]);
        hi = std::max(hi, m.params[k]);
      }
      EXPECT_GE(out[k], lo - 1e-12);
      EXPECT_LE(out[k], hi + 1e-12);
    }

    // Permutation invariance.
    auto shuffled = models;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const ParamVector perm = weighted_aggregate(shuffled);
    for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(perm[k], out[k], 1e-12);

    // Equal weights agree with the uniform mean.
    auto equal = models;
    for (auto& m : equal) m.weight = 7;
    const ParamVector a = weighted_aggregate(equal);
    const ParamVector b = uniform_aggregate(plain);
    for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
  }
}

TEST(UniformAggregate, SpecExamples) {
  EXPECT_EQ(uniform_aggregate(std::vector<ParamVector>{{1.0, 0.0}, {0.0, 1.0}}), (ParamVector{0.5, 0.5}));
  EXPECT_EQ(uniform_aggregate(std::vector<ParamVector>{{-2.5, 7.0}}), (ParamVector{-2.5, 7.0}));
  EXPECT_EQ(uniform_aggregate(std::vector<ParamVector>{{1.0, 2.0}, {3.0, 4.0}, {5.0, 6.0}}), (ParamVector{3.0, 4.0}));
  EXPECT_TRUE(throws_code([] { (void)uniform_aggregate(std::vector<ParamVector>{}); }, errc::aggregation_empty));
}

TEST(EvaluateLoss, ZeroAtNoiselessOptimum) {
  const auto task = generate_synthetic_regression(3, 4, 25, 5, 0.0);
  const ParamVector opt = closed_form_optimum(task.pooled);
  EXPECT_LE(evaluate_loss(opt, task.pooled, LossKind::squared).value, 1e-9);
  EXPECT_EQ(evaluate_loss(opt, task.pooled, LossKind::squared).kind, MetricKind::loss);
}

TEST(EvaluateLoss, MatchesNaiveLoopAndIsNonNegative) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const auto reg = random_regression(rng, 15, 3);
    const auto wr = random_vector(rng, 3);
    EXPECT_NEAR(evaluate_loss(ParamVector(wr), reg, LossKind::squared).value, oracle_squared(wr, reg), 1e-12);

    const auto cls = random_classification(rng, 15, 3, 4);
    const auto wc = random_vector(rng, 16);
    const double ce = evaluate_loss(ParamVector(wc), cls, LossKind::cross_entropy).value;
    EXPECT_NEAR(ce, oracle_cross_entropy(wc, cls), 1e-10);
    EXPECT_GE(ce, 0.0);
  }
}

TEST(Accuracy, ThreeOfFour) {
  // Two classes in one feature: class 1 wins when x > 0.
  const ParamVector w{0.0, 0.0, 1.0, 0.0};
  const LabeledDataset test({Sample{{1.0}, 1.0}, Sample{{-1.0}, 0.0}, Sample{{2.0}, 1.0}, Sample{{3.0}, 0.0}});
  EXPECT_DOUBLE_EQ(accuracy(w, test).value, 0.75);
  const LabeledDataset all_right({Sample{{1.0}, 1.0}, Sample{{-1.0}, 0.0}});
  EXPECT_DOUBLE_EQ(accuracy(w, all_right).value, 1.0);
}

TEST(Accuracy, MatchesBruteForceCountAndStaysInRange) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 40; ++trial) {
    const auto test = random_classification(rng, 100, 4, 3);
    const auto w = random_vector(rng, 15);
    std::size_t hits = 0;
    for (const auto& s : test) hits += oracle_argmax(w, s.x) == static_cast<std::size_t>(s.y) ? 1 : 0;
    const double acc = accuracy(ParamVector(w), test).value;
    EXPECT_DOUBLE_EQ(acc, static_cast<double>(hits) / 100.0);
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 1.0);
  }
}

TEST(Perplexity, SpecExamples) {
  EXPECT_DOUBLE_EQ(perplexity(std::vector<double>{0.5, 0.5}).value, 2.0);
  EXPECT_DOUBLE_EQ(perplexity(std::vector<double>{0.0, 1.0, 0.0}).value, 1.0);
  const double h = -(0.5 * std::log2(0.5) + 2 * 0.25 * std::log2(0.25));
  EXPECT_NEAR(perplexity(std::vector<double>{0.5, 0.25, 0.25}).value, std::pow(2.0, h), 1e-12);
  EXPECT_NEAR(perplexity(std::vector<double>{0.5, 0.25, 0.25}).value, 2.8284271247461903, 1e-12);
}

TEST(Perplexity, RejectsUnnormalizedInput) {
  EXPECT_TRUE(throws_code([] { (void)perplexity(std::vector<double>{0.5, 0.6}); }, errc::validation));
  EXPECT_TRUE(throws_code([] { (void)perplexity(std::vector<double>{1.5, -0.5}); }, errc::validation));
  EXPECT_TRUE(throws_code([] { (void)perplexity(std::vector<double>{}); }, errc::validation));
}

TEST(Perplexity, FuzzedRangeBetweenOneAndSupportSize) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + trial % 9;
    std::vector<double> p(n);
    double sum = 0.0;
    for (auto& v : p) sum += (v = u(rng));
    for (auto& v : p) v /= sum;
    const double ppl = perplexity(p).value;
    EXPECT_GE(ppl, 1.0 - 1e-12);
    EXPECT_LE(ppl, static_cast<double>(n) + 1e-9);
  }
}

TEST(AsynflUpdate, SpecExamples) {
  EXPECT_EQ(asynfl_update(ParamVector{1.0, 1.0}, ParamVector{0.0, 0.0}), (ParamVector{0.5, 0.5}));
  const ParamVector w{0.1, -3.7, 1e-300};
  EXPECT_EQ(asynfl_update(w, w), w);
  EXPECT_EQ(asynfl_update(ParamVector{2.0, 4.0}, ParamVector{4.0, 2.0}), (ParamVector{3.0, 3.0}));
  EXPECT_TRUE(throws_code([] { (void)asynfl_update(ParamVector{1.0}, ParamVector{1.0, 2.0}); }, errc::shape_mismatch));
}

TEST(ValidationScore, AccuracyForClassifiersNegLossForRegressors) {
  const ParamVector w{0.0, 0.0, 1.0, 0.0};
  const LabeledDataset cls({Sample{{1.0}, 1.0}, Sample{{1.0}, 0.0}});
  EXPECT_DOUBLE_EQ(validation_score(w, cls, LossKind::cross_entropy), 0.5);
  const LabeledDataset reg({Sample{{1.0}, 3.0}});
  EXPECT_DOUBLE_EQ(validation_score(ParamVector{1.0}, reg, LossKind::squared), -4.0);
}

TEST(LabeledDataset, RejectsMixedFeatureDims) {
  EXPECT_TRUE(throws_code([] { LabeledDataset d({Sample{{1.0}, 0.0}, Sample{{1.0, 2.0}, 0.0}}); }, errc::shape_mismatch));
}

}  // namespace
}  // namespace chainfl
