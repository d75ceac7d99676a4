#include <gtest/gtest.h>

#include "leproto/pcl.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace leproto;

namespace {

pcl::ConceptLearner random_learner(ParamStore& store, std::size_t c, std::size_t d, Rng& rng) {
  auto l = pcl::ConceptLearner::create(store, c, d, rng);
  l.conv1_kernel.mutable_value() = rng.normal_tensor({c, 1, 1});
  l.conv1_bias.mutable_value() = rng.normal_tensor({c}, 0.1);
  l.conv3_kernel.mutable_value() = rng.normal_tensor({c, 3, 3});
  l.conv3_bias.mutable_value() = rng.normal_tensor({c}, 0.1);
  l.norm_gamma.mutable_value() = rng.uniform_tensor({c}, 0.5, 1.5);
  l.norm_beta.mutable_value() = rng.normal_tensor({c}, 0.1);
  return l;
}

}  // namespace

TEST(ConceptBank, InitAndDegenerateRows) {
  ParamStore store;
  Rng rng(0);
  auto l = pcl::ConceptLearner::create(store, 7, 5, rng);
  EXPECT_EQ(l.concepts.shape(), (Shape{7, 5}));
  for (double v : l.conv1_kernel.value().data()) EXPECT_EQ(v, 1.0);
  for (double v : l.norm_gamma.value().data()) EXPECT_EQ(v, 1.0);
  Tensor p({3, 4}, 0.0);
  p[0] = 1.0;
  pcl::reinit_degenerate_rows(p, rng);
  EXPECT_EQ(p[0], 1.0);
  for (std::size_t r = 1; r < 3; ++r) {
    double n = 0.0;
    for (std::size_t d = 0; d < 4; ++d) n += p[r * 4 + d] * p[r * 4 + d];
    EXPECT_GT(std::sqrt(n), 1e-8);
  }
}

TEST(ActivationScores, IdenticalAndAntipodal) {
  Rng rng(1);
  Tensor p = rng.normal_tensor({5, 4});
  Tensor f({1, 2, 4});
  for (std::size_t d = 0; d < 4; ++d) {
    f[d] = 3.0 * p[2 * 4 + d];
    f[4 + d] = -p[2 * 4 + d];
  }
  auto a = pcl::activation_scores(constant(f), constant(p)).value();
  EXPECT_NEAR(a.at({0, 0, 2}), 1.0, 1e-14);
  EXPECT_NEAR(a.at({0, 1, 2}), -1.0, 1e-14);
}

TEST(ActivationScores, MatchesOracleBothModes) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor f = rng.normal_tensor({2, 3, 4}), p = rng.normal_tensor({5, 4});
    auto got = pcl::activation_scores(constant(f), constant(p)).value();
    EXPECT_LT(testutil::max_abs(got, oracle::activation_scores(f, p, 1.0)), 1e-9);
    auto lit = pcl::activation_scores(constant(f), constant(p), pcl::ActivationMode::kLiteralSquaredNorm).value();
    EXPECT_LT(testutil::max_abs(lit, oracle::activation_scores(f, p, 2.0)), 1e-9);
  }
}

TEST(ActivationScores, BoundedInCosineMode) {
  Rng rng(3);
  for (int trial = 0; trial < 10000; ++trial) {
    Tensor f = rng.normal_tensor({1, 1, 6}, rng.uniform(0.01, 100.0));
    Tensor p = rng.normal_tensor({3, 6}, rng.uniform(0.01, 100.0));
    const Tensor a = pcl::activation_scores(constant(f), constant(p)).value();
    for (double v : a.data()) {
      EXPECT_LE(v, 1.0 + 1e-12);
      EXPECT_GE(v, -1.0 - 1e-12);
    }
  }
}

TEST(ActivationScores, ZeroPatchIsClamped) {
  auto a = pcl::activation_scores(constant(Tensor({1, 1, 3}, 0.0)), constant(Tensor({2, 3}, 1.0))).value();
  for (double v : a.data()) EXPECT_EQ(v, 0.0);
}

TEST(SmoothActivations, ConstantRowIsUniform) {
  auto s = pcl::smooth_activations(constant(Tensor({1, 2, 4}, 0.7)), 0.1).value();
  for (double v : s.data()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(SmoothActivations, LowTemperatureConcentrates) {
  auto s = pcl::smooth_activations(constant(Tensor({1, 1, 3}, {0.2, 0.5, 0.4})), 0.01).value();
  EXPECT_NEAR(s[1], 1.0, 1e-3);
}

TEST(SmoothActivations, RowsSumToOneAndMatchOracle) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor a = rng.uniform_tensor({2, 3, 6}, -1.0, 1.0);
    for (double tau : {1.0, 0.1}) {
      auto s = pcl::smooth_activations(constant(a), tau).value();
      EXPECT_LT(testutil::max_abs(s, oracle::smooth(a, tau)), 1e-9);
      for (std::size_t r = 0; r < 6; ++r) EXPECT_NEAR(testutil::row_sum(s, r), 1.0, 1e-6);
    }
  }
  EXPECT_THROW(pcl::smooth_activations(constant(Tensor({1, 1, 2})), 0.0), std::invalid_argument);
  EXPECT_THROW(pcl::smooth_activations(constant(Tensor({1, 1, 2})), -1.0), std::invalid_argument);
}

TEST(ConceptFeatures, IdentityKernelsWithoutNorm) {
  ParamStore store;
  Rng rng(5);
  auto l = pcl::ConceptLearner::create(store, 4, 3, rng);
  l.conv3_kernel.mutable_value().fill(0.0);
  Tensor at = rng.uniform_tensor({2, 6, 4}, 0.0, 1.0);
  auto h = pcl::concept_features(constant(at), 2, 3, l, true).value();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 4; ++c) {
      double m = -1.0;
      for (std::size_t r = 0; r < 6; ++r) m = std::max(m, at.at({b, r, c}));
      EXPECT_EQ(h.at({b, c}), m);
    }
}

TEST(ConceptFeatures, ConstantInputNormalizesToZero) {
  ParamStore store;
  Rng rng(6);
  auto l = pcl::ConceptLearner::create(store, 5, 3, rng);
  l.conv3_kernel.mutable_value().fill(0.0);
  auto h = pcl::concept_features(constant(Tensor({1, 4, 5}, 0.2)), 2, 2, l).value();
  for (double v : h.data()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(ConceptFeatures, MatchesOracle) {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    ParamStore store;
    auto l = random_learner(store, 5, 3, rng);
    Tensor at = pcl::smooth_activations(constant(rng.uniform_tensor({2, 6, 5}, -1.0, 1.0)), 0.5).value();
    for (bool bypass : {false, true}) {
      auto got = pcl::concept_features(constant(at), 3, 2, l, bypass).value();
      auto want = oracle::concept_features(at, 3, 2, l.conv1_kernel.value(), l.conv1_bias.value(),
                                           l.conv3_kernel.value(), l.conv3_bias.value(), l.norm_gamma.value(),
                                           l.norm_beta.value(), bypass);
      EXPECT_LT(testutil::max_abs(got, want), 1e-9);
    }
  }
}

TEST(ConceptFeatures, GridMismatch) {
  ParamStore store;
  Rng rng(8);
  auto l = pcl::ConceptLearner::create(store, 3, 3, rng);
  EXPECT_THROW(pcl::concept_features(constant(Tensor({1, 5, 3})), 2, 2, l), ShapeError);
}

TEST(Prototypes, Examples) {
  auto one = pcl::class_prototypes(constant(Tensor({2, 1, 2}, {1.0, 2.0, 3.0, 4.0}))).value();
  EXPECT_EQ(one, Tensor({2, 2}, {1.0, 2.0, 3.0, 4.0}));
  auto two = pcl::class_prototypes(constant(Tensor({1, 2, 2}, {1.0, 0.0, 0.0, 1.0}))).value();
  EXPECT_EQ(two, Tensor({1, 2}, {0.5, 0.5}));
  Rng rng(9);
  Tensor hs = rng.normal_tensor({3, 5, 4});
  EXPECT_LT(testutil::max_abs(pcl::class_prototypes(constant(hs)).value(), oracle::prototypes(hs)), 1e-12);
}

TEST(Prototypes, PermutationInvariant) {
  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor hs = rng.normal_tensor({2, 4, 3});
    Tensor perm = hs;
    const std::size_t order[4] = {2, 0, 3, 1};
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t c = 0; c < 3; ++c) perm.at({n, k, c}) = hs.at({n, order[k], c});
    EXPECT_LT(max_abs_diff(pcl::class_prototypes(constant(hs)).value(), pcl::class_prototypes(constant(perm)).value()),
              1e-14);
  }
}

TEST(Similarity, Examples) {
  Tensor cp({3, 2}, {1.0, 0.0, 0.0, 1.0, 1.0, 1.0});
  Tensor q({2, 2}, {2.0, 2.0, 0.0, 0.0});
  auto m = pcl::similarity(constant(q), constant(cp)).value();
  EXPECT_NEAR(m.at({0, 2}), 1.0, 1e-14);
  for (std::size_t n = 0; n < 3; ++n) EXPECT_EQ(m.at({1, n}), 0.0);
  Tensor orth({1, 3}, {0.0, 0.0, 1.0});
  Tensor cp3({2, 3}, {1.0, 0.0, 0.0, 0.0, 1.0, 0.0});
  auto mo = pcl::similarity(constant(orth), constant(cp3)).value();
  EXPECT_EQ(mo[0], 0.0);
  EXPECT_EQ(mo[1], 0.0);
}

TEST(Similarity, MatchesOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor q = rng.normal_tensor({4, 6}), cp = rng.normal_tensor({3, 6});
    EXPECT_LT(testutil::max_abs(pcl::similarity(constant(q), constant(cp)).value(), oracle::cosine_matrix(q, cp)),
              1e-9);
  }
}

TEST(Predict, ArgmaxWithLowestIndexTies) {
  EXPECT_EQ(pcl::predict(Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1})), (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(pcl::predict(Tensor({1, 2}, {0.3, 0.3})), (std::vector<int>{0}));
  EXPECT_EQ(pcl::predict(Tensor({1, 3}, {-0.2, 0.5, 0.5})), (std::vector<int>{1}));
}

TEST(Predict, InvariantToPositiveQueryScaling) {
  Rng rng(12);
  for (int trial = 0; trial < 1000; ++trial) {
    Tensor q = rng.normal_tensor({3, 5}), cp = rng.normal_tensor({4, 5});
    auto base = pcl::predict(pcl::similarity(constant(q), constant(cp)).value());
    const std::size_t row = rng.index(3);
    const double s = rng.uniform(0.1, 10.0);
    for (std::size_t c = 0; c < 5; ++c) q[row * 5 + c] *= s;
    EXPECT_EQ(pcl::predict(pcl::similarity(constant(q), constant(cp)).value()), base);
  }
}

TEST(ActivationMode, Names) {
  EXPECT_EQ(pcl::parse_activation_mode("standard-cosine"), pcl::ActivationMode::kStandardCosine);
  EXPECT_EQ(pcl::activation_mode_name(pcl::ActivationMode::kLiteralSquaredNorm), "literal-squared-norm");
  EXPECT_THROW(pcl::parse_activation_mode("dot"), std::invalid_argument);
}
