#include <gtest/gtest.h>

#include "leproto/pcm.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace leproto;

namespace {

struct Guided {
  ParamStore store;
  mole::Perceptron g, t;
  mole::ExpertBank bank;
  pcm::ConceptAttention attn;
  Var concepts;

  Guided(std::size_t d, std::size_t experts, std::size_t concept_count, std::size_t concept_dim, std::size_t dk,
         Rng& rng) {
    g = mole::Perceptron::create(store, "g", d, std::max<std::size_t>(1, d / 4), experts, rng);
    t = mole::Perceptron::create(store, "t", d, std::max<std::size_t>(1, d / 4), 1, rng);
    bank = mole::ExpertBank::create(store, "bank", experts, d, d, 2, 1.0, 0.0, rng);
    for (auto& b : bank.b) b.mutable_value() = rng.normal_tensor(b.shape());
    attn = pcm::ConceptAttention::create(store, "x", experts, concept_dim, dk, dk, rng);
    concepts = leaf(rng.normal_tensor({concept_count, concept_dim}));
  }
};

Tensor random_gate(Rng& rng, Shape s) { return ops::softmax_last(constant(rng.normal_tensor(std::move(s), 2.0))).value(); }

}  // namespace

TEST(ConceptAlign, ZeroOutputProjectionGivesUniform) {
  Rng rng(0);
  Guided m(8, 4, 5, 6, 3, rng);
  m.attn.output.mutable_value().fill(0.0);
  auto gp = pcm::concept_align(constant(random_gate(rng, {2, 3, 4})), m.concepts, m.attn).value();
  for (double v : gp.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(ConceptAlign, RowsAreProbabilityVectors) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    Guided m(8, 3, 7, 5, 4, rng);
    auto gp = pcm::concept_align(constant(random_gate(rng, {2, 4, 3})), m.concepts, m.attn).value();
    for (std::size_t r = 0; r < 8; ++r) EXPECT_NEAR(testutil::row_sum(gp, r), 1.0, 1e-6);
    for (double v : gp.data()) EXPECT_GE(v, 0.0);
  }
}

TEST(ConceptAlign, MatchesOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    Guided m(4, 2, 3, 4, 2, rng);
    Tensor g = random_gate(rng, {2, 3, 2});
    auto got = pcm::concept_align(constant(g), m.concepts, m.attn).value();
    auto want = oracle::concept_align(g, m.concepts.value(), m.attn.query.value(), m.attn.key.value(),
                                      m.attn.value.value(), m.attn.output.value());
    EXPECT_LT(testutil::max_abs(got, want), 1e-9);
  }
}

TEST(ConceptAlign, RejectsMismatchedBank) {
  Rng rng(3);
  Guided m(4, 2, 3, 4, 2, rng);
  EXPECT_THROW(pcm::concept_align(constant(random_gate(rng, {1, 1, 2})), constant(rng.normal_tensor({3, 5})), m.attn),
               ShapeError);
}

TEST(FuseGates, Examples) {
  auto f = pcm::fuse_gates(constant(Tensor({1, 2}, {1.0, 0.0})), constant(Tensor({1, 2}, {0.5, 0.5}))).value();
  EXPECT_EQ(f, Tensor({1, 2}, {1.5, 0.5}));
  Rng rng(4);
  Tensor g = random_gate(rng, {3, 4});
  auto twice = pcm::fuse_gates(constant(g), constant(g)).value();
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(twice[i], 2.0 * g[i]);
  EXPECT_THROW(pcm::fuse_gates(constant(g), constant(Tensor({3, 3}))), ShapeError);
}

TEST(PcmForward, ArithmeticExample) {
  Tensor gt({1, 2}, {1.5, 0.5});
  auto e = mole::filter_gates(constant(gt), constant(Tensor({1, 1}, {0.4}))).value();
  EXPECT_NEAR(e[0], 1.1, 1e-15);
  EXPECT_NEAR(e[1], 0.1, 1e-15);
  auto w = mole::combination_weights(constant(e)).value();
  EXPECT_NEAR(w[0], 11.0 / 12.0, 1e-15);
  EXPECT_NEAR(w[1], 1.0 / 12.0, 1e-15);
}

TEST(PcmForward, GuidanceDisabledEqualsMolePath) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Guided m(8, 3, 6, 8, 4, rng);
    Var z = constant(rng.normal_tensor({2, 5, 8}));
    auto t = pcm::pcm_forward(z, z, m.concepts, m.bank, m.g, m.t, m.attn, mole::Normalization::kImportanceSum, false);
    auto g = mole::gate(z, m.g);
    auto e = mole::filter_gates(g, mole::threshold(z, m.t, 3));
    auto want = mole::combine_experts(z, m.bank, e);
    EXPECT_EQ(t.update.value(), want.value());
  }
}

TEST(PcmForward, MatchesOracle) {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    Guided m(8, 3, 5, 8, 2, rng);
    Tensor z = rng.normal_tensor({2, 3, 8});
    auto t = pcm::pcm_forward(constant(z), constant(z), m.concepts, m.bank, m.g, m.t, m.attn,
                              mole::Normalization::kImportanceSum);
    Tensor g = oracle::gate(z, m.g.w1.value(), m.g.b1.value(), m.g.w2.value(), m.g.b2.value());
    Tensor gp = oracle::concept_align(g, m.concepts.value(), m.attn.query.value(), m.attn.key.value(),
                                      m.attn.value.value(), m.attn.output.value());
    Tensor gt(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) gt[i] = g[i] + gp[i];
    Tensor eps = oracle::threshold(z, m.t.w1.value(), m.t.b1.value(), m.t.w2.value(), m.t.b2.value(), 3);
    Tensor e = oracle::filter(gt, eps);
    std::vector<Tensor> a, b;
    for (std::size_t i = 0; i < 3; ++i) {
      a.push_back(m.bank.a[i].value());
      b.push_back(m.bank.b[i].value());
    }
    EXPECT_LT(testutil::max_abs(t.g_tilde.value(), gt), 1e-9);
    EXPECT_LT(testutil::max_abs(t.e_tilde.value(), e), 1e-9);
    EXPECT_LT(testutil::max_abs(t.update.value(), oracle::combine(z, a, b, e)), 1e-9);
  }
}

// g~ sums to 2 and eps < 1/E <= mean(g~), so some expert always survives.
TEST(PcmForward, FallbackUnreachable) {
  Rng rng(7);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t experts = 1 + rng.index(5);
    Guided m(4, experts, 3, 4, 2, rng);
    m.t.b2.mutable_value() = rng.normal_tensor({1}, 5.0);
    m.g.b2.mutable_value() = rng.normal_tensor({experts}, 4.0);
    Var z = constant(rng.normal_tensor({1, 2, 4}, 2.0));
    auto t = pcm::pcm_forward(z, z, m.concepts, m.bank, m.g, m.t, m.attn, mole::Normalization::kImportanceSum);
    for (std::size_t r = 0; r < 2; ++r) {
      EXPECT_NEAR(testutil::row_sum(t.g_prime.value(), r), 1.0, 1e-6);
      EXPECT_NEAR(testutil::row_sum(t.g_tilde.value(), r), 2.0, 1e-6);
      EXPECT_GT(testutil::row_sum(t.e_tilde.value(), r), 0.0);
      for (std::size_t i = 0; i < experts; ++i) {
        const double v = t.g_tilde.value()[r * experts + i];
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 2.0);
      }
    }
  }
}

TEST(PcmForward, ConceptPerturbationMovesAlignedGate) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    Guided m(8, 3, 6, 8, 4, rng);
    Tensor g = random_gate(rng, {1, 4, 3});
    auto before = pcm::concept_align(constant(g), m.concepts, m.attn).value();
    Tensor p = m.concepts.value();
    const std::size_t row = rng.index(6);
    for (std::size_t d = 0; d < 8; ++d) p[row * 8 + d] += 1e-3 * rng.normal();
    auto after = pcm::concept_align(constant(g), constant(p), m.attn).value();
    EXPECT_GT(max_abs_diff(before, after), 0.0);
  }
}

TEST(ExpertConceptAttention, RowsSumToOne) {
  Rng rng(9);
  Guided m(8, 3, 10, 8, 4, rng);
  auto a = pcm::expert_concept_attention(m.concepts, m.attn);
  ASSERT_EQ(a.shape(), (Shape{3, 10}));
  for (std::size_t e = 0; e < 3; ++e) EXPECT_NEAR(testutil::row_sum(a, e), 1.0, 1e-12);
}
