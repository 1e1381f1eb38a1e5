#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "knob/fusion.hpp"
#include "oracles.hpp"

using namespace knob;

namespace {

// sigma(1.5) / sigma(2) to 15 significant digits.
constexpr double kCsrExample = 0.928221149496336;
// -log sigma(2): cross-entropy of logits (2, 0) with label 0.
constexpr double kCeTwoZero = 0.126928011042972;

LogitPair random_pair(std::mt19937_64& gen, std::size_t k, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  LogitPair p;
  p.z_static.resize(k);
  p.z_dyn.resize(k);
  for (auto& z : p.z_static) z = n(gen);
  for (auto& z : p.z_dyn) z = n(gen);
  return p;
}

}  // namespace

TEST(Fuse, EndpointsReturnBranches) {
  const LogitPair p{{1.0, 2.0, -0.5}, {0.3, -1.0, 4.0}};
  EXPECT_EQ(fuse(p, 0.0).z_fuse, p.z_static);
  EXPECT_EQ(fuse(p, 1.0).z_fuse, p.z_dyn);
}

TEST(Fuse, MidpointAveragesLogits) {
  const LogitPair p{{2.0, 0.0}, {0.0, 2.0}};
  const auto out = fuse(p, 0.5);
  EXPECT_EQ(out.z_fuse, (std::vector<double>{1.0, 1.0}));
  EXPECT_DOUBLE_EQ(out.p_max, 0.5);
}

TEST(Fuse, ProbabilitiesAreAProperDistribution) {
  const LogitPair p{{800.0, -800.0, 3.0}, {799.0, 0.0, 1.0}};
  const auto out = fuse(p, 0.3);
  double total = 0.0;
  for (double q : out.probs) {
    EXPECT_TRUE(std::isfinite(q));
    total += q;
  }
  EXPECT_NEAR(total, 1.0, 1e-15);
}

TEST(Fuse, Errors) {
  EXPECT_THROW(fuse({{1.0, 2.0}, {1.0, 2.0, 3.0}}, 0.5), DimensionError);
  EXPECT_THROW(fuse({{1.0}, {1.0}}, 0.5), DimensionError);
  EXPECT_THROW(fuse({{1.0, 2.0}, {1.0, 2.0}}, 1.5), ParameterError);
  EXPECT_THROW(fuse({{1.0, 2.0}, {1.0, 2.0}}, -0.1), ParameterError);
  EXPECT_THROW(fuse({{1.0, NAN}, {1.0, 2.0}}, 0.5), ParameterError);
}

TEST(MarginDiag, WorkedExample) {
  const auto d = margin_diag({{2.0, 0.0}, {1.0, 0.0}}, 0.5);
  ASSERT_TRUE(d.valid);
  EXPECT_EQ(d.k_star, 0u);
  EXPECT_EQ(d.j_star, 1u);
  EXPECT_EQ(d.m_static, 2.0);
  EXPECT_EQ(d.m_dyn, 1.0);
  EXPECT_EQ(d.m_fuse, 1.5);
  EXPECT_NEAR(*d.t_eff, 4.0 / 3.0, 1e-15);
  EXPECT_NEAR(*d.csr, kCsrExample, 1e-14);
}

TEST(MarginDiag, EqualMarginsGiveUnitTemperature) {
  const auto d = margin_diag({{3.0, 1.0, 0.0}, {2.5, 0.5, -4.0}}, 0.37);
  ASSERT_TRUE(d.valid);
  EXPECT_DOUBLE_EQ(*d.t_eff, 1.0);
  EXPECT_DOUBLE_EQ(*d.csr, 1.0);
}

TEST(MarginDiag, InvalidWhenRunnerUpDiffers) {
  const auto d = margin_diag({{3.0, 1.0, 0.0}, {3.0, 0.0, 1.0}}, 0.5);
  EXPECT_FALSE(d.valid);
  EXPECT_FALSE(d.t_eff.has_value());
  EXPECT_FALSE(d.csr.has_value());
}

TEST(MarginDiag, InvalidWhenTopClassDiffers) {
  EXPECT_FALSE(margin_diag({{3.0, 1.0}, {1.0, 3.0}}, 0.5).valid);
}

TEST(MarginContraction, RandomValidPairs) {
  std::mt19937_64 gen(11);
  std::uniform_real_distribution<double> gd(0.0, 1.0);
  int valid = 0;
  for (int i = 0; i < 20'000; ++i) {
    auto p = random_pair(gen, 2 + i % 5, 2.0);
    const double g = gd(gen);
    const auto d = margin_diag(p, g);
    if (!d.valid) continue;
    ++valid;
    const double lo = std::min(d.m_static, d.m_dyn), hi = std::max(d.m_static, d.m_dyn);
    ASSERT_LE(lo, d.m_fuse);
    ASSERT_LE(d.m_fuse, hi);
    ASSERT_GE(*d.t_eff, 1.0);
    ASSERT_GT(*d.csr, 0.0);
    ASSERT_LE(*d.csr, 1.0);
    if (g > 0.0 && g < 1.0 && std::abs(d.m_static - d.m_dyn) > 1e-9 * hi) {
      ASSERT_LT(d.m_fuse, hi);
      ASSERT_LT(*d.csr, 1.0);
    }
  }
  EXPECT_GT(valid, 1000);
}

TEST(CrossEntropyInG, MatchesDirectFormula) {
  EXPECT_NEAR(cross_entropy_in_g({{2.0, 0.0}, {-1.0, 5.0}}, 0, 0.0), kCeTwoZero, 1e-15);
  std::mt19937_64 gen(3);
  for (int i = 0; i < 200; ++i) {
    auto p = random_pair(gen, 6, 3.0);
    const double g = 0.005 * i;
    EXPECT_NEAR(cross_entropy_in_g(p, i % 6, g), oracle::fused_ce(p.z_static, p.z_dyn, i % 6, g), 1e-12);
  }
}

TEST(CrossEntropyInG, ConvexOnGrid) {
  std::mt19937_64 gen(19);
  for (int i = 0; i < 300; ++i) {
    auto p = random_pair(gen, 10, 4.0);
    std::vector<double> l(101);
    for (int j = 0; j <= 100; ++j) l[j] = cross_entropy_in_g(p, i % 10, j / 100.0);
    for (int j = 1; j < 100; ++j) ASSERT_GE(l[j + 1] - 2 * l[j] + l[j - 1], -1e-8);
  }
}

TEST(CrossEntropyInG, DerivativeMatchesFiniteDifference) {
  std::mt19937_64 gen(23);
  for (int i = 0; i < 300; ++i) {
    auto p = random_pair(gen, 5, 2.0);
    const std::size_t y = i % 5;
    const double g = 0.05 + 0.9 * (i / 300.0);
    const double fd = oracle::derivative(
        [&](double x) { return oracle::fused_ce(p.z_static, p.z_dyn, y, x); }, g, 1e-3);
    const double an = d_cross_entropy_dg(p, y, g);
    ASSERT_NEAR(an, fd, 1e-6 * std::max(1.0, std::abs(fd)));
  }
}

TEST(Agreement, SplitByTopClass) {
  const std::vector<LogitPair> pairs{{{1.0, 0.0}, {2.0, 0.0}}, {{1.0, 0.0}, {0.0, 2.0}}, {{0.0, 1.0}, {0.0, 3.0}}};
  const auto split = disagreement_split(pairs);
  EXPECT_EQ(split.agreement, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(split.disagreement, (std::vector<std::size_t>{1}));
}

TEST(Top2, LowestIndexWinsTies) {
  const auto t = top2_margin(std::vector<double>{1.0, 3.0, 3.0, 0.0});
  EXPECT_EQ(t.k_star, 1u);
  EXPECT_EQ(t.j_star, 2u);
  EXPECT_EQ(t.margin, 0.0);
}
