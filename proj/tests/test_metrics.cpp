#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "knob/metrics.hpp"
#include "oracles.hpp"

using namespace knob;

namespace {

constexpr double kLn10 = 2.302585092994046;
constexpr double kNllExample = 1.039720770839918;  // (ln 2 + ln 4) / 2

PredictionRecord rec(std::vector<double> p, std::size_t label, int sev = 0, std::string id = "noise") {
  return {std::move(p), label, sev, std::move(id)};
}

}  // namespace

TEST(Nll, UniformOverTenClasses) {
  std::vector<PredictionRecord> rs;
  for (std::size_t i = 0; i < 10; ++i) rs.push_back(rec(std::vector<double>(10, 0.1), i));
  EXPECT_NEAR(nll(rs), kLn10, 1e-9);
}

TEST(Nll, TwoRecordExample) {
  std::vector<PredictionRecord> rs{rec({0.5, 0.5}, 0), rec({0.75, 0.25}, 1)};
  EXPECT_NEAR(nll(rs), kNllExample, 1e-12);
}

TEST(Nll, FloorsZeroProbability) {
  std::vector<PredictionRecord> rs{rec({1.0, 0.0}, 1)};
  EXPECT_NEAR(nll(rs), -std::log(kProbabilityFloor), 1e-9);
}

TEST(Brier, HandComputed) {
  std::vector<PredictionRecord> rs{rec({0.7, 0.3}, 0), rec({0.4, 0.6}, 0)};
  // ((0.3^2 + 0.3^2) + (0.6^2 + 0.6^2)) / 2 = 0.45
  EXPECT_NEAR(brier(rs), 0.45, 1e-15);
}

TEST(Reliability, RightClosedBins) {
  std::vector<PredictionRecord> rs{rec({0.5, 0.5}, 0), rec({0.6, 0.4}, 0), rec({1.0, 0.0}, 1)};
  const auto b = reliability(rs, 10);
  ASSERT_EQ(b.bins.size(), 10u);
  EXPECT_EQ(b.bins[4].count, 1u);  // 0.5 sits on the upper edge of (0.4, 0.5]
  EXPECT_EQ(b.bins[5].count, 1u);
  EXPECT_EQ(b.bins[9].count, 1u);
  EXPECT_FALSE(b.bins[0].gap.has_value());
  EXPECT_DOUBLE_EQ(*b.bins[9].gap, -1.0);
}

TEST(Ece, PlainAndDebiasedByHand) {
  // Bin (0.6, 0.8]: confidences 0.7 x4, 3 correct -> acc 0.75, gap 0.05.
  // Bin (0.8, 1.0]: confidences 0.9 x2, 1 correct -> acc 0.5, gap 0.4.
  std::vector<PredictionRecord> rs;
  for (int i = 0; i < 4; ++i) rs.push_back(rec({0.7, 0.3}, i < 3 ? 0 : 1));
  for (int i = 0; i < 2; ++i) rs.push_back(rec({0.9, 0.1}, i < 1 ? 0 : 1));
  const auto e = ece(rs, 5);
  EXPECT_NEAR(e.plain, (4.0 / 6) * 0.05 + (2.0 / 6) * 0.4, 1e-12);
  const double b1 = std::sqrt(std::max(0.0, 0.05 * 0.05 - 0.75 * 0.25 / 3));
  const double b2 = std::sqrt(std::max(0.0, 0.4 * 0.4 - 0.5 * 0.5 / 1));
  EXPECT_NEAR(e.debiased, (4.0 / 6) * b1 + (2.0 / 6) * b2, 1e-12);
  EXPECT_LE(e.debiased, e.plain);
}

TEST(Ece, CalibratedMonteCarloIsSmall) {
  std::vector<PredictionRecord> rs;
  for (auto& s : oracle::calibrated_predictions(100'000, 10, 1234)) rs.push_back(rec(std::move(s.probs), s.label));
  const auto e = ece(rs);
  EXPECT_LT(e.plain, 0.01);
  EXPECT_LT(e.debiased, e.plain);
}

TEST(Ece, OverconfidentModelIsPenalised) {
  std::vector<PredictionRecord> rs;
  for (int i = 0; i < 1000; ++i) rs.push_back(rec({0.95, 0.05}, i % 2));
  EXPECT_NEAR(ece(rs).plain, 0.45, 1e-12);
}

TEST(AvgC, AveragesSeveritiesThenCorruptions) {
  std::vector<PredictionRecord> rs{
      rec({0.9, 0.1}, 0, 1, "fog"),  rec({0.9, 0.1}, 1, 1, "fog"),   // fog s1: 50%
      rec({0.9, 0.1}, 0, 2, "fog"),                                   // fog s2: 100%
      rec({0.9, 0.1}, 1, 1, "snow"), rec({0.9, 0.1}, 1, 1, "snow"),  // snow s1: 0%
  };
  const auto a = avg_c(rs);
  EXPECT_NEAR(a.avg_c, (75.0 + 0.0) / 2, 1e-12);
  EXPECT_NEAR(a.err_c, 100.0 - 37.5, 1e-12);
}

TEST(AvgC, RequiresCorruptionTag) {
  std::vector<PredictionRecord> rs{rec({0.9, 0.1}, 0, 1, "")};
  EXPECT_THROW(avg_c(rs), ParameterError);
}

TEST(Metrics, EmptyInputRaises) {
  std::vector<PredictionRecord> none;
  EXPECT_THROW(ece(none), EmptyInputError);
  EXPECT_THROW(nll(none), EmptyInputError);
  EXPECT_THROW(calibration_report(none), EmptyInputError);
}

TEST(PredictionRecord, Validation) {
  EXPECT_NO_THROW(rec({0.2, 0.8}, 1).validate());
  EXPECT_THROW(rec({0.2, 0.7}, 1).validate(), ParameterError);
  EXPECT_THROW(rec({0.2, 0.8}, 2).validate(), ParameterError);
  EXPECT_THROW(rec({1.0}, 0).validate(), DimensionError);
}

TEST(CalibrationReport, CombinesMetrics) {
  std::vector<PredictionRecord> rs{rec({0.7, 0.3}, 0, 1, "a"), rec({0.2, 0.8}, 0, 2, "a")};
  const auto r = calibration_report(rs, 4);
  EXPECT_EQ(r.bins.bins.size(), 4u);
  EXPECT_NEAR(r.avg_c, 50.0, 1e-12);
  EXPECT_NEAR(r.nll, (-std::log(0.7) - std::log(0.2)) / 2, 1e-12);
}
