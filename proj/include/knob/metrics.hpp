#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "knob/errors.hpp"
#include "knob/fusion.hpp"

namespace knob {

struct PredictionRecord {
  std::vector<double> probs;
  std::size_t label = 0;
  int severity = 0;  // 0 = clean
  std::string corruption_id;

  double confidence() const { return *std::max_element(probs.begin(), probs.end()); }
  std::size_t prediction() const { return argmax(probs); }
  bool correct() const { return prediction() == label; }

  void validate() const {
    if (probs.size() < 2) throw DimensionError("record needs at least two class probabilities");
    if (label >= probs.size()) throw ParameterError("label", "out of range");
    double total = 0.0;
    for (double p : probs) {
      if (!std::isfinite(p) || p < 0.0) throw ParameterError("probs", "must be finite and non-negative");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ParameterError("probs", "must sum to 1");
  }
};

struct ReliabilityBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  double mean_confidence = 0.0;
  double accuracy = 0.0;
  std::optional<double> gap;  // accuracy - confidence; absent for empty bins
};

struct ReliabilityBins {
  std::vector<double> edges;
  std::vector<ReliabilityBin> bins;
};

struct EceResult {
  double plain = 0.0;
  double debiased = 0.0;
};

inline constexpr std::size_t kDefaultNumBins = 15;
inline constexpr double kProbabilityFloor = 1e-12;

/// One-line description of the debiasing rule; written into every report.
inline constexpr const char* kDebiasedEceEstimator =
    "sum_b (n_b/N) * sqrt(max(0, (acc_b - conf_b)^2 - acc_b(1 - acc_b)/(n_b - 1))); "
    "equal-width bins on p_max, right-closed";

struct CalibrationReport {
  double ece_debiased = 0.0;
  double ece_plain = 0.0;
  double nll = 0.0;
  double brier = 0.0;
  double avg_c = 0.0;
  double err_c = 0.0;
  ReliabilityBins bins;
};

namespace detail {

inline void require_nonempty(std::span<const PredictionRecord> records, const char* what) {
  if (records.empty()) throw EmptyInputError(std::string(what) + ": no records");
}

}  // namespace detail

/// Equal-width bins on [0, 1]. A confidence c lands in the first bin whose
/// upper edge is >= c, so upper edges are closed and c = 0 joins bin 0.
inline ReliabilityBins reliability(std::span<const PredictionRecord> records,
                                   std::size_t num_bins = kDefaultNumBins) {
  if (num_bins < 1) throw ParameterError("num_bins", "must be >= 1");
  ReliabilityBins out;
  out.edges.resize(num_bins + 1);
  for (std::size_t i = 0; i <= num_bins; ++i) {
    out.edges[i] = static_cast<double>(i) / static_cast<double>(num_bins);
  }
  out.bins.resize(num_bins);
  std::vector<double> conf_sum(num_bins, 0.0);
  std::vector<double> hit_sum(num_bins, 0.0);
  for (const auto& r : records) {
    const double c = r.confidence();
    auto it = std::lower_bound(out.edges.begin() + 1, out.edges.end(), c);
    std::size_t b = it == out.edges.end() ? num_bins - 1
                                          : static_cast<std::size_t>(it - out.edges.begin()) - 1;
    ++out.bins[b].count;
    conf_sum[b] += c;
    hit_sum[b] += r.correct() ? 1.0 : 0.0;
  }
  for (std::size_t b = 0; b < num_bins; ++b) {
    auto& bin = out.bins[b];
    bin.lower = out.edges[b];
    bin.upper = out.edges[b + 1];
    if (bin.count == 0) continue;
    const double n = static_cast<double>(bin.count);
    bin.mean_confidence = conf_sum[b] / n;
    bin.accuracy = hit_sum[b] / n;
    bin.gap = bin.accuracy - bin.mean_confidence;
  }
  return out;
}

inline EceResult ece_from_bins(const ReliabilityBins& bins, std::size_t total) {
  EceResult e;
  const double n_total = static_cast<double>(total);
  for (const auto& bin : bins.bins) {
    if (bin.count == 0) continue;
    const double w = static_cast<double>(bin.count) / n_total;
    const double gap = std::abs(bin.accuracy - bin.mean_confidence);
    e.plain += w * gap;
    double noise = 0.0;
    if (bin.count > 1) noise = bin.accuracy * (1.0 - bin.accuracy) / static_cast<double>(bin.count - 1);
    e.debiased += w * std::sqrt(std::max(0.0, gap * gap - noise));
  }
  return e;
}

inline EceResult ece(std::span<const PredictionRecord> records, std::size_t num_bins = kDefaultNumBins) {
  detail::require_nonempty(records, "ece");
  return ece_from_bins(reliability(records, num_bins), records.size());
}

inline double nll(std::span<const PredictionRecord> records) {
  detail::require_nonempty(records, "nll");
  double total = 0.0;
  for (const auto& r : records) total -= std::log(std::max(r.probs[r.label], kProbabilityFloor));
  return total / static_cast<double>(records.size());
}

inline double brier(std::span<const PredictionRecord> records) {
  detail::require_nonempty(records, "brier");
  double total = 0.0;
  for (const auto& r : records) {
    for (std::size_t k = 0; k < r.probs.size(); ++k) {
      const double d = r.probs[k] - (k == r.label ? 1.0 : 0.0);
      total += d * d;
    }
  }
  return total / static_cast<double>(records.size());
}

struct AvgC {
  double avg_c = 0.0;  // percent
  double err_c = 0.0;  // percent
};

/// Accuracy per (corruption, severity), averaged over severities within each
/// corruption, then over corruptions.
inline AvgC avg_c(std::span<const PredictionRecord> records) {
  detail::require_nonempty(records, "avg_c");
  std::map<std::string, std::map<int, std::pair<std::size_t, std::size_t>>> cells;
  for (const auto& r : records) {
    if (r.corruption_id.empty()) throw ParameterError("corruption_id", "record is missing its corruption tag");
    auto& cell = cells[r.corruption_id][r.severity];
    cell.first += r.correct() ? 1 : 0;
    ++cell.second;
  }
  double over_corruptions = 0.0;
  for (const auto& [id, by_severity] : cells) {
    double over_severities = 0.0;
    for (const auto& [sev, cell] : by_severity) {
      over_severities += 100.0 * static_cast<double>(cell.first) / static_cast<double>(cell.second);
    }
    over_corruptions += over_severities / static_cast<double>(by_severity.size());
  }
  AvgC out;
  out.avg_c = over_corruptions / static_cast<double>(cells.size());
  out.err_c = 100.0 - out.avg_c;
  return out;
}

inline CalibrationReport calibration_report(std::span<const PredictionRecord> records,
                                            std::size_t num_bins = kDefaultNumBins) {
  detail::require_nonempty(records, "calibration_report");
  CalibrationReport rep;
  rep.bins = reliability(records, num_bins);
  const auto e = ece_from_bins(rep.bins, records.size());
  rep.ece_plain = e.plain;
  rep.ece_debiased = e.debiased;
  rep.nll = nll(records);
  rep.brier = brier(records);
  const auto ac = avg_c(records);
  rep.avg_c = ac.avg_c;
  rep.err_c = ac.err_c;
  return rep;
}

}  // namespace knob
