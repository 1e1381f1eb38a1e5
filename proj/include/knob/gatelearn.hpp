#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "knob/dynamics.hpp"
#include "knob/errors.hpp"
#include "knob/fusion.hpp"
#include "knob/probes.hpp"
#include "knob/random.hpp"
#include "knob/simstream.hpp"

namespace knob {

inline constexpr std::size_t kGateFeatures = 5;
using GateFeatures = std::array<double, kGateFeatures>;

/// phi(x) = [severity, m_static, m_dyn, m_static - m_dyn, disagreement flag],
/// with m_* the branch's own top-2 margin.
inline GateFeatures gate_features(const StreamSample& s) {
  const double ms = top2_margin(s.pair.z_static).margin;
  const double md = top2_margin(s.pair.z_dyn).margin;
  return {s.severity, ms, md, ms - md, branches_agree(s.pair) ? 0.0 : 1.0};
}

/// Linear gate command u*(x) = w . phi(x) + b.
struct GateModel {
  GateFeatures w{};
  double b = 0.0;

  double command(const GateFeatures& phi) const {
    double u = b;
    for (std::size_t i = 0; i < kGateFeatures; ++i) u += w[i] * phi[i];
    return u;
  }

  bool finite() const {
    return std::isfinite(b) && std::all_of(w.begin(), w.end(), [](double x) { return std::isfinite(x); });
  }
};

/// How the command becomes a gate during training: directly (g = sigma(u*)) or
/// through one Tustin step from rest (g = sigma(B_d[0] u*)).
enum class GateMode { KnobIA, KnobODEReset };

inline std::string_view to_string(GateMode m) { return m == GateMode::KnobIA ? "knob_ia" : "knob_ode_reset"; }

struct AdvantageLabels {
  bool oa = false;   // dynamic branch alone has strictly lower loss
  bool gca = false;  // increasing g lowers the loss at the current g
};

inline AdvantageLabels advantage_labels(const LogitPair& pair, std::size_t label, double g) {
  AdvantageLabels a;
  a.oa = cross_entropy_in_g(pair, label, 1.0) < cross_entropy_in_g(pair, label, 0.0);
  a.gca = d_cross_entropy_dg(pair, label, g) < 0.0;
  return a;
}

/// Rank-based ROC AUC (Mann-Whitney U with average ranks for ties). Absent
/// when only one class is present.
inline std::optional<double> roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("roc_auc: length mismatch");
  for (int l : labels) {
    if (l != 0 && l != 1) throw ParameterError("labels", "must be 0 or 1");
  }
  const auto n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  const auto ranks = average_ranks(scores);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    if (labels[i] == 1) rank_sum += ranks[i];
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

/// Pi = mean |g - 0.5|.
inline double polarization(std::span<const double> gs) {
  if (gs.empty()) throw EmptyInputError("polarization: no gate values");
  double total = 0.0;
  for (double g : gs) total += std::abs(g - 0.5);
  return total / static_cast<double>(gs.size());
}

/// Difference between the true-class logit and the best competing logit.
inline double true_class_margin(std::span<const double> z, std::size_t label) {
  double best_other = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < z.size(); ++k) {
    if (k != label) best_other = std::max(best_other, z[k]);
  }
  return z[label] - best_other;
}

/// Exactly one branch classifies the sample correctly.
inline bool margin_sign_differs(const StreamSample& s) {
  return (true_class_margin(s.pair.z_static, s.label) > 0.0) != (true_class_margin(s.pair.z_dyn, s.label) > 0.0);
}

struct LossAndGrad {
  double loss = 0.0;
  double g = 0.0;
  double dl_dg = 0.0;
  GateFeatures dw{};
  double db = 0.0;
};

/// Per-sample fused cross-entropy and its exact gradient through the sigmoid
/// and the fusion: dl/dw = dl/dg * g (1 - g) * shrink * phi.
inline LossAndGrad sample_loss_and_grad(const GateModel& model, const GateFeatures& phi, const LogitPair& pair,
                                        std::size_t label, double shrink) {
  LossAndGrad out;
  out.g = sigmoid(shrink * model.command(phi));
  out.loss = cross_entropy_in_g(pair, label, out.g);
  out.dl_dg = d_cross_entropy_dg(pair, label, out.g);
  const double dl_du = out.dl_dg * out.g * (1.0 - out.g) * shrink;
  for (std::size_t i = 0; i < kGateFeatures; ++i) out.dw[i] = dl_du * phi[i];
  out.db = dl_du;
  return out;
}

struct TrainOptions {
  std::size_t epochs = 50;
  double learning_rate = 0.01;
  std::size_t batch_size = 0;  // 0 = full batch
  GateMode mode = GateMode::KnobIA;
  SecondOrderParams params{};  // used for the KnobODEReset shrinkage
  std::uint64_t seed = 0;      // mini-batch order
};

struct AucBySubset {
  std::optional<double> overall;
  std::optional<double> disagreement;
  std::optional<double> margin_sign;
};

struct E2EpochRow {
  std::size_t epoch = 0;
  double loss = 0.0;
  AucBySubset auc_oa;
  AucBySubset auc_gca;
  double polarization = 0.0;
  bool constant_scores = false;  // AUC is degenerate (every score tied)
};

struct E2Report {
  std::vector<E2EpochRow> epochs;  // epoch 0 is the untrained model
  GateMode mode = GateMode::KnobIA;
  double shrink = 1.0;
};

struct TrainResult {
  GateModel model;
  E2Report report;
};

namespace detail {

struct PreparedSample {
  GateFeatures phi;
  const StreamSample* sample;
  bool oa;
  bool disagree;
  bool margin_sign;
};

inline E2EpochRow evaluate_epoch(std::size_t epoch, const GateModel& model, std::span<const PreparedSample> data,
                                 double shrink) {
  E2EpochRow row;
  row.epoch = epoch;
  std::vector<double> gs(data.size());
  std::vector<int> gca(data.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& d = data[i];
    const auto lg = sample_loss_and_grad(model, d.phi, d.sample->pair, d.sample->label, shrink);
    gs[i] = lg.g;
    gca[i] = lg.dl_dg < 0.0 ? 1 : 0;
    loss += lg.loss;
  }
  row.loss = loss / static_cast<double>(data.size());
  row.polarization = polarization(gs);
  row.constant_scores = std::all_of(gs.begin(), gs.end(), [&](double g) { return g == gs.front(); });

  auto auc_over = [&](auto&& pick, auto&& label_of) -> std::optional<double> {
    std::vector<double> s;
    std::vector<int> l;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (!pick(data[i])) continue;
      s.push_back(gs[i]);
      l.push_back(label_of(i) ? 1 : 0);
    }
    return roc_auc(s, l);
  };
  auto all = [](const PreparedSample&) { return true; };
  auto dis = [](const PreparedSample& p) { return p.disagree; };
  auto msign = [](const PreparedSample& p) { return p.margin_sign; };
  auto oa_of = [&](std::size_t i) { return data[i].oa; };
  auto gca_of = [&](std::size_t i) { return gca[i] == 1; };
  row.auc_oa = {auc_over(all, oa_of), auc_over(dis, oa_of), auc_over(msign, oa_of)};
  row.auc_gca = {auc_over(all, gca_of), auc_over(dis, gca_of), auc_over(msign, gca_of)};
  return row;
}

}  // namespace detail

/// Gradient descent (full or mini-batch) on the mean fused cross-entropy. Records the
/// alignment metrics before training (epoch 0) and after every epoch.
inline TrainResult train_gate(const GateModel& initial, std::span<const StreamSample> dataset,
                              const TrainOptions& opt) {
  if (dataset.empty()) throw EmptyInputError("train_gate: empty dataset");
  if (!std::isfinite(opt.learning_rate) || !(opt.learning_rate > 0.0)) {
    throw ParameterError("learning_rate", "must be > 0");
  }
  if (!initial.finite()) throw ParameterError("model", "initial parameters must be finite");
  const double shrink = opt.mode == GateMode::KnobIA ? 1.0 : reset_shrinkage(opt.params);

  std::vector<detail::PreparedSample> data;
  data.reserve(dataset.size());
  for (const auto& s : dataset) {
    s.pair.validate();
    data.push_back({gate_features(s), &s, advantage_labels(s.pair, s.label, 0.5).oa, !branches_agree(s.pair),
                    margin_sign_differs(s)});
  }

  TrainResult result;
  result.model = initial;
  result.report.mode = opt.mode;
  result.report.shrink = shrink;
  result.report.epochs.push_back(detail::evaluate_epoch(0, result.model, data, shrink));

  const std::size_t batch = opt.batch_size == 0 ? data.size() : std::min(opt.batch_size, data.size());
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(opt.seed);

  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    if (batch < data.size()) {
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    }
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      GateFeatures gw{};
      double gb = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const auto& d = data[order[k]];
        const auto lg = sample_loss_and_grad(result.model, d.phi, d.sample->pair, d.sample->label, shrink);
        for (std::size_t i = 0; i < kGateFeatures; ++i) gw[i] += lg.dw[i];
        gb += lg.db;
      }
      const double scale = opt.learning_rate / static_cast<double>(end - start);
      for (std::size_t i = 0; i < kGateFeatures; ++i) result.model.w[i] -= scale * gw[i];
      result.model.b -= scale * gb;
    }
    auto row = detail::evaluate_epoch(epoch, result.model, data, shrink);
    if (!std::isfinite(row.loss) || !result.model.finite()) {
      throw TrainingDivergedError("train_gate: loss became non-finite at epoch " + std::to_string(epoch));
    }
    result.report.epochs.push_back(std::move(row));
  }
  return result;
}

/// Mixture of severities 0..5 (round robin) drawn from the synthetic model.
inline std::vector<StreamSample> make_learning_dataset(const SyntheticBranchModel& model, std::size_t n) {
  model.validate();
  Rng rng(model.rng_seed);
  std::vector<StreamSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(generate_sample(model, static_cast<double>(i % 6), rng, i));
  }
  return out;
}

}  // namespace knob
