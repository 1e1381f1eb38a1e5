#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "json.hpp"
#include "knob/errors.hpp"
#include "knob/gatelearn.hpp"
#include "knob/io/csv.hpp"
#include "knob/metrics.hpp"
#include "knob/probes.hpp"
#include "knob/random.hpp"
#include "knob/simstream.hpp"
#include "knob/version.hpp"

namespace knob::io {

using nlohmann::json;

inline json number_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }
inline json number_or_null(std::optional<double> x) { return x ? number_or_null(*x) : json(nullptr); }

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline json to_json(const SecondOrderParams& p) { return {{"zeta", p.zeta}, {"omega_n", p.omega_n}, {"dt", p.dt}}; }

inline json to_json(const StepMetrics& m) {
  return {{"overshoot_fraction", m.overshoot_fraction},
          {"settling_time_2pct", m.settling_time_2pct},
          {"rise_time_10_90", m.rise_time_10_90},
          {"steady_state_value", m.steady_state_value},
          {"settled", m.settled}};
}

inline json to_json(const ReliabilityBins& rb) {
  json bins = json::array();
  for (const auto& b : rb.bins) {
    bins.push_back({{"lower", b.lower},
                    {"upper", b.upper},
                    {"count", b.count},
                    {"mean_confidence", b.count ? json(b.mean_confidence) : json(nullptr)},
                    {"accuracy", b.count ? json(b.accuracy) : json(nullptr)},
                    {"gap", number_or_null(b.gap)}});
  }
  return bins;
}

inline json to_json(const CalibrationReport& r) {
  return {{"ece_debiased", r.ece_debiased},
          {"ece_plain", r.ece_plain},
          {"ece_debiased_estimator", kDebiasedEceEstimator},
          {"nll", r.nll},
          {"brier", r.brier},
          {"avg_c", r.avg_c},
          {"err_c", r.err_c},
          {"num_bins", r.bins.bins.size()},
          {"bins", to_json(r.bins)}};
}

inline json to_json(const E1Report& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"severity", row.severity},
                    {"n", row.n},
                    {"n_valid", row.n_valid},
                    {"n_agree", row.n_agree},
                    {"n_disagree", row.n_disagree},
                    {"csr_valid", number_or_null(row.csr_valid)},
                    {"t_eff_valid", number_or_null(row.t_eff_valid)},
                    {"csr_overall", number_or_null(row.csr_overall)},
                    {"csr_agreement", number_or_null(row.csr_agreement)},
                    {"csr_disagreement", number_or_null(row.csr_disagreement)}});
  }
  return {{"rows", rows},
          {"spearman_rho", number_or_null(r.spearman_rho)},
          {"valid_fraction", r.valid_fraction},
          {"n_total", r.n_total},
          {"n_valid", r.n_valid}};
}

inline json to_json(const GateModel& m) { return {{"w", m.w}, {"b", m.b}}; }

// ---------------------------------------------------------------------------
// CSV layouts
// ---------------------------------------------------------------------------

/// t (step index), u, g = sigma(u).
inline std::string step_trace_csv(const StepResponse& r) {
  CsvWriter w({"t", "u", "g"});
  for (std::size_t i = 0; i < r.u.size(); ++i) {
    w.cell(i).cell(r.u[i]).cell(sigmoid(r.u[i]));
    w.end_row();
  }
  return w.str();
}

inline std::string bode_csv(std::span<const BodePoint> points, const SecondOrderParams& p) {
  CsvWriter w({"frequency", "magnitude_db", "sem", "analytic_warped_db", "gain_db", "g_magnitude_db"});
  double f_ref = points.empty() ? 0.0 : points.front().frequency;
  for (const auto& pt : points) f_ref = std::min(f_ref, pt.frequency);
  for (const auto& pt : points) {
    w.cell(pt.frequency).cell(pt.magnitude_db).cell(pt.sem).cell(analytic_warped_db(p, pt.frequency, f_ref));
    w.cell(pt.gain_db).cell(pt.g_magnitude_db);
    w.end_row();
  }
  return w.str();
}

inline std::string e1_csv(const E1Report& r) {
  CsvWriter w({"severity", "n", "n_valid", "n_agree", "n_disagree", "csr_valid", "t_eff_valid", "csr_overall",
               "csr_agreement", "csr_disagreement"});
  for (const auto& row : r.rows) {
    w.cell(row.severity).cell(row.n).cell(row.n_valid).cell(row.n_agree).cell(row.n_disagree);
    w.cell(row.csr_valid).cell(row.t_eff_valid).cell(row.csr_overall).cell(row.csr_agreement);
    w.cell(row.csr_disagreement);
    w.end_row();
  }
  return w.str();
}

inline std::string e2_csv(const E2Report& r) {
  CsvWriter w({"epoch", "loss", "auc_oa", "auc_oa_disagreement", "auc_oa_margin_sign", "auc_gca",
               "auc_gca_disagreement", "auc_gca_margin_sign", "polarization", "constant_scores"});
  for (const auto& e : r.epochs) {
    w.cell(e.epoch).cell(e.loss);
    w.cell(e.auc_oa.overall).cell(e.auc_oa.disagreement).cell(e.auc_oa.margin_sign);
    w.cell(e.auc_gca.overall).cell(e.auc_gca.disagreement).cell(e.auc_gca.margin_sign);
    w.cell(e.polarization).cell(e.constant_scores);
    w.end_row();
  }
  return w.str();
}

inline std::string trace_csv(std::span<const TraceRow> rows) {
  CsvWriter w({"t", "severity", "u_star", "u", "g", "p_max", "label", "pred", "correct"});
  for (const auto& r : rows) {
    w.cell(r.sample.t).cell(r.sample.severity).cell(r.sample.u_star).cell(r.u).cell(r.g).cell(r.fused.p_max);
    w.cell(r.sample.label).cell(r.prediction()).cell(r.correct());
    w.end_row();
  }
  return w.str();
}

// ---------------------------------------------------------------------------
// Files and metadata sidecars
// ---------------------------------------------------------------------------

/// 64-bit FNV-1a over the compact dump of a JSON value (object keys sorted),
/// as 16 lowercase hex digits.
inline std::string config_hash(const json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct RunInfo {
  std::string command;  // subcommand name
  json config;          // resolved configuration
  std::optional<std::uint64_t> seed;
};

inline json metadata(const RunInfo& info, std::string_view file) {
  return {{"tool", kToolName},
          {"version", kVersion},
          {"command", info.command},
          {"config_hash", config_hash(info.config)},
          {"rng", kRngName},
          {"seed", info.seed ? json(*info.seed) : json(nullptr)},
          {"file", file}};
}

/// Writes `content` byte-for-byte (binary mode, so LF stays LF).
inline void write_file(const std::filesystem::path& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".meta.json");
}

/// Writes the file and `<file>.meta.json` next to it.
inline void write_output(const std::filesystem::path& path, std::string_view content, const RunInfo& info) {
  write_file(path, content);
  write_file(sidecar_path(path), metadata(info, path.filename().string()).dump(2) + "\n");
}

}  // namespace knob::io
