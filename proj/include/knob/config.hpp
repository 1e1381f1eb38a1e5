#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "knob/dynamics.hpp"
#include "knob/errors.hpp"
#include "knob/gatelearn.hpp"
#include "knob/metrics.hpp"
#include "knob/probes.hpp"
#include "knob/random.hpp"
#include "knob/simstream.hpp"

namespace knob {

using nlohmann::json;

struct StepProbeConfig {
  double amplitude = 1.0;
  std::optional<std::size_t> horizon;  // derived from the spectral radius when absent
};

struct BodeProbeConfig {
  double amplitude = 1.0;
  double cycles_per_point = 5.0;
  std::size_t realizations = 1;
  double noise_sd = 0.0;
  std::vector<double> frequencies;  // cycles per step; empty = log-spaced sweep below
  double omega_min = 0.01;
  double omega_max = 2.5;
  std::size_t points = 10;
};

struct CalibrateConfig {
  std::size_t samples_per_severity = 10'000;
  std::size_t num_bins = kDefaultNumBins;
};

struct LearnConfig {
  std::size_t samples = 6'000;
  std::size_t epochs = 50;
  double learning_rate = 0.01;
  std::size_t batch_size = 0;
  GateMode gate_mode = GateMode::KnobIA;
};

struct ServiceConfig {
  std::string host = "127.0.0.1";
  std::uint16_t port = 8080;
  double frame_rate = 20.0;
};

inline constexpr double kMinFrameRate = 1.0;
inline constexpr double kMaxFrameRate = 100.0;

/// The E-3 style 1 -> 5 -> 1 step used when a config names no schedule.
inline SeveritySchedule default_schedule() { return SeveritySchedule::step({1.0, 5.0, 1.0}, {100, 300}, 400); }

struct RunConfig {
  SecondOrderParams params;
  InferenceMode mode = InferenceMode::Continuous;
  Variant variant = Variant::KnobODE;
  EmaParams ema;
  SyntheticBranchModel model;
  SeveritySchedule schedule = default_schedule();
  std::optional<std::uint64_t> seed;
  std::string output_dir = ".";
  StepProbeConfig step;
  BodeProbeConfig bode;
  CalibrateConfig calibrate;
  LearnConfig learn;
  ServiceConfig service;
};

/// Stream indices for sub-seeds derived from the master seed.
enum class SeedStream : std::uint64_t { Model = 1, Schedule = 2, Learn = 3, Bode = 4, Calibrate = 5 };

inline std::uint64_t sub_seed(const RunConfig& cfg, SeedStream s) {
  return derive_seed(cfg.seed.value_or(0), static_cast<std::uint64_t>(s));
}

/// Copies derived seeds into the components that own an RNG.
inline void resolve_seeds(RunConfig& cfg) {
  cfg.model.rng_seed = sub_seed(cfg, SeedStream::Model);
  cfg.schedule.rng_seed = sub_seed(cfg, SeedStream::Schedule);
}

inline std::optional<GateMode> parse_gate_mode(std::string_view s) {
  if (s == "knob_ia") return GateMode::KnobIA;
  if (s == "knob_ode_reset") return GateMode::KnobODEReset;
  return std::nullopt;
}

namespace detail {

/// Rethrows a component ParameterError as a ConfigError under `prefix`.
template <typename F>
void validate_under(const std::string& prefix, F&& f) {
  try {
    f();
  } catch (const ParameterError& e) {
    const std::string what = e.what();
    const auto colon = what.find(": ");
    throw ConfigError(prefix + "." + e.field(), colon == std::string::npos ? what : what.substr(colon + 2));
  }
}

inline std::vector<double> bode_frequencies(const RunConfig& cfg) {
  if (!cfg.bode.frequencies.empty()) return cfg.bode.frequencies;
  return log_spaced_frequencies(cfg.bode.omega_min, cfg.bode.omega_max, cfg.bode.points, cfg.params.dt);
}

}  // namespace detail

/// Frequencies (cycles per step) the bode probe will sweep.
inline std::vector<double> bode_frequencies(const RunConfig& cfg) { return detail::bode_frequencies(cfg); }

inline void validate(const RunConfig& cfg) {
  detail::validate_under("params", [&] { cfg.params.validate(); });
  detail::validate_under("ema", [&] { cfg.ema.validate(); });
  detail::validate_under("model", [&] { cfg.model.validate(); });
  detail::validate_under("schedule", [&] { cfg.schedule.validate(); });
  check_variant_mode(cfg.variant, cfg.mode);
  if (cfg.variant == Variant::KnobODE || cfg.variant == Variant::ODELite) {
    // Reject parameter sets whose Tustin map is numerically degenerate up front.
    try {
      (void)discretize(cfg.params);
    } catch (const SingularMatrixError& e) {
      throw ConfigError("params", e.what());
    }
  }

  if (!std::isfinite(cfg.step.amplitude) || cfg.step.amplitude == 0.0) {
    throw ConfigError("step.amplitude", "must be finite and non-zero");
  }
  if (cfg.step.horizon && *cfg.step.horizon < 2) throw ConfigError("step.horizon", "must be >= 2");

  const auto& b = cfg.bode;
  if (!std::isfinite(b.amplitude) || !(b.amplitude > 0.0)) throw ConfigError("bode.amplitude", "must be > 0");
  if (!(b.cycles_per_point >= 5.0)) throw ConfigError("bode.cycles_per_point", "must be >= 5");
  if (b.realizations < 1) throw ConfigError("bode.realizations", "must be >= 1");
  if (!std::isfinite(b.noise_sd) || b.noise_sd < 0.0) throw ConfigError("bode.noise_sd", "must be >= 0");
  for (double f : b.frequencies) {
    if (!std::isfinite(f) || !(f > 0.0)) throw ConfigError("bode.frequencies", "must be > 0");
    if (f >= kNyquist) throw ConfigError("bode.frequencies", "must be below Nyquist (0.5 cycles/step)");
  }
  if (b.frequencies.empty()) {
    if (!(b.omega_min > 0.0) || !(b.omega_max > b.omega_min)) {
      throw ConfigError("bode.omega_max", "need 0 < omega_min < omega_max");
    }
    if (b.points < 2) throw ConfigError("bode.points", "must be >= 2");
    if (detail::bode_frequencies(cfg).empty()) {
      throw ConfigError("bode.omega_min", "every sweep frequency is at or above 0.45 cycles/step for this dt");
    }
  }

  if (cfg.calibrate.samples_per_severity < 1) throw ConfigError("calibrate.samples_per_severity", "must be >= 1");
  if (cfg.calibrate.num_bins < 1) throw ConfigError("calibrate.num_bins", "must be >= 1");

  if (cfg.learn.samples < 1) throw ConfigError("learn.samples", "must be >= 1");
  if (!std::isfinite(cfg.learn.learning_rate) || !(cfg.learn.learning_rate > 0.0)) {
    throw ConfigError("learn.learning_rate", "must be > 0");
  }

  if (cfg.service.host.empty()) throw ConfigError("service.host", "must not be empty");
  if (!std::isfinite(cfg.service.frame_rate) || cfg.service.frame_rate < kMinFrameRate ||
      cfg.service.frame_rate > kMaxFrameRate) {
    throw ConfigError("service.frame_rate", "must lie in [1, 100] frames/sec");
  }
}

namespace detail {

/// Reads the members of one JSON object, remembering which keys were consumed
/// so leftovers can be reported as unknown fields.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "must be a JSON object");
  }

  std::string path(std::string_view key) const {
    return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
  }

  const json* find(std::string_view key) {
    seen_.insert(std::string(key));
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void number(std::string_view key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(path(key), "must be a number");
      out = v->get<double>();
    }
  }

  template <typename T>
  void unsigned_int(std::string_view key, T& out) {
    if (const json* v = find(key)) out = as_unsigned<T>(*v, path(key));
  }

  template <typename T>
  void optional_unsigned(std::string_view key, std::optional<T>& out) {
    if (const json* v = find(key)) {
      if (v->is_null()) {
        out.reset();
      } else {
        out = as_unsigned<T>(*v, path(key));
      }
    }
  }

  void string(std::string_view key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(path(key), "must be a string");
      out = v->get<std::string>();
    }
  }

  template <typename T, typename Parse>
  void enumeration(std::string_view key, T& out, Parse&& parse, std::string_view allowed) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(path(key), "must be a string");
      const auto parsed = parse(v->get<std::string>());
      if (!parsed) throw ConfigError(path(key), "must be one of " + std::string(allowed));
      out = *parsed;
    }
  }

  void numbers(std::string_view key, std::vector<double>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(path(key), "must be an array of numbers");
      out.clear();
      for (const auto& x : *v) {
        if (!x.is_number()) throw ConfigError(path(key), "must be an array of numbers");
        out.push_back(x.get<double>());
      }
    }
  }

  template <typename T>
  void unsigned_ints(std::string_view key, std::vector<T>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(path(key), "must be an array of non-negative integers");
      out.clear();
      for (const auto& x : *v) out.push_back(as_unsigned<T>(x, path(key)));
    }
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(path(key), "unknown field");
    }
  }

 private:
  template <typename T>
  static T as_unsigned(const json& v, const std::string& where) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw ConfigError(where, "must be a non-negative integer");
    }
    const auto x = v.get<std::uint64_t>();
    if (x > std::numeric_limits<T>::max()) throw ConfigError(where, "is out of range");
    return static_cast<T>(x);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_params(const json& j, SecondOrderParams& p, const std::string& path) {
  ObjectReader r(j, path);
  r.number("zeta", p.zeta);
  r.number("omega_n", p.omega_n);
  r.number("dt", p.dt);
  r.finish();
}

inline void read_model(const json& j, SyntheticBranchModel& m, const std::string& path) {
  ObjectReader r(j, path);
  r.unsigned_int("k", m.k);
  r.number("margin_clean_static", m.margin_clean_static);
  r.number("margin_clean_dyn", m.margin_clean_dyn);
  r.number("degradation_static", m.degradation_static);
  r.number("degradation_dyn", m.degradation_dyn);
  r.number("noise_static", m.noise_static);
  r.number("noise_dyn", m.noise_dyn);
  r.number("u_star_gain", m.u_star_gain);
  r.number("u_star_bias", m.u_star_bias);
  r.number("u_star_noise", m.u_star_noise);
  r.optional_unsigned("fixed_label", m.fixed_label);
  r.finish();
}

inline void read_schedule(const json& j, SeveritySchedule& s, const std::string& path) {
  ObjectReader r(j, path);
  r.enumeration("kind", s.kind, parse_schedule_kind, "constant, step, shot_noise_step, sinusoid, piecewise");
  r.numbers("levels", s.levels);
  r.unsigned_ints("change_times", s.change_times);
  r.number("s_mid", s.s_mid);
  r.number("s_amp", s.s_amp);
  r.number("frequency", s.frequency);
  r.number("noise_sd", s.noise_sd);
  r.unsigned_int("horizon", s.horizon);
  r.finish();
}

/// Reads a schedule object into an empty schedule, so nothing from a
/// previous or default schedule leaks into the result.
inline SeveritySchedule read_fresh_schedule(const json& j, const std::string& path) {
  SeveritySchedule s;
  s.levels.clear();
  read_schedule(j, s, path);
  return s;
}

}  // namespace detail

/// Parses and validates a standalone schedule object.
inline SeveritySchedule parse_schedule(const json& j, const std::string& path = "schedule") {
  auto s = detail::read_fresh_schedule(j, path);
  detail::validate_under(path, [&] { s.validate(); });
  return s;
}

/// Overlays a JSON document onto `base`. Unknown fields are rejected with
/// their dotted path; the result is not validated (call `validate`).
inline RunConfig parse_run_config(const json& j, RunConfig base = {}) {
  using detail::ObjectReader;
  ObjectReader r(j, "");
  RunConfig& c = base;
  if (const json* v = r.find("params")) detail::read_params(*v, c.params, "params");
  r.enumeration("mode", c.mode, parse_mode, "reset, continuous");
  r.enumeration("variant", c.variant, parse_variant, "knob_ode, ode_lite, knob_ia, static_only");
  if (const json* v = r.find("ema")) {
    ObjectReader e(*v, "ema");
    e.number("alpha", c.ema.alpha);
    e.finish();
  }
  if (const json* v = r.find("model")) detail::read_model(*v, c.model, "model");
  if (const json* v = r.find("schedule")) c.schedule = detail::read_fresh_schedule(*v, "schedule");
  r.optional_unsigned("seed", c.seed);
  if (const json* v = r.find("rng")) {
    if (!v->is_string() || v->get<std::string>() != kRngName) {
      throw ConfigError("rng", "only \"" + std::string(kRngName) + "\" is supported");
    }
  }
  r.string("output_dir", c.output_dir);
  if (const json* v = r.find("step")) {
    ObjectReader s(*v, "step");
    s.number("amplitude", c.step.amplitude);
    s.optional_unsigned("horizon", c.step.horizon);
    s.finish();
  }
  if (const json* v = r.find("bode")) {
    ObjectReader b(*v, "bode");
    b.number("amplitude", c.bode.amplitude);
    b.number("cycles_per_point", c.bode.cycles_per_point);
    b.unsigned_int("realizations", c.bode.realizations);
    b.number("noise_sd", c.bode.noise_sd);
    b.numbers("frequencies", c.bode.frequencies);
    b.number("omega_min", c.bode.omega_min);
    b.number("omega_max", c.bode.omega_max);
    b.unsigned_int("points", c.bode.points);
    b.finish();
  }
  if (const json* v = r.find("calibrate")) {
    ObjectReader k(*v, "calibrate");
    k.unsigned_int("samples_per_severity", c.calibrate.samples_per_severity);
    k.unsigned_int("num_bins", c.calibrate.num_bins);
    k.finish();
  }
  if (const json* v = r.find("learn")) {
    ObjectReader l(*v, "learn");
    l.unsigned_int("samples", c.learn.samples);
    l.unsigned_int("epochs", c.learn.epochs);
    l.number("learning_rate", c.learn.learning_rate);
    l.unsigned_int("batch_size", c.learn.batch_size);
    l.enumeration("gate_mode", c.learn.gate_mode, parse_gate_mode, "knob_ia, knob_ode_reset");
    l.finish();
  }
  if (const json* v = r.find("service")) {
    ObjectReader s(*v, "service");
    s.string("host", c.service.host);
    s.unsigned_int("port", c.service.port);
    s.number("frame_rate", c.service.frame_rate);
    s.finish();
  }
  r.finish();
  return base;
}

inline json schedule_to_json(const SeveritySchedule& s) {
  return {{"kind", to_string(s.kind)}, {"levels", s.levels},       {"change_times", s.change_times},
          {"s_mid", s.s_mid},          {"s_amp", s.s_amp},         {"frequency", s.frequency},
          {"noise_sd", s.noise_sd},    {"horizon", s.horizon}};
}

/// Canonical JSON form; parse_run_config(to_json(c)) reproduces c.
inline json to_json(const RunConfig& c) {
  json model = {{"k", c.model.k},
                {"margin_clean_static", c.model.margin_clean_static},
                {"margin_clean_dyn", c.model.margin_clean_dyn},
                {"degradation_static", c.model.degradation_static},
                {"degradation_dyn", c.model.degradation_dyn},
                {"noise_static", c.model.noise_static},
                {"noise_dyn", c.model.noise_dyn},
                {"u_star_gain", c.model.u_star_gain},
                {"u_star_bias", c.model.u_star_bias},
                {"u_star_noise", c.model.u_star_noise},
                {"fixed_label", c.model.fixed_label ? json(*c.model.fixed_label) : json(nullptr)}};
  return {
      {"params", {{"zeta", c.params.zeta}, {"omega_n", c.params.omega_n}, {"dt", c.params.dt}}},
      {"mode", to_string(c.mode)},
      {"variant", to_string(c.variant)},
      {"ema", {{"alpha", c.ema.alpha}}},
      {"model", model},
      {"schedule", schedule_to_json(c.schedule)},
      {"seed", c.seed ? json(*c.seed) : json(nullptr)},
      {"rng", kRngName},
      {"output_dir", c.output_dir},
      {"step", {{"amplitude", c.step.amplitude}, {"horizon", c.step.horizon ? json(*c.step.horizon) : json(nullptr)}}},
      {"bode",
       {{"amplitude", c.bode.amplitude},
        {"cycles_per_point", c.bode.cycles_per_point},
        {"realizations", c.bode.realizations},
        {"noise_sd", c.bode.noise_sd},
        {"frequencies", c.bode.frequencies},
        {"omega_min", c.bode.omega_min},
        {"omega_max", c.bode.omega_max},
        {"points", c.bode.points}}},
      {"calibrate",
       {{"samples_per_severity", c.calibrate.samples_per_severity}, {"num_bins", c.calibrate.num_bins}}},
      {"learn",
       {{"samples", c.learn.samples},
        {"epochs", c.learn.epochs},
        {"learning_rate", c.learn.learning_rate},
        {"batch_size", c.learn.batch_size},
        {"gate_mode", to_string(c.learn.gate_mode)}}},
      {"service", {{"host", c.service.host}, {"port", c.service.port}, {"frame_rate", c.service.frame_rate}}},
  };
}

inline RunConfig load_run_config(const std::filesystem::path& file, RunConfig base = {}) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw ConfigError("config", "cannot open " + file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config", std::string("invalid JSON: ") + e.what());
  }
  return parse_run_config(j, std::move(base));
}

}  // namespace knob
