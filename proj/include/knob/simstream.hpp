#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "knob/dynamics.hpp"
#include "knob/errors.hpp"
#include "knob/fusion.hpp"
#include "knob/random.hpp"

namespace knob {

inline constexpr double kMinSeverity = 0.0;
inline constexpr double kMaxSeverity = 5.0;

enum class ScheduleKind { Constant, Step, ShotNoiseStep, Sinusoid, Piecewise };

/// Time-indexed corruption severity s(t), t in [0, horizon).
///
///  Constant       levels[0]
///  Step           levels[i] for change_times[i-1] <= t < change_times[i]
///  ShotNoiseStep  Step level plus N(0, noise_sd^2) jitter drawn per t from
///                 (rng_seed, t), clamped to [0, 5]
///  Sinusoid       s_mid + s_amp sin(2 pi frequency t), frequency in cycles/step
///  Piecewise      linear interpolation through (change_times[i], levels[i])
struct SeveritySchedule {
  ScheduleKind kind = ScheduleKind::Constant;
  std::vector<double> levels{0.0};
  std::vector<std::size_t> change_times;
  double s_mid = 0.0;
  double s_amp = 0.0;
  double frequency = 0.0;
  double noise_sd = 0.25;
  std::size_t horizon = 1;
  std::uint64_t rng_seed = 0;

  static SeveritySchedule constant(double level, std::size_t horizon) {
    SeveritySchedule s;
    s.levels = {level};
    s.horizon = horizon;
    return s;
  }

  static SeveritySchedule step(std::vector<double> levels, std::vector<std::size_t> change_times,
                               std::size_t horizon) {
    SeveritySchedule s;
    s.kind = ScheduleKind::Step;
    s.levels = std::move(levels);
    s.change_times = std::move(change_times);
    s.horizon = horizon;
    return s;
  }

  static SeveritySchedule shot_noise_step(std::vector<double> levels, std::vector<std::size_t> change_times,
                                          double noise_sd, std::size_t horizon, std::uint64_t seed) {
    SeveritySchedule s = step(std::move(levels), std::move(change_times), horizon);
    s.kind = ScheduleKind::ShotNoiseStep;
    s.noise_sd = noise_sd;
    s.rng_seed = seed;
    return s;
  }

  static SeveritySchedule sinusoid(double s_mid, double s_amp, double frequency, std::size_t horizon) {
    SeveritySchedule s;
    s.kind = ScheduleKind::Sinusoid;
    s.levels.clear();
    s.s_mid = s_mid;
    s.s_amp = s_amp;
    s.frequency = frequency;
    s.horizon = horizon;
    return s;
  }

  static SeveritySchedule piecewise(std::vector<std::size_t> knot_times, std::vector<double> levels,
                                    std::size_t horizon) {
    SeveritySchedule s;
    s.kind = ScheduleKind::Piecewise;
    s.levels = std::move(levels);
    s.change_times = std::move(knot_times);
    s.horizon = horizon;
    return s;
  }

  void validate() const {
    if (horizon < 1) throw ParameterError("horizon", "must be >= 1");
    auto in_range = [](double s) { return std::isfinite(s) && s >= kMinSeverity && s <= kMaxSeverity; };
    auto increasing = [this] {
      for (std::size_t i = 1; i < change_times.size(); ++i) {
        if (change_times[i] <= change_times[i - 1]) return false;
      }
      return true;
    };
    if (kind != ScheduleKind::Sinusoid) {
      if (levels.empty()) throw ParameterError("levels", "at least one level required");
      for (double s : levels) {
        if (!in_range(s)) throw ParameterError("levels", "severity must lie in [0, 5]");
      }
    }
    switch (kind) {
      case ScheduleKind::Constant:
        if (levels.size() != 1) throw ParameterError("levels", "constant schedule takes exactly one level");
        break;
      case ScheduleKind::ShotNoiseStep:
        if (!std::isfinite(noise_sd) || noise_sd < 0.0) throw ParameterError("noise_sd", "must be >= 0");
        [[fallthrough]];
      case ScheduleKind::Step:
        if (change_times.size() + 1 != levels.size()) {
          throw ParameterError("change_times", "need exactly levels.size() - 1 change times");
        }
        if (!increasing()) throw ParameterError("change_times", "must be strictly increasing");
        break;
      case ScheduleKind::Piecewise:
        if (change_times.size() != levels.size()) {
          throw ParameterError("change_times", "piecewise schedule needs one knot time per level");
        }
        if (!increasing()) throw ParameterError("change_times", "must be strictly increasing");
        break;
      case ScheduleKind::Sinusoid:
        if (!std::isfinite(frequency) || frequency < 0.0) throw ParameterError("frequency", "must be >= 0");
        if (!std::isfinite(s_amp) || s_amp < 0.0) throw ParameterError("s_amp", "must be >= 0");
        if (!in_range(s_mid - s_amp) || !in_range(s_mid + s_amp)) {
          throw ParameterError("s_mid", "s_mid +/- s_amp must stay within [0, 5]");
        }
        break;
    }
  }
};

inline std::string_view to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::Constant: return "constant";
    case ScheduleKind::Step: return "step";
    case ScheduleKind::ShotNoiseStep: return "shot_noise_step";
    case ScheduleKind::Sinusoid: return "sinusoid";
    case ScheduleKind::Piecewise: return "piecewise";
  }
  return "unknown";
}

inline std::optional<ScheduleKind> parse_schedule_kind(std::string_view s) {
  for (auto k : {ScheduleKind::Constant, ScheduleKind::Step, ScheduleKind::ShotNoiseStep, ScheduleKind::Sinusoid,
                 ScheduleKind::Piecewise}) {
    if (to_string(k) == s) return k;
  }
  return std::nullopt;
}

namespace detail {

inline double held_level(const SeveritySchedule& s, std::size_t t) {
  std::size_t i = 0;
  while (i < s.change_times.size() && t >= s.change_times[i]) ++i;
  return s.levels[i];
}

}  // namespace detail

inline double schedule_value(const SeveritySchedule& sched, std::size_t t) {
  if (t >= sched.horizon) {
    throw ParameterError("t", "step " + std::to_string(t) + " is outside the schedule horizon " +
                                  std::to_string(sched.horizon));
  }
  switch (sched.kind) {
    case ScheduleKind::Constant: return sched.levels.front();
    case ScheduleKind::Step: return detail::held_level(sched, t);
    case ScheduleKind::ShotNoiseStep: {
      Rng jitter(derive_seed(sched.rng_seed, t));
      const double s = detail::held_level(sched, t) + sched.noise_sd * jitter.normal();
      return std::clamp(s, kMinSeverity, kMaxSeverity);
    }
    case ScheduleKind::Sinusoid:
      return sched.s_mid + sched.s_amp * std::sin(2.0 * std::numbers::pi * sched.frequency * static_cast<double>(t));
    case ScheduleKind::Piecewise: {
      const auto& k = sched.change_times;
      if (t <= k.front()) return sched.levels.front();
      if (t >= k.back()) return sched.levels.back();
      std::size_t i = 1;
      while (k[i] < t) ++i;
      const double w = static_cast<double>(t - k[i - 1]) / static_cast<double>(k[i] - k[i - 1]);
      return sched.levels[i - 1] + w * (sched.levels[i] - sched.levels[i - 1]);
    }
  }
  return 0.0;
}

/// Desk-scale stand-in for a dual-branch classifier under corruption.
///
/// Each branch puts margin_clean * exp(-degradation * severity) on the true
/// class, then adds N(0, noise^2) to every logit. The dynamic branch is sharper
/// when clean but decays faster and is noisier. The gate command is affine in
/// severity: u* = u_star_gain * severity + u_star_bias (+ optional noise).
struct SyntheticBranchModel {
  std::size_t k = 10;
  double margin_clean_static = 4.0;
  double margin_clean_dyn = 5.0;
  double degradation_static = 0.25;
  double degradation_dyn = 0.45;
  double noise_static = 0.5;
  double noise_dyn = 1.2;
  double u_star_gain = 0.8;
  double u_star_bias = -2.0;
  double u_star_noise = 0.0;
  std::optional<std::size_t> fixed_label;  // content held fixed across a stream
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (k < 2) throw ParameterError("k", "need at least two classes");
    auto positive = [](const char* f, double v) {
      if (!std::isfinite(v) || !(v > 0.0)) throw ParameterError(f, "must be > 0");
    };
    auto nonneg = [](const char* f, double v) {
      if (!std::isfinite(v) || v < 0.0) throw ParameterError(f, "must be >= 0");
    };
    positive("margin_clean_static", margin_clean_static);
    positive("margin_clean_dyn", margin_clean_dyn);
    nonneg("degradation_static", degradation_static);
    nonneg("degradation_dyn", degradation_dyn);
    nonneg("noise_static", noise_static);
    nonneg("noise_dyn", noise_dyn);
    nonneg("u_star_noise", u_star_noise);
    if (!std::isfinite(u_star_gain)) throw ParameterError("u_star_gain", "must be finite");
    if (!std::isfinite(u_star_bias)) throw ParameterError("u_star_bias", "must be finite");
    if (fixed_label && *fixed_label >= k) throw ParameterError("fixed_label", "must be < k");
  }

  double expected_margin_static(double severity) const {
    return margin_clean_static * std::exp(-degradation_static * severity);
  }
  double expected_margin_dyn(double severity) const {
    return margin_clean_dyn * std::exp(-degradation_dyn * severity);
  }
};

struct StreamSample {
  std::size_t t = 0;
  double severity = 0.0;
  LogitPair pair;
  std::size_t label = 0;
  double u_star = 0.0;
};

/// Draw order: label (unless fixed), K static noises, K dynamic noises, one
/// command noise. The order is part of the reproducibility contract.
inline StreamSample generate_sample(const SyntheticBranchModel& model, double severity, Rng& rng,
                                    std::size_t t = 0) {
  StreamSample s;
  s.t = t;
  s.severity = severity;
  s.label = model.fixed_label ? *model.fixed_label : static_cast<std::size_t>(rng.index(model.k));
  s.pair.z_static.assign(model.k, 0.0);
  s.pair.z_dyn.assign(model.k, 0.0);
  for (auto& z : s.pair.z_static) z = model.noise_static * rng.normal();
  for (auto& z : s.pair.z_dyn) z = model.noise_dyn * rng.normal();
  s.pair.z_static[s.label] += model.expected_margin_static(severity);
  s.pair.z_dyn[s.label] += model.expected_margin_dyn(severity);
  const double jitter = rng.normal();
  s.u_star = model.u_star_gain * severity + model.u_star_bias + model.u_star_noise * jitter;
  return s;
}

enum class Variant { KnobODE, ODELite, KnobIA, StaticOnly };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::KnobODE: return "knob_ode";
    case Variant::ODELite: return "ode_lite";
    case Variant::KnobIA: return "knob_ia";
    case Variant::StaticOnly: return "static_only";
  }
  return "unknown";
}

inline std::optional<Variant> parse_variant(std::string_view s) {
  for (auto v : {Variant::KnobODE, Variant::ODELite, Variant::KnobIA, Variant::StaticOnly}) {
    if (to_string(v) == s) return v;
  }
  return std::nullopt;
}

inline std::optional<InferenceMode> parse_mode(std::string_view s) {
  if (s == "reset") return InferenceMode::Reset;
  if (s == "continuous") return InferenceMode::Continuous;
  return std::nullopt;
}

/// Rejects variant/mode combinations that have no meaning: the stateless
/// variants (KnobIA, StaticOnly) have nothing to carry in Continuous mode.
inline void check_variant_mode(Variant variant, InferenceMode mode) {
  if (mode == InferenceMode::Continuous && (variant == Variant::KnobIA || variant == Variant::StaticOnly)) {
    throw ConfigError("mode", std::string("variant ") + std::string(to_string(variant)) +
                                  " is stateless and cannot run in continuous mode");
  }
}

struct GateStep {
  double g = 0.0;
  GateState state;
};

/// Per-stream gate evolution for one variant. Owns the latent state; parameter
/// changes rebuild the discrete system and carry the state over unchanged.
class GateProcessor {
 public:
  GateProcessor(Variant variant, InferenceMode mode, const SecondOrderParams& params, const EmaParams& ema = {},
                const GateState& initial = {})
      : variant_(variant), mode_(mode), system_(discretize(params)), ema_(ema), state_(initial) {
    ema_.validate();
    check_variant_mode(variant_, mode_);
    if (variant_ == Variant::ODELite && initial.u_dot != 0.0) {
      throw ConfigError("state", "ode_lite carries no velocity; initial u_dot must be 0");
    }
    if (!std::isfinite(initial.u) || !std::isfinite(initial.u_dot)) {
      throw ConfigError("state", "initial state must be finite");
    }
  }

  GateStep advance(double u_star) {
    switch (variant_) {
      case Variant::StaticOnly:
        state_ = {};
        return {0.0, state_};
      case Variant::KnobIA:
        state_ = GateState{u_star, 0.0};
        return {sigmoid(u_star), state_};
      case Variant::ODELite: {
        const double prev = mode_ == InferenceMode::Reset ? 0.0 : state_.u;
        state_ = GateState{ema_gate(prev, u_star, ema_), 0.0};
        return {sigmoid(state_.u), state_};
      }
      case Variant::KnobODE: {
        const auto out = infer_gate(u_star, system_, mode_, state_);
        state_ = out.state;
        return {out.gate, state_};
      }
    }
    return {};
  }

  void set_params(const SecondOrderParams& params) { system_ = discretize(params); }

  void set_mode(InferenceMode mode) {
    check_variant_mode(variant_, mode);
    mode_ = mode;
  }

  void reset() { state_ = {}; }

  Variant variant() const noexcept { return variant_; }
  InferenceMode mode() const noexcept { return mode_; }
  const DiscreteSystem& system() const noexcept { return system_; }
  const SecondOrderParams& params() const noexcept { return system_.params; }
  const GateState& state() const noexcept { return state_; }

 private:
  Variant variant_;
  InferenceMode mode_;
  DiscreteSystem system_;
  EmaParams ema_;
  GateState state_;
};

struct TraceRow {
  StreamSample sample;
  double u = 0.0;
  double g = 0.0;
  FusedOutput fused;

  std::size_t prediction() const { return argmax(fused.probs); }
  bool correct() const { return prediction() == sample.label; }
};

/// Runs one stream end to end. StaticOnly pins g = 0 and reports u = 0.
inline std::vector<TraceRow> run_stream(const SyntheticBranchModel& model, const SeveritySchedule& sched,
                                        const SecondOrderParams& params, InferenceMode mode, Variant variant,
                                        const EmaParams& ema = {}) {
  model.validate();
  sched.validate();
  GateProcessor gate(variant, mode, params, ema);
  Rng rng(model.rng_seed);
  std::vector<TraceRow> trace;
  trace.reserve(sched.horizon);
  for (std::size_t t = 0; t < sched.horizon; ++t) {
    TraceRow row;
    row.sample = generate_sample(model, schedule_value(sched, t), rng, t);
    const auto g = gate.advance(row.sample.u_star);
    row.u = g.state.u;
    row.g = g.g;
    row.fused = fuse(row.sample.pair, row.g);
    trace.push_back(std::move(row));
  }
  return trace;
}

}  // namespace knob
