#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "knob/config.hpp"
#include "knob/dynamics.hpp"
#include "knob/errors.hpp"
#include "knob/fusion.hpp"
#include "knob/io/csv.hpp"
#include "knob/linalg.hpp"
#include "knob/random.hpp"
#include "knob/simstream.hpp"

namespace knob::service {

using nlohmann::json;

struct Frame {
  std::uint64_t t = 0;
  double severity = 0.0;
  double u_star = 0.0;
  double u = 0.0;
  double u_dot = 0.0;
  double g = 0.0;
  double p_max = 0.0;
  std::size_t pred = 0;
  std::size_t label = 0;
  double zeta = 0.0;
  double omega_n = 0.0;
  InferenceMode mode = InferenceMode::Continuous;
  bool reset = false;  // state was zeroed at this step instead of advanced

  friend bool operator==(const Frame&, const Frame&) = default;
};

enum class ControlType { SetZeta, SetOmegaN, SetSchedule, SetMode, Pause, Resume, ResetState, SetRate };

inline std::string_view to_string(ControlType c) {
  switch (c) {
    case ControlType::SetZeta: return "set_zeta";
    case ControlType::SetOmegaN: return "set_omega_n";
    case ControlType::SetSchedule: return "set_schedule";
    case ControlType::SetMode: return "set_mode";
    case ControlType::Pause: return "pause";
    case ControlType::Resume: return "resume";
    case ControlType::ResetState: return "reset_state";
    case ControlType::SetRate: return "set_rate";
  }
  return "unknown";
}

inline std::optional<ControlType> parse_control_type(std::string_view s) {
  for (auto c : {ControlType::SetZeta, ControlType::SetOmegaN, ControlType::SetSchedule, ControlType::SetMode,
                 ControlType::Pause, ControlType::Resume, ControlType::ResetState, ControlType::SetRate}) {
    if (to_string(c) == s) return c;
  }
  return std::nullopt;
}

struct ControlMsg {
  ControlType type = ControlType::Pause;
  double value = 0.0;                     // set_zeta, set_omega_n, set_rate
  std::optional<SeveritySchedule> schedule;  // set_schedule
  InferenceMode mode = InferenceMode::Continuous;  // set_mode

  static ControlMsg set_zeta(double v) { return {ControlType::SetZeta, v, std::nullopt, {}}; }
  static ControlMsg set_omega_n(double v) { return {ControlType::SetOmegaN, v, std::nullopt, {}}; }
  static ControlMsg set_rate(double v) { return {ControlType::SetRate, v, std::nullopt, {}}; }
  static ControlMsg set_mode(InferenceMode m) { return {ControlType::SetMode, 0.0, std::nullopt, m}; }
  static ControlMsg set_schedule(SeveritySchedule s) { return {ControlType::SetSchedule, 0.0, std::move(s), {}}; }
  static ControlMsg of(ControlType t) { return {t, 0.0, std::nullopt, {}}; }
};

/// Wire form: {"type": "set_zeta", "value": 2.0}, {"type": "set_mode",
/// "mode": "reset"}, {"type": "set_schedule", "schedule": {...}}, {"type": "pause"}.
inline json to_json(const ControlMsg& m) {
  json j = {{"type", to_string(m.type)}};
  switch (m.type) {
    case ControlType::SetZeta:
    case ControlType::SetOmegaN:
    case ControlType::SetRate: j["value"] = m.value; break;
    case ControlType::SetSchedule: j["schedule"] = schedule_to_json(*m.schedule); break;
    case ControlType::SetMode: j["mode"] = to_string(m.mode); break;
    default: break;
  }
  return j;
}

/// Parses a control and checks it against the same invariants the config
/// loader applies. Throws ConfigError naming the offending field.
inline ControlMsg parse_control(const json& j) {
  if (!j.is_object()) throw ConfigError("type", "control must be a JSON object");
  auto it = j.find("type");
  if (it == j.end() || !it->is_string()) throw ConfigError("type", "missing control type");
  const auto type = parse_control_type(it->get<std::string>());
  if (!type) throw ConfigError("type", "unknown control type '" + it->get<std::string>() + "'");

  ControlMsg m = ControlMsg::of(*type);
  std::vector<std::string_view> allowed{"type"};
  switch (*type) {
    case ControlType::SetZeta:
    case ControlType::SetOmegaN:
    case ControlType::SetRate: {
      allowed.push_back("value");
      auto v = j.find("value");
      if (v == j.end() || !v->is_number()) throw ConfigError("value", "must be a number");
      m.value = v->get<double>();
      const char* field = *type == ControlType::SetZeta ? "zeta" : *type == ControlType::SetOmegaN ? "omega_n" : "rate";
      if (!std::isfinite(m.value)) throw ConfigError(field, "must be finite");
      if (*type == ControlType::SetRate) {
        if (m.value < kMinFrameRate || m.value > kMaxFrameRate) throw ConfigError(field, "must lie in [1, 100]");
      } else if (!(m.value > 0.0)) {
        throw ConfigError(field, "must be > 0");
      }
      break;
    }
    case ControlType::SetMode: {
      allowed.push_back("mode");
      auto v = j.find("mode");
      if (v == j.end() || !v->is_string()) throw ConfigError("mode", "must be \"reset\" or \"continuous\"");
      const auto mode = parse_mode(v->get<std::string>());
      if (!mode) throw ConfigError("mode", "must be \"reset\" or \"continuous\"");
      m.mode = *mode;
      break;
    }
    case ControlType::SetSchedule: {
      allowed.push_back("schedule");
      auto v = j.find("schedule");
      if (v == j.end()) throw ConfigError("schedule", "missing schedule object");
      m.schedule = parse_schedule(*v);
      break;
    }
    default: break;
  }
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError(key, "unknown field for " + std::string(to_string(*type)));
    }
  }
  return m;
}

/// A control together with the step index at which it took effect.
struct ControlRecord {
  std::uint64_t applied_at_t = 0;
  ControlMsg msg;
};

inline json to_json(const ControlRecord& r) { return {{"applied_at_t", r.applied_at_t}, {"control", to_json(r.msg)}}; }

inline json to_json(const Frame& f) {
  return {{"type", "frame"},   {"t", f.t},         {"severity", f.severity}, {"u_star", f.u_star},
          {"u", f.u},          {"u_dot", f.u_dot}, {"g", f.g},               {"p_max", f.p_max},
          {"pred", f.pred},    {"label", f.label}, {"zeta", f.zeta},         {"omega_n", f.omega_n},
          {"mode", to_string(f.mode)},             {"reset", f.reset}};
}

inline std::string frames_csv(std::span<const Frame> frames) {
  io::CsvWriter w({"t", "severity", "u_star", "u", "u_dot", "g", "p_max", "pred", "label", "zeta", "omega_n", "mode",
                   "reset"});
  for (const auto& f : frames) {
    w.cell(f.t).cell(f.severity).cell(f.u_star).cell(f.u).cell(f.u_dot).cell(f.g).cell(f.p_max);
    w.cell(f.pred).cell(f.label).cell(f.zeta).cell(f.omega_n).cell(to_string(f.mode)).cell(f.reset);
    w.end_row();
  }
  return w.str();
}

/// Deterministic core of a session: config + control sequence -> frames.
/// No clocks, no locks; the live Session and the replay share this.
class Engine {
 public:
  explicit Engine(RunConfig cfg)
      : cfg_(checked(std::move(cfg))), gate_(cfg_.variant, cfg_.mode, cfg_.params, cfg_.ema), rng_(cfg_.model.rng_seed) {}

  /// Applies a control at the current step boundary. Throws ConfigError and
  /// leaves the engine untouched if the control cannot be applied.
  void apply(const ControlMsg& m) {
    switch (m.type) {
      case ControlType::SetZeta:
      case ControlType::SetOmegaN: {
        SecondOrderParams p = cfg_.params;
        (m.type == ControlType::SetZeta ? p.zeta : p.omega_n) = m.value;
        try {
          gate_.set_params(p);
        } catch (const ParameterError& e) {
          throw ConfigError(e.field(), e.what());
        } catch (const SingularMatrixError& e) {
          throw ConfigError(m.type == ControlType::SetZeta ? "zeta" : "omega_n", e.what());
        }
        cfg_.params = p;
        break;
      }
      case ControlType::SetSchedule:
        cfg_.schedule = *m.schedule;
        cfg_.schedule.rng_seed = sub_seed(cfg_, SeedStream::Schedule);
        schedule_origin_ = t_;
        break;
      case ControlType::SetMode:
        gate_.set_mode(m.mode);
        cfg_.mode = m.mode;
        break;
      case ControlType::ResetState: pending_reset_ = true; break;
      case ControlType::SetRate: cfg_.service.frame_rate = m.value; break;
      case ControlType::Pause:
      case ControlType::Resume: break;
    }
  }

  /// Produces the frame for the current t and advances t.
  Frame step() {
    const auto& sched = cfg_.schedule;
    const double severity = schedule_value(sched, (t_ - schedule_origin_) % sched.horizon);
    const StreamSample s = generate_sample(cfg_.model, severity, rng_, static_cast<std::size_t>(t_));

    Frame f;
    f.t = t_;
    f.severity = severity;
    f.u_star = s.u_star;
    f.label = s.label;
    f.zeta = cfg_.params.zeta;
    f.omega_n = cfg_.params.omega_n;
    f.mode = gate_.mode();
    double g = 0.0;
    if (pending_reset_) {
      gate_.reset();
      pending_reset_ = false;
      f.reset = true;
      g = cfg_.variant == Variant::StaticOnly ? 0.0 : gate_readout(gate_.state());
    } else {
      g = gate_.advance(s.u_star).g;
    }
    f.u = gate_.state().u;
    f.u_dot = gate_.state().u_dot;
    f.g = g;
    const auto fused = fuse(s.pair, g);
    f.p_max = fused.p_max;
    f.pred = argmax(fused.probs);

    if (!std::isfinite(f.u) || !std::isfinite(f.u_dot) || !(spectral_radius(gate_.system().a_d) < 1.0)) {
      throw Error("session state left the stable region at t=" + std::to_string(t_));
    }
    ++t_;
    return f;
  }

  std::uint64_t t() const noexcept { return t_; }
  const RunConfig& config() const noexcept { return cfg_; }
  const GateState& state() const noexcept { return gate_.state(); }

 private:
  static RunConfig checked(RunConfig cfg) {
    validate(cfg);
    return cfg;
  }

  RunConfig cfg_;
  GateProcessor gate_;
  Rng rng_;
  std::uint64_t t_ = 0;
  std::uint64_t schedule_origin_ = 0;
  bool pending_reset_ = false;
};

/// 16 random bytes as 32 lowercase hex digits.
inline std::string new_session_id() {
  static std::mutex mu;
  static std::random_device rd;
  std::array<unsigned char, 16> bytes{};
  {
    std::lock_guard lock(mu);
    for (std::size_t i = 0; i < bytes.size(); i += 4) {
      const auto r = rd();
      for (std::size_t k = 0; k < 4; ++k) bytes[i + k] = static_cast<unsigned char>(r >> (8 * k));
    }
  }
  std::string out;
  out.reserve(32);
  char buf[3];
  for (unsigned char b : bytes) {
    std::snprintf(buf, sizeof buf, "%02x", b);
    out += buf;
  }
  return out;
}

struct Ack {
  ControlType type = ControlType::Pause;
  std::uint64_t applied_at_t = 0;
  std::optional<std::string> error_field;  // set when application failed
  std::string error;
};

inline json to_json(const Ack& a) {
  if (a.error_field) {
    return {{"type", "error"}, {"control", to_string(a.type)}, {"field", *a.error_field}, {"message", a.error}};
  }
  return {{"type", "ack"}, {"control", to_string(a.type)}, {"applied_at_t", a.applied_at_t}};
}

using AckHandler = std::function<void(const Ack&)>;

struct TickResult {
  std::optional<Frame> frame;
  std::size_t controls_applied = 0;
};

/// A live session: an Engine plus a mailbox, the pause flag and the logs.
/// submit() may be called from any thread; tick() is driven by one ticker.
class Session {
 public:
  Session(std::string id, RunConfig cfg) : id_(std::move(id)), engine_(std::move(cfg)), initial_(engine_.config()) {}

  const std::string& id() const noexcept { return id_; }
  const RunConfig& initial_config() const noexcept { return initial_; }

  /// Queues a control for the next step boundary. It has already passed
  /// parse_control; variant/mode conflicts are caught here so a bad control
  /// never reaches the queue.
  void submit(ControlMsg msg, AckHandler on_applied = {}) {
    if (msg.type == ControlType::SetMode) check_variant_mode(initial_.variant, msg.mode);
    std::lock_guard lock(mailbox_mu_);
    mailbox_.push_back({std::move(msg), std::move(on_applied)});
  }

  /// One step boundary: drain the mailbox, apply controls in arrival order,
  /// then produce a frame unless paused.
  TickResult tick() {
    std::vector<Pending> batch;
    {
      std::lock_guard lock(mailbox_mu_);
      batch.swap(mailbox_);
    }
    std::vector<std::pair<AckHandler, Ack>> acks;
    TickResult out;
    {
      std::lock_guard lock(state_mu_);
      for (auto& p : batch) {
        Ack ack{p.msg.type, engine_.t(), std::nullopt, {}};
        try {
          engine_.apply(p.msg);
          if (p.msg.type == ControlType::Pause) paused_ = true;
          if (p.msg.type == ControlType::Resume) paused_ = false;
          controls_.push_back({engine_.t(), p.msg});
          ++out.controls_applied;
        } catch (const ConfigError& e) {
          ack.error_field = e.field();
          ack.error = e.what();
          ++rejected_;
        }
        acks.emplace_back(std::move(p.on_applied), std::move(ack));
      }
      if (!paused_) {
        out.frame = engine_.step();
        frames_.push_back(*out.frame);
      }
    }
    for (auto& [handler, ack] : acks) {
      if (handler) handler(ack);
    }
    return out;
  }

  bool paused() const {
    std::lock_guard lock(state_mu_);
    return paused_;
  }

  double frame_rate() const {
    std::lock_guard lock(state_mu_);
    return engine_.config().service.frame_rate;
  }

  std::vector<Frame> frames() const {
    std::lock_guard lock(state_mu_);
    return frames_;
  }

  std::vector<ControlRecord> control_log() const {
    std::lock_guard lock(state_mu_);
    return controls_;
  }

  json snapshot() const {
    std::lock_guard lock(state_mu_);
    const auto& c = engine_.config();
    return {{"id", id_},
            {"t", engine_.t()},
            {"paused", paused_},
            {"zeta", c.params.zeta},
            {"omega_n", c.params.omega_n},
            {"dt", c.params.dt},
            {"mode", to_string(c.mode)},
            {"variant", to_string(c.variant)},
            {"frame_rate", c.service.frame_rate},
            {"u", engine_.state().u},
            {"u_dot", engine_.state().u_dot},
            {"frames_logged", frames_.size()},
            {"controls_applied", controls_.size()},
            {"controls_rejected", rejected_},
            {"schedule", schedule_to_json(c.schedule)}};
  }

 private:
  struct Pending {
    ControlMsg msg;
    AckHandler on_applied;
  };

  std::string id_;
  Engine engine_;
  RunConfig initial_;

  mutable std::mutex mailbox_mu_;
  std::vector<Pending> mailbox_;

  mutable std::mutex state_mu_;
  bool paused_ = true;  // sessions start paused until resume
  std::vector<Frame> frames_;
  std::vector<ControlRecord> controls_;
  std::size_t rejected_ = 0;
};

/// Rebuilds `n_frames` frames from the initial config and the control log.
inline std::vector<Frame> replay(const RunConfig& initial, std::span<const ControlRecord> log, std::size_t n_frames) {
  Engine engine(initial);
  std::vector<Frame> out;
  out.reserve(n_frames);
  std::size_t next = 0;
  while (out.size() < n_frames) {
    while (next < log.size() && log[next].applied_at_t == engine.t()) engine.apply(log[next++].msg);
    out.push_back(engine.step());
  }
  return out;
}

/// Builds a session config from a creation request: the JSON overlays the
/// service defaults, a missing seed is filled from `fallback_seed`, sub-seeds
/// are resolved and everything is validated.
inline RunConfig session_config(const json& request, const RunConfig& defaults, std::uint64_t fallback_seed) {
  RunConfig cfg = parse_run_config(request, defaults);
  if (!cfg.seed) cfg.seed = fallback_seed;
  resolve_seeds(cfg);
  validate(cfg);
  return cfg;
}

}  // namespace knob::service
