#include <csignal>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <boost/asio/signal_set.hpp>

#include "CLI11.hpp"
#include "json.hpp"
#include "knob/config.hpp"
#include "knob/dynamics.hpp"
#include "knob/errors.hpp"
#include "knob/gatelearn.hpp"
#include "knob/io/reports.hpp"
#include "knob/metrics.hpp"
#include "knob/probes.hpp"
#include "knob/service/server.hpp"
#include "knob/simstream.hpp"
#include "knob/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

/// Usage problem detected after parsing (e.g. a missing --seed).
struct UsageError : std::runtime_error {
  UsageError(const CLI::App* cmd, const std::string& what) : std::runtime_error(what), cmd(cmd) {}
  const CLI::App* cmd;
};

/// Flag values; each one, when given, overrides the config file.
struct Flags {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
  std::optional<double> zeta, omega_n, dt, alpha;
  std::optional<std::string> mode, variant;

  std::optional<double> amplitude;
  std::optional<std::size_t> horizon;

  std::optional<std::vector<double>> frequencies;
  std::optional<double> cycles_per_point, noise_sd, omega_min, omega_max;
  std::optional<std::size_t> realizations, points;

  std::optional<std::size_t> samples_per_severity, num_bins;

  std::optional<std::size_t> samples, epochs, batch_size;
  std::optional<double> learning_rate;
  std::optional<std::string> gate_mode;

  std::optional<std::string> host;
  std::optional<std::uint16_t> port;
  std::optional<double> frame_rate;
};

void add_common(CLI::App* cmd, Flags& f, bool with_seed) {
  cmd->add_option("-c,--config", f.config, "RunConfig JSON file")->check(CLI::ExistingFile);
  if (with_seed) cmd->add_option("--seed", f.seed, "Master RNG seed (required here unless set in the config)");
  cmd->add_option("-o,--output-dir", f.output_dir, "Directory for output files");
  cmd->add_option("--zeta", f.zeta, "Damping ratio");
  cmd->add_option("--omega-n", f.omega_n, "Natural frequency (rad per time unit)");
  cmd->add_option("--dt", f.dt, "Time step");
}

void add_gate(CLI::App* cmd, Flags& f) {
  cmd->add_option("--variant", f.variant, "knob_ode | ode_lite | knob_ia | static_only");
  cmd->add_option("--alpha", f.alpha, "ODE-Lite smoothing coefficient");
}

template <typename T, typename U>
void put(const std::optional<T>& flag, U& field) {
  if (flag) field = *flag;
}

knob::RunConfig build_config(const Flags& f) {
  knob::RunConfig cfg;
  if (f.config) cfg = knob::load_run_config(*f.config);
  if (f.seed) cfg.seed = *f.seed;
  put(f.output_dir, cfg.output_dir);
  put(f.zeta, cfg.params.zeta);
  put(f.omega_n, cfg.params.omega_n);
  put(f.dt, cfg.params.dt);
  put(f.alpha, cfg.ema.alpha);
  if (f.mode) {
    auto m = knob::parse_mode(*f.mode);
    if (!m) throw knob::ConfigError("mode", "must be reset or continuous");
    cfg.mode = *m;
  }
  if (f.variant) {
    auto v = knob::parse_variant(*f.variant);
    if (!v) throw knob::ConfigError("variant", "must be one of knob_ode, ode_lite, knob_ia, static_only");
    cfg.variant = *v;
  }
  put(f.amplitude, cfg.step.amplitude);
  put(f.amplitude, cfg.bode.amplitude);
  if (f.horizon) cfg.step.horizon = *f.horizon;
  put(f.frequencies, cfg.bode.frequencies);
  put(f.cycles_per_point, cfg.bode.cycles_per_point);
  put(f.noise_sd, cfg.bode.noise_sd);
  put(f.omega_min, cfg.bode.omega_min);
  put(f.omega_max, cfg.bode.omega_max);
  put(f.realizations, cfg.bode.realizations);
  put(f.points, cfg.bode.points);
  put(f.samples_per_severity, cfg.calibrate.samples_per_severity);
  put(f.num_bins, cfg.calibrate.num_bins);
  put(f.samples, cfg.learn.samples);
  put(f.epochs, cfg.learn.epochs);
  put(f.batch_size, cfg.learn.batch_size);
  put(f.learning_rate, cfg.learn.learning_rate);
  if (f.gate_mode) {
    auto g = knob::parse_gate_mode(*f.gate_mode);
    if (!g) throw knob::ConfigError("learn.gate_mode", "must be knob_ia or knob_ode_reset");
    cfg.learn.gate_mode = *g;
  }
  put(f.host, cfg.service.host);
  put(f.port, cfg.service.port);
  put(f.frame_rate, cfg.service.frame_rate);
  knob::resolve_seeds(cfg);
  return cfg;
}

void require_seed(const knob::RunConfig& cfg, const CLI::App* cmd) {
  if (!cfg.seed) throw UsageError(cmd, "--seed is required for " + cmd->get_name() + " (or set \"seed\" in the config)");
}

fs::path prepare_output(const knob::RunConfig& cfg) {
  fs::path dir(cfg.output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw knob::IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

knob::io::RunInfo run_info(const std::string& command, const knob::RunConfig& cfg) {
  return {command, knob::to_json(cfg), cfg.seed};
}

void report(const std::vector<fs::path>& files) {
  std::cout << "wrote";
  for (const auto& p : files) std::cout << ' ' << p.string();
  std::cout << '\n';
}

int cmd_step(const knob::RunConfig& cfg) {
  const auto sys = knob::discretize(cfg.params);
  const std::size_t horizon = cfg.step.horizon.value_or(knob::recommended_horizon(sys));
  const auto resp = knob::step_response(sys, cfg.step.amplitude, horizon);

  json metrics = {{"params", knob::io::to_json(cfg.params)},
                  {"amplitude", cfg.step.amplitude},
                  {"horizon", horizon},
                  {"damping", knob::to_string(knob::classify_damping(cfg.params))},
                  {"metrics", knob::io::to_json(resp.metrics)}};
  const auto dir = prepare_output(cfg);
  const auto info = run_info("step", cfg);
  knob::io::write_output(dir / "step_trace.csv", knob::io::step_trace_csv(resp), info);
  knob::io::write_output(dir / "step_metrics.json", metrics.dump(2) + "\n", info);
  report({dir / "step_trace.csv", dir / "step_metrics.json"});
  return kExitOk;
}

int cmd_bode(const knob::RunConfig& cfg) {
  const auto sys = knob::discretize(cfg.params);
  const auto freqs = knob::bode_frequencies(cfg);
  knob::BodeOptions opt;
  opt.amplitude = cfg.bode.amplitude;
  opt.cycles_per_point = cfg.bode.cycles_per_point;
  opt.realizations = cfg.bode.realizations;
  opt.noise_sd = cfg.bode.noise_sd;
  opt.seed = knob::sub_seed(cfg, knob::SeedStream::Bode);
  const auto points = knob::bode_sweep(sys, freqs, opt);

  const auto dir = prepare_output(cfg);
  knob::io::write_output(dir / "bode.csv", knob::io::bode_csv(points, cfg.params), run_info("bode", cfg));
  report({dir / "bode.csv"});
  return kExitOk;
}

int cmd_calibrate(const knob::RunConfig& cfg) {
  // Reset-mode records: the gate sees each sample independently.
  knob::GateProcessor gate(cfg.variant, knob::InferenceMode::Reset, cfg.params, cfg.ema);
  knob::Rng rng(cfg.model.rng_seed);
  const bool static_only = cfg.variant == knob::Variant::StaticOnly;
  const std::size_t n = cfg.calibrate.samples_per_severity;

  std::vector<knob::E1Input> e1_in;
  std::vector<knob::PredictionRecord> clean, corrupted;
  e1_in.reserve(6 * n);
  for (int sev = 0; sev <= 5; ++sev) {
    for (std::size_t i = 0; i < n; ++i) {
      auto s = knob::generate_sample(cfg.model, sev, rng, i);
      if (static_only) s.pair.z_dyn = s.pair.z_static;  // no dynamic branch, so no fusion
      const double g = gate.advance(s.u_star).g;
      const auto fused = knob::fuse(s.pair, g);
      knob::PredictionRecord rec{fused.probs, s.label, sev, "synthetic"};
      (sev == 0 ? clean : corrupted).push_back(std::move(rec));
      e1_in.push_back({sev, std::move(s.pair), g});
    }
  }
  const auto e1 = knob::e1_analysis(e1_in);
  const auto bins = cfg.calibrate.num_bins;
  json out = {{"variant", knob::to_string(cfg.variant)},
              {"mode", "reset"},
              {"samples_per_severity", n},
              {"e1", knob::io::to_json(e1)},
              {"clean", knob::io::to_json(knob::calibration_report(clean, bins))},
              {"corrupted", knob::io::to_json(knob::calibration_report(corrupted, bins))}};

  const auto dir = prepare_output(cfg);
  const auto info = run_info("calibrate", cfg);
  knob::io::write_output(dir / "e1.csv", knob::io::e1_csv(e1), info);
  knob::io::write_output(dir / "calibration.json", out.dump(2) + "\n", info);
  report({dir / "e1.csv", dir / "calibration.json"});
  return kExitOk;
}

int cmd_learn(const knob::RunConfig& cfg) {
  const auto data = knob::make_learning_dataset(cfg.model, cfg.learn.samples);
  knob::TrainOptions opt;
  opt.epochs = cfg.learn.epochs;
  opt.learning_rate = cfg.learn.learning_rate;
  opt.batch_size = cfg.learn.batch_size;
  opt.mode = cfg.learn.gate_mode;
  opt.params = cfg.params;
  opt.seed = knob::sub_seed(cfg, knob::SeedStream::Learn);
  const auto result = knob::train_gate(knob::GateModel{}, data, opt);

  json model = {{"gate_mode", knob::to_string(result.report.mode)},
                {"shrink", result.report.shrink},
                {"model", knob::io::to_json(result.model)}};
  const auto dir = prepare_output(cfg);
  const auto info = run_info("learn", cfg);
  knob::io::write_output(dir / "e2.csv", knob::io::e2_csv(result.report), info);
  knob::io::write_output(dir / "gate_model.json", model.dump(2) + "\n", info);
  report({dir / "e2.csv", dir / "gate_model.json"});
  return kExitOk;
}

int cmd_simulate(const knob::RunConfig& cfg) {
  const auto trace = knob::run_stream(cfg.model, cfg.schedule, cfg.params, cfg.mode, cfg.variant, cfg.ema);
  const auto dir = prepare_output(cfg);
  knob::io::write_output(dir / "trace.csv", knob::io::trace_csv(trace), run_info("simulate", cfg));
  report({dir / "trace.csv"});
  return kExitOk;
}

int cmd_serve(const knob::RunConfig& cfg) {
  namespace net = boost::asio;
  net::io_context io;
  knob::service::Server server(io, cfg);
  net::ip::tcp::endpoint ep;
  try {
    ep = server.listen(cfg.service.host, cfg.service.port);
  } catch (const boost::system::system_error& e) {
    std::cerr << "knobctl serve: cannot bind " << cfg.service.host << ':' << cfg.service.port << ": "
              << e.code().message() << '\n';
    return kExitRuntime;
  }
  net::signal_set signals(io, SIGINT, SIGTERM);
  signals.async_wait([&](const boost::system::error_code&, int) {
    server.stop();
    io.stop();
  });
  std::cout << "knobctl serve: listening on http://" << ep.address().to_string() << ':' << ep.port() << std::endl;
  io.run();
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Second-order damped gate: probes, simulator and live-control service", "knobctl"};
  app.set_version_flag("--version", knob::kVersion);
  app.require_subcommand(1);

  Flags f;
  auto* step = app.add_subcommand("step", "Step response of the latent gate");
  add_common(step, f, true);
  step->add_option("--amplitude", f.amplitude, "Step height of u*");
  step->add_option("--horizon", f.horizon, "Number of steps (default: until the slowest mode has decayed)");

  auto* bode = app.add_subcommand("bode", "Empirical frequency response of the latent gate");
  add_common(bode, f, true);
  bode->add_option("--amplitude", f.amplitude, "Drive amplitude");
  bode->add_option("--frequencies", f.frequencies, "Drive frequencies in cycles per step");
  bode->add_option("--cycles-per-point", f.cycles_per_point, "Fitted cycles per frequency (>= 5)");
  bode->add_option("--realizations", f.realizations, "Noisy realizations per frequency");
  bode->add_option("--noise-sd", f.noise_sd, "Additive drive noise");
  bode->add_option("--omega-min", f.omega_min, "Sweep start (rad per time unit)");
  bode->add_option("--omega-max", f.omega_max, "Sweep end (rad per time unit)");
  bode->add_option("--points", f.points, "Sweep points");

  auto* calibrate = app.add_subcommand("calibrate", "Confidence-shrinkage analysis and calibration metrics");
  add_common(calibrate, f, true);
  add_gate(calibrate, f);
  calibrate->add_option("--samples-per-severity", f.samples_per_severity, "Records per severity level");
  calibrate->add_option("--num-bins", f.num_bins, "Reliability bins");

  auto* learn = app.add_subcommand("learn", "Train the linear gate command and track alignment metrics");
  add_common(learn, f, true);
  learn->add_option("--samples", f.samples, "Training samples");
  learn->add_option("--epochs", f.epochs, "Epochs");
  learn->add_option("--learning-rate", f.learning_rate, "Gradient step size");
  learn->add_option("--batch-size", f.batch_size, "Mini-batch size (0 = full batch)");
  learn->add_option("--gate-mode", f.gate_mode, "knob_ia | knob_ode_reset");

  auto* simulate = app.add_subcommand("simulate", "Run one stream and write its trace");
  add_common(simulate, f, true);
  add_gate(simulate, f);
  simulate->add_option("--mode", f.mode, "reset | continuous");

  auto* serve = app.add_subcommand("serve", "Start the live-control service");
  add_common(serve, f, true);
  add_gate(serve, f);
  serve->add_option("--mode", f.mode, "reset | continuous");
  serve->add_option("--host", f.host, "Bind address");
  serve->add_option("--port", f.port, "Bind port (0 = ephemeral)");
  serve->add_option("--frame-rate", f.frame_rate, "Default frames per second for new sessions");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* failing = &app;
    for (const auto* sub : app.get_subcommands()) failing = sub;
    std::cerr << failing->help();
    return kExitUsage;
  }

  const auto* cmd = app.get_subcommands().front();
  try {
    knob::RunConfig cfg = build_config(f);
    const std::string name = cmd->get_name();
    if (name == "calibrate") cfg.mode = knob::InferenceMode::Reset;  // records are always per-sample
    knob::validate(cfg);
    if (name == "step") return cmd_step(cfg);
    if (name == "serve") return cmd_serve(cfg);
    require_seed(cfg, cmd);
    if (name == "bode") return cmd_bode(cfg);
    if (name == "calibrate") return cmd_calibrate(cfg);
    if (name == "learn") return cmd_learn(cfg);
    if (name == "simulate") return cmd_simulate(cfg);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << e.cmd->help();
    return kExitUsage;
  } catch (const knob::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const knob::ParameterError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitRuntime;
}
