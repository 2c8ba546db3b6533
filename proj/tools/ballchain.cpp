// ballchain: batch analyses and the teleoperation server.
//
// Exit codes: 0 ok, 1 runtime or solver failure, 2 usage or validation error.

#include <chrono>
#include <csignal>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "ballchain/actuation.hpp"
#include "ballchain/scenario.hpp"
#include "ballchain/session.hpp"
#include "ballchain/sizing.hpp"
#include "ballchain/statics.hpp"
#include "ballchain/teleop_service.hpp"

using namespace ballchain;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr double kDegree = std::numbers::pi / 180.0;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::string scenario;
  std::string out;
  std::uint64_t seed = 0;
  std::optional<double> angle;  // deg
  std::vector<int> balls;
  std::optional<double> field_mt;
  std::string sleeve;  // "", "on", "off"
  std::string bind = "127.0.0.1:8080";
  double step = 5.0;  // deg, sweep resolution
  std::string static_dir;
  std::string commands;  // serve: command log for replay
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

/// A path, or the name of a bundled scenario.
std::string resolve_scenario_path(const std::string& name_or_path) {
  if (std::filesystem::exists(name_or_path)) return name_or_path;
  const std::string bundled = bundled_scenario_path(name_or_path);
  if (std::filesystem::exists(bundled)) return bundled;
  throw UsageError("no scenario file or bundled scenario named '" + name_or_path + "'");
}

Json scenario_document(const Options& o, const std::string& fallback) {
  const std::string src = !o.config.empty() ? o.config : !o.scenario.empty() ? o.scenario : fallback;
  return load_json_file(resolve_scenario_path(src));
}

/// Output sink: the --out file, or stdout.
class Sink {
 public:
  explicit Sink(const std::string& path) {
    if (!path.empty()) {
      file_.open(path, std::ios::binary);
      if (!file_) throw std::runtime_error("cannot write '" + path + "'");
    }
  }
  std::ostream& stream() { return file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout; }

 private:
  std::ofstream file_;
};

/// Reproducibility snapshot: next to --out, or as one JSON line on stderr.
void emit_snapshot(const std::string& command, const std::vector<std::string>& argv, const Options& o,
                   const Json& resolved, const std::string& started) {
  Json snap = {{"command", command},
               {"argv", argv},
               {"seed", o.seed},
               {"config", resolved},
               {"outputs", o.out.empty() ? Json::array() : Json::array({o.out})},
               {"started", started},
               {"finished", utc_now()}};
  if (o.out.empty()) {
    std::cerr << snap.dump() << '\n';
  } else {
    std::ofstream(o.out + ".run.json") << snap.dump(2) << '\n';
  }
}

void apply_overrides(Scenario& s, const Options& o) {
  if (!o.balls.empty()) {
    s.chain.n = o.balls.front();
    s.max_balls = std::max(s.max_balls, s.chain.n);
    if (s.chain.n < 1) throw UsageError("--balls must be >= 1");
  }
  if (o.sleeve == "on") s.chain.sleeve.enabled = true;
  if (o.sleeve == "off") s.chain.sleeve.enabled = false;
  if (o.field_mt) {
    if (!(*o.field_mt > 0.0)) throw UsageError("--field-mt must be positive");
    s.field_mode = EnvField::Mode::kUniform;
    s.uniform_magnitude = *o.field_mt * 1e-3 / static_cast<double>(s.units.size());
  }
  s.solver.seed = o.seed;
  if (o.angle) {
    const Vec3 dir = in_plane_direction(s.chain.base_tangent, Vec3::UnitZ(), *o.angle * kDegree);
    for (UnitSlot& u : s.units) {
      const Vec3 m = s.field_mode == EnvField::Mode::kUniform
                         ? dir
                         : dipole_for_field(u.unit.position, s.chain.base_position, dir);
      u.unit.rotation = rotation_for_dipole(m);
    }
  }
}

int cmd_solve(const Options& o, const std::vector<std::string>& argv) {
  const std::string started = utc_now();
  Scenario s = load_scenario(scenario_document(o, "uniform-alignment"));
  apply_overrides(s, o);
  const EnvField env = s.field(s.initial_rotations());
  SolverConfig solver = s.solver;
  const Equilibrium eq = solve_equilibrium(s.chain, env, solver);
  const Vec3 b = env.field_at(s.chain.base_position);
  Json out = {{"shape", to_json(eq.shape)},
              {"diagnostics", to_json(eq.diagnostics)},
              {"tip_mm", to_json(eq.shape.tip() * 1e3)},
              {"field_at_entry_T", to_json(b)},
              {"n", s.chain.n}};
  if (s.field_mode == EnvField::Mode::kUniform && b.norm() > 0.0) {
    out["tip_alignment_deg"] = alignment_angle(b, tip_tangent(eq.shape)) / kDegree;
  }
  Sink sink(o.out);
  sink.stream() << out.dump(2) << '\n';
  emit_snapshot("solve", argv, o, scenario_to_json(s), started);
  if (!eq.diagnostics.converged) {
    std::cerr << "solve: equilibrium not converged (" << eq.diagnostics.status << ")\n";
    return kExitFailure;
  }
  return kExitOk;
}

int cmd_sweep(const Options& o, const std::vector<std::string>& argv) {
  const std::string started = utc_now();
  Scenario s = load_scenario(scenario_document(o, "bench-sweep"));
  const std::vector<int> lengths = o.balls.empty() ? std::vector<int>{4, 9, 16} : o.balls;
  Options base = o;
  base.balls.clear();
  base.angle.reset();
  apply_overrides(s, base);
  if (!(o.step > 0.0)) throw UsageError("--step must be positive");
  std::vector<double> angles;
  const int steps = static_cast<int>(std::floor(180.0 / o.step + 1e-9));
  for (int k = 0; k <= steps; ++k) angles.push_back(k * o.step * kDegree);
  const SweepResult r = sweep_workspace(s.chain, s.units.front().unit, angles, lengths, std::nullopt, s.solver);

  std::ostringstream csv;
  csv << "n,field_angle_deg,tip_x_mm,tip_y_mm,tip_z_mm\n" << std::setprecision(10);
  Json summary = {{"area_mm2", r.area * 1e6}, {"sleeve", s.chain.sleeve.enabled}, {"lengths", Json::array()}};
  int excluded = 0;
  for (const SweepTrace& t : r.traces) {
    for (std::size_t k = 0; k < t.tips.size(); ++k) {
      const Vec3 p = t.tips[k] * 1e3;
      csv << t.n << ',' << t.angles[k] / kDegree << ',' << p.x() << ',' << p.y() << ',' << p.z() << '\n';
    }
    Json ex = Json::array();
    for (double a : t.excluded) ex.push_back(a / kDegree);
    excluded += static_cast<int>(t.excluded.size());
    summary["lengths"].push_back({{"n", t.n}, {"area_mm2", t.area * 1e6}, {"excluded_angles_deg", ex}});
  }
  if (o.out.empty()) {
    std::cout << csv.str();
    std::cerr << summary.dump() << '\n';
  } else {
    Sink(o.out).stream() << csv.str();
    std::cout << summary.dump(2) << '\n';
  }
  emit_snapshot("sweep", argv, o, scenario_to_json(s), started);
  if (excluded > 0) std::cerr << "sweep: " << excluded << " angle(s) did not converge and were excluded\n";
  return kExitOk;
}

int cmd_align(const Options& o, const std::vector<std::string>& argv) {
  const std::string started = utc_now();
  ChainConfig c;
  if (!o.config.empty() || !o.scenario.empty()) c = load_scenario(scenario_document(o, "")).chain;
  if (o.sleeve == "on") c.sleeve.enabled = true;
  if (o.sleeve == "off") c.sleeve.enabled = false;
  const int max_n = o.balls.empty() ? 16 : o.balls.front();
  if (max_n < 1) throw UsageError("--balls must be >= 1");
  const double field = o.field_mt.value_or(23.0) * 1e-3;
  if (!(field > 0.0)) throw UsageError("--field-mt must be positive");
  std::vector<int> lengths;
  for (int n = 1; n <= max_n; ++n) lengths.push_back(n);
  std::vector<double> angles;
  for (int k = 0; k <= 8; ++k) angles.push_back(22.5 * k * kDegree);
  SolverConfig solver;
  solver.seed = o.seed;
  const auto rows = run_alignment_study(c, lengths, field, angles, solver);
  Sink(o.out).stream() << alignment_csv(rows);
  emit_snapshot("align", argv, o,
                {{"field_T", field}, {"lengths", lengths}, {"angles_deg", Json::array({0, 22.5, 45, 67.5, 90, 112.5, 135, 157.5, 180})},
                 {"sleeve", c.sleeve.enabled}},
                started);
  for (const auto& r : rows) {
    if (!r.converged) return kExitFailure;
  }
  return kExitOk;
}

SizingProblem read_sizing_problem(const std::string& path) {
  SizingProblem p;
  if (path.empty()) return p;
  const Json j = load_json_file(path);
  std::vector<std::string> issues;
  JsonReader in(issues);
  if (!j.is_object()) throw ValidationError({"$: sizing problem must be a JSON object"});
  in.known_keys(j, "$", {"measured_force", "desired_force", "measurement_distance", "patient_half_breadth",
                         "measurement_magnet", "ball_scale", "ball_diameter_new", "ball_diameter_old",
                         "density", "remanence"});
  p.measured_force = in.quantity(j, "measured_force", "$", Dim::kForce, p.measured_force);
  p.desired_force = in.quantity(j, "desired_force", "$", Dim::kForce, p.desired_force);
  p.measurement_distance = in.quantity(j, "measurement_distance", "$", Dim::kLength, p.measurement_distance);
  p.patient_half_breadth = in.quantity(j, "patient_half_breadth", "$", Dim::kLength, p.patient_half_breadth);
  const Json& m = in.object(j, "measurement_magnet", "$");
  if (!m.empty()) {
    in.known_keys(m, "$.measurement_magnet", {"diameter", "length"});
    p.measurement_magnet_volume =
        cylinder_volume(in.quantity(m, "diameter", "$.measurement_magnet", Dim::kLength, 76.2e-3),
                        in.quantity(m, "length", "$.measurement_magnet", Dim::kLength, 38.1e-3));
  }
  p.ball_scale = in.quantity(j, "ball_scale", "$", Dim::kDimensionless, p.ball_scale);
  if (j.contains("ball_diameter_new")) {
    const double dn = in.quantity(j, "ball_diameter_new", "$", Dim::kLength, 0.0);
    const double dold = in.quantity(j, "ball_diameter_old", "$", Dim::kLength, 3.175e-3);
    if (dn > 0.0 && dold > 0.0) p.ball_scale = ball_scale_factor(dn, dold);
  }
  p.magnet_density = in.quantity(j, "density", "$", Dim::kDensity, p.magnet_density);
  p.remanence = in.quantity(j, "remanence", "$", Dim::kField, p.remanence);
  if (!issues.empty()) throw ValidationError(issues);
  try {
    p.validate();
  } catch (const std::invalid_argument& e) {
    throw ValidationError({e.what()});
  }
  return p;
}

int cmd_design(const Options& o, const std::vector<std::string>& argv) {
  const std::string started = utc_now();
  const SizingProblem p = read_sizing_problem(o.config);
  const SizingReport r = design_magnet(p);
  const Json problem = {{"measured_force_N", p.measured_force},
                        {"desired_force_N", p.desired_force},
                        {"measurement_distance_m", p.measurement_distance},
                        {"patient_half_breadth_m", p.patient_half_breadth},
                        {"measurement_magnet_volume_m3", p.measurement_magnet_volume},
                        {"ball_scale", p.ball_scale},
                        {"density_kg_m3", p.magnet_density},
                        {"remanence_T", p.remanence}};
  if (!r.solution.found) {
    Sink(o.out).stream() << Json{{"found", false}, {"message", r.solution.message}}.dump(2) << '\n';
    emit_snapshot("design", argv, o, problem, started);
    std::cerr << "design: " << r.solution.message << '\n';
    return kExitFailure;
  }
  const Json out = {{"found", true},
                    {"d_d_mm", r.solution.diameter * 1e3},
                    {"mass_kg", r.mass},
                    {"inter_magnet_force_gf", r.inter_magnet_force / kGramForce},
                    {"residual", r.solution.residual},
                    {"assumptions",
                     "spherical magnets, cubic volume law; inter-magnet force is the coaxial aligned worst case "
                     "at center separation 2 (d_c + d_d/2) with the given remanence"}};
  Sink(o.out).stream() << out.dump(2) << '\n';
  emit_snapshot("design", argv, o, problem, started);
  return kExitOk;
}

int cmd_reconfig(const Options& o, const std::vector<std::string>& argv) {
  const std::string started = utc_now();
  ActuationUnit unit = reference_unit();
  ReconfigureOptions opt;
  if (!o.scenario.empty() || !o.config.empty()) {
    const Scenario s = load_scenario(scenario_document(o, ""));
    unit = s.units.front().unit;
    opt.gain = s.units.front().gain;
  }
  const double start = o.angle.value_or(90.0) * kDegree;
  if (start < 0.0 || start > std::numbers::pi) throw UsageError("--angle must lie in [0, 180]");
  // Tilt away from neutral about an axis chosen by the seed (seed 0: a fixed perpendicular).
  const Vec3 neutral = unit.neutral_dipole.normalized();
  Vec3 axis = ReconfigureController::perpendicular(neutral);
  if (o.seed != 0) {
    std::mt19937_64 rng(o.seed);
    std::uniform_real_distribution<double> phi(0.0, 2.0 * std::numbers::pi);
    axis = Eigen::AngleAxisd(phi(rng), neutral) * axis;
  }
  unit.rotation = rotation_for_dipole(Eigen::AngleAxisd(start, axis) * neutral);
  std::mt19937_64 noise(o.seed);
  const ReconfigureResult r = reconfigure_run(unit, opt, &noise);
  std::ostringstream csv;
  csv << "step,angle_deg,wheel_1,wheel_2,wheel_3\n" << std::setprecision(10);
  for (const auto& s : r.trajectory) {
    csv << s.step << ',' << s.angle / kDegree << ',' << s.wheel_speeds[0] << ',' << s.wheel_speeds[1] << ','
        << s.wheel_speeds[2] << '\n';
  }
  csv << r.steps << ',' << r.final_angle / kDegree << ",0,0,0\n";
  Sink(o.out).stream() << csv.str();
  emit_snapshot("reconfig", argv, o,
                {{"gain", opt.gain}, {"dt", opt.dt}, {"threshold_deg", opt.threshold / kDegree},
                 {"start_deg", start / kDegree}, {"converged", r.converged}, {"steps", r.steps}},
                started);
  if (!r.converged) {
    std::cerr << "reconfig: not converged after " << r.steps << " steps\n";
    return kExitFailure;
  }
  return kExitOk;
}

int cmd_serve(const Options& o, const std::vector<std::string>& argv) {
  const std::string started = utc_now();
  const Json doc = scenario_document(o, "pv-rings");
  const Scenario resolved = load_scenario(doc);  // validation errors exit 2 before binding
  ServiceOptions opt;
  const auto colon = o.bind.rfind(':');
  if (colon == std::string::npos) throw UsageError("--bind expects host:port");
  opt.address = o.bind.substr(0, colon);
  try {
    opt.port = static_cast<unsigned short>(std::stoi(o.bind.substr(colon + 1)));
  } catch (const std::exception&) {
    throw UsageError("--bind expects host:port");
  }
  opt.static_dir = o.static_dir;
  std::ofstream log;
  if (!o.out.empty()) {
    log.open(o.out, std::ios::binary);
    if (!log) throw std::runtime_error("cannot write '" + o.out + "'");
  }
  std::ofstream commands;
  if (!o.commands.empty()) {
    commands.open(o.commands, std::ios::binary);
    if (!commands) throw std::runtime_error("cannot write '" + o.commands + "'");
  }
  TeleopService service(doc, o.seed, opt, log.is_open() ? &log : nullptr,
                        commands.is_open() ? &commands : nullptr);
  service.start();
  std::cerr << "serving " << resolved.name << " on " << opt.address << ':' << service.port()
            << " (ws: /ws, health: /health)\n";

  boost::asio::io_context signals_ioc;
  boost::asio::signal_set signals(signals_ioc, SIGINT, SIGTERM);
  signals.async_wait([&](const boost::system::error_code&, int) { service.request_stop(); });
  std::thread signal_thread([&] { signals_ioc.run(); });
  service.wait();
  service.stop();
  signals_ioc.stop();
  signal_thread.join();
  log.flush();
  commands.flush();
  emit_snapshot("serve", argv, o, scenario_to_json(resolved), started);
  std::cerr << "stopped\n";
  return kExitOk;
}

int cmd_replay(const Options& o, const std::vector<std::string>& argv) {
  const std::string started = utc_now();
  if (o.config.empty()) throw UsageError("replay needs --config <command log>");
  std::ifstream in(o.config);
  if (!in) throw std::runtime_error("cannot open '" + o.config + "'");
  Sink sink(o.out);
  replay_command_log(in, sink.stream());
  emit_snapshot("replay", argv, o, {{"command_log", o.config}}, started);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Magnetic ball-chain catheter: equilibrium solver, studies, magnet sizing and teleoperation"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--out", o.out, "Output file (default: stdout)");
    sub->add_option("--seed", o.seed, "Seed for every stochastic choice (default 0)");
  };
  auto add_scenario = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Scenario JSON file");
    sub->add_option("--scenario", o.scenario, "Scenario file or bundled name (pv-rings, bench-sweep, uniform-alignment)");
  };
  auto add_sleeve = [&](CLI::App* sub) {
    sub->add_option("--sleeve", o.sleeve, "Override the elastic sleeve")->check(CLI::IsMember({"on", "off"}));
  };

  auto* solve = app.add_subcommand("solve", "Solve one equilibrium and write the shape as JSON");
  add_scenario(solve);
  add_common(solve);
  add_sleeve(solve);
  solve->add_option("--angle", o.angle, "Field angle at the entry from the entry tangent (deg)");
  solve->add_option("--balls", o.balls, "Number of exposed balls")->expected(1);
  solve->add_option("--field-mt", o.field_mt, "Use a uniform field of this magnitude (mT)");

  auto* sweep = app.add_subcommand("sweep", "Workspace sweep: tip traces as CSV, area summary as JSON");
  add_scenario(sweep);
  add_common(sweep);
  add_sleeve(sweep);
  sweep->add_option("--balls", o.balls, "Chain lengths to sweep (default 4 9 16)");
  sweep->add_option("--step", o.step, "Field angle increment over [0, 180] deg (default 5)");

  auto* align = app.add_subcommand("align", "Tip alignment study, lengths 1..N at 9 field angles, as CSV");
  add_scenario(align);
  add_common(align);
  add_sleeve(align);
  align->add_option("--balls", o.balls, "Longest chain (default 16)")->expected(1);
  align->add_option("--field-mt", o.field_mt, "Uniform field magnitude (mT, default 23)");

  auto* design = app.add_subcommand("design", "Size the full-scale actuation magnet");
  design->add_option("--config", o.config, "Sizing problem JSON (defaults: bench values)");
  add_common(design);

  auto* reconfig = app.add_subcommand("reconfig", "Simulate the axis reconfiguration loop, log as CSV");
  add_scenario(reconfig);
  add_common(reconfig);
  reconfig->add_option("--angle", o.angle, "Initial misalignment (deg, default 90)");

  auto* serve = app.add_subcommand("serve", "Run the teleoperation service until SIGINT");
  add_scenario(serve);
  add_common(serve);
  serve->add_option("--bind", o.bind, "host:port (default 127.0.0.1:8080; port 0 picks one)");
  serve->add_option("--static", o.static_dir, "Directory served as the UI bundle");
  serve->add_option("--commands", o.commands, "Command log to write (input to replay)");

  auto* replay = app.add_subcommand("replay", "Re-run a recorded command log and write the session log");
  replay->add_option("--config", o.config, "Command log (JSON lines)");
  add_common(replay);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*solve) return cmd_solve(o, args);
    if (*sweep) return cmd_sweep(o, args);
    if (*align) return cmd_align(o, args);
    if (*design) return cmd_design(o, args);
    if (*reconfig) return cmd_reconfig(o, args);
    if (*serve) return cmd_serve(o, args);
    if (*replay) return cmd_replay(o, args);
  } catch (const ValidationError& e) {
    std::cerr << e.what() << '\n';
    return kExitUsage;
  } catch (const UsageError& e) {
    std::cerr << "usage: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}
