#ifndef BALLCHAIN_SESSION_HPP
#define BALLCHAIN_SESSION_HPP

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <boost/geometry.hpp>
#include <boost/geometry/geometries/point_xy.hpp>
#include <boost/geometry/geometries/polygon.hpp>
#include <boost/geometry/multi/geometries/multi_polygon.hpp>

#include "ballchain/actuation.hpp"
#include "ballchain/scenario.hpp"
#include "ballchain/statics.hpp"

namespace ballchain {

enum class Feed { kHold, kInsert, kRetract };

inline const char* feed_name(Feed f) {
  switch (f) {
    case Feed::kInsert: return "insert";
    case Feed::kRetract: return "retract";
    case Feed::kHold: break;
  }
  return "hold";
}

inline Feed parse_feed(const std::string& s) {
  if (s == "insert") return Feed::kInsert;
  if (s == "retract") return Feed::kRetract;
  if (s == "hold") return Feed::kHold;
  throw std::invalid_argument("feed must be insert, retract or hold");
}

struct TeleopCommand {
  std::vector<Vec3> omega;  // rad/s per unit; missing entries are zero
  Feed feed = Feed::kHold;
  bool reconfigure = false;

  bool idle() const {
    return feed == Feed::kHold && !reconfigure &&
           std::all_of(omega.begin(), omega.end(), [](const Vec3& w) { return w.isZero(0.0); });
  }
};

struct SessionState {
  long tick = 0;
  ChainShape shape;
  std::vector<Mat3> rotations;
  int n = 1;
  std::map<std::string, long> touched;  // target id -> tick of first touch
  SolveDiagnostics diagnostics;
  double feed_elapsed = 0.0;  // s the current feed direction has been held
  bool reconfiguring = false;
  int reconfigure_steps = 0;
  double path_length = 0.0;  // m travelled by the tip
};

struct StepReport {
  bool ok = true;
  std::vector<std::string> events;    // "touched:<id>", "reconfigured", ...
  std::vector<std::string> warnings;  // clamps, ignored commands
  std::string error;
};

/// Marks every target whose center lies within its radius of the tip.
/// Touches latch: existing entries are never removed or re-timed.
inline std::vector<std::string> check_targets(const Vec3& tip, const std::vector<Target>& targets,
                                              std::map<std::string, long>& touched, long tick) {
  std::vector<std::string> fresh;
  for (const Target& t : targets) {
    if ((tip - t.position).norm() <= t.radius && touched.emplace(t.id, tick).second) fresh.push_back(t.id);
  }
  return fresh;
}

/// Orthonormal frame whose first column is the tip tangent.
inline Mat3 tip_frame(const Vec3& tangent) {
  const Vec3 x = tangent.normalized();
  const Vec3 helper = std::abs(x.z()) < 0.9 ? Vec3::UnitZ() : Vec3::UnitY();
  const Vec3 y = helper.cross(x).normalized();
  Mat3 f;
  f.col(0) = x;
  f.col(1) = y;
  f.col(2) = x.cross(y);
  return f;
}

/// One teleoperated catheter: single owner, strictly serialized steps.
class Session {
 public:
  Session(Scenario scenario, std::uint64_t seed = 0) : scenario_(std::move(scenario)), rng_(seed) {
    state_.rotations = scenario_.initial_rotations();
    state_.n = scenario_.chain.n;
    SolverConfig solver = scenario_.solver;
    ChainConfig config = scenario_.chain;
    Equilibrium eq = solve_equilibrium(config, scenario_.field(state_.rotations), solver);
    if (!eq.diagnostics.converged) {
      throw std::runtime_error("session: initial equilibrium failed (" + eq.diagnostics.status + ")");
    }
    state_.shape = std::move(eq.shape);
    state_.diagnostics = std::move(eq.diagnostics);
    check_targets(state_.shape.tip(), scenario_.targets, state_.touched, 0);
  }

  const Scenario& scenario() const { return scenario_; }
  const SessionState& state() const { return state_; }

  StepReport step(const TeleopCommand& cmd) {
    StepReport report;
    SessionState next = state_;
    ++next.tick;
    const double dt = scenario_.tick_dt;

    if (next.reconfiguring || cmd.reconfigure) {
      if (!next.reconfiguring) {
        next.reconfiguring = true;
        next.reconfigure_steps = 0;
        report.events.push_back("reconfigure_started");
      } else if (!cmd.idle()) {
        report.warnings.push_back("command ignored during reconfiguration");
      }
      advance_reconfiguration(next, report);
    } else {
      for (std::size_t k = 0; k < scenario_.units.size(); ++k) {
        Vec3 w = k < cmd.omega.size() ? cmd.omega[k] : Vec3::Zero();
        if (!w.allFinite()) {
          report.warnings.push_back("non-finite angular velocity replaced by zero");
          w.setZero();
        }
        if (w.norm() > scenario_.max_angular_velocity) {
          w *= scenario_.max_angular_velocity / w.norm();
          report.warnings.push_back("angular velocity clamped");
        }
        if (scenario_.mapping == InputMapping::kTip) w = tip_frame(tip_tangent(state_.shape)) * w;
        next.rotations[k] = integrate_rotation(next.rotations[k], w, dt);
      }
      apply_feed(next, cmd.feed, report);
    }

    ChainConfig config = scenario_.chain;
    config.n = next.n;
    SolverConfig solver = scenario_.solver;
    solver.warm_start = state_.shape;
    Equilibrium eq = solve_equilibrium(config, scenario_.field(next.rotations), solver);
    if (!eq.diagnostics.converged) {
      // Keep the last good equilibrium; only the clock moves.
      report.ok = false;
      report.error = "solver: " + eq.diagnostics.status;
      report.events.clear();
      state_.tick = next.tick;
      return report;
    }
    next.path_length += (eq.shape.tip() - state_.shape.tip()).norm();
    next.shape = std::move(eq.shape);
    next.diagnostics = std::move(eq.diagnostics);
    for (const auto& id : check_targets(next.shape.tip(), scenario_.targets, next.touched, next.tick)) {
      report.events.push_back("touched:" + id);
    }
    state_ = std::move(next);
    return report;
  }

  /// One JSON-lines record describing the state after a step.
  Json log_record(const StepReport& report) const {
    Json dipoles = Json::array();
    for (const Mat3& r : state_.rotations) dipoles.push_back(to_json(Vec3(r.col(2))));
    Json touched = Json::array();
    for (const auto& [id, tick] : state_.touched) touched.push_back(id);
    const auto& d = state_.diagnostics;
    return {{"tick", state_.tick},
            {"n", state_.n},
            {"tip", to_json(state_.shape.tip())},
            {"unit_dipoles", dipoles},
            {"touched", touched},
            {"reconfiguring", state_.reconfiguring},
            {"solver",
             {{"converged", d.converged},
              {"status", d.status},
              {"iterations", d.iterations},
              {"energy", d.energy},
              {"gradient_norm", d.gradient_norm}}},
            {"ok", report.ok},
            {"error", report.error},
            {"events", report.events},
            {"warnings", report.warnings}};
  }

 private:
  void apply_feed(SessionState& s, Feed feed, StepReport& report) const {
    if (feed == Feed::kHold) {
      s.feed_elapsed = 0.0;
      return;
    }
    s.feed_elapsed += scenario_.tick_dt;
    // Tolerate round-off so that an integer number of ticks per interval feeds on time.
    if (s.feed_elapsed + 1e-9 * scenario_.tick_dt < scenario_.feed_interval) return;
    s.feed_elapsed = std::max(0.0, s.feed_elapsed - scenario_.feed_interval);
    const int target = s.n + (feed == Feed::kInsert ? 1 : -1);
    if (target < 1 || target > scenario_.max_balls) {
      report.warnings.push_back(feed == Feed::kInsert ? "feed clamped at max_balls" : "feed clamped at one ball");
      return;
    }
    s.n = target;
  }

  void advance_reconfiguration(SessionState& s, StepReport& report) {
    bool all_aligned = true;
    for (std::size_t k = 0; k < scenario_.units.size(); ++k) {
      ActuationUnit unit = scenario_.units[k].unit;
      unit.rotation = s.rotations[k];
      const ReconfigureController controller(
          {.gain = scenario_.units[k].gain, .dt = scenario_.tick_dt, .threshold = scenario_.reconfigure_threshold});
      if (controller.angle(unit, &rng_) < scenario_.reconfigure_threshold) continue;
      controller.step(unit, &rng_, s.reconfigure_steps);
      s.rotations[k] = unit.rotation;
      if (controller.angle(unit, &rng_) >= scenario_.reconfigure_threshold) all_aligned = false;
    }
    ++s.reconfigure_steps;
    if (all_aligned) {
      s.reconfiguring = false;
      report.events.push_back("reconfigured");
    } else if (s.reconfigure_steps >= scenario_.reconfigure_max_steps) {
      s.reconfiguring = false;
      report.events.push_back("reconfigure_failed");
    }
  }

  Scenario scenario_;
  SessionState state_;
  std::mt19937_64 rng_;
};

// ---------------------------------------------------------------------------
// Command logs and replay.

inline Json command_to_json(long tick, const TeleopCommand& cmd) {
  Json omega = Json::array();
  for (const Vec3& w : cmd.omega) omega.push_back(to_json(w));
  return {{"tick", tick}, {"omega", omega}, {"feed", feed_name(cmd.feed)}, {"reconfigure", cmd.reconfigure}};
}

inline TeleopCommand command_from_json(const Json& j) {
  TeleopCommand cmd;
  if (j.contains("omega")) {
    for (const Json& w : j.at("omega")) cmd.omega.push_back(vec_from_json(w));
  }
  cmd.feed = parse_feed(j.value("feed", std::string("hold")));
  cmd.reconfigure = j.value("reconfigure", false);
  return cmd;
}

/// Runs a session while writing both the command log (header with the source
/// scenario document and seed, then one command per line) and the session log.
class SessionRecorder {
 public:
  SessionRecorder(const Json& scenario_doc, std::uint64_t seed, std::ostream* command_log, std::ostream* session_log)
      : session_(load_scenario(scenario_doc), seed), commands_(command_log), log_(session_log) {
    if (commands_) {
      *commands_ << Json{{"type", "header"}, {"seed", seed}, {"scenario", scenario_doc}}.dump() << '\n';
    }
  }

  StepReport step(const TeleopCommand& cmd) {
    if (commands_) *commands_ << command_to_json(session_.state().tick + 1, cmd).dump() << '\n';
    StepReport r = session_.step(cmd);
    if (log_) *log_ << session_.log_record(r).dump() << '\n';
    return r;
  }

  Session& session() { return session_; }

 private:
  Session session_;
  std::ostream* commands_;
  std::ostream* log_;
};

/// Re-executes a command log and writes the resulting session log. A
/// {"type":"reset"} line restarts the session from the header scenario.
inline void replay_command_log(std::istream& commands, std::ostream& session_log) {
  std::string line;
  if (!std::getline(commands, line)) throw std::runtime_error("replay: empty command log");
  const Json header = Json::parse(line);
  if (header.value("type", "") != "header") throw std::runtime_error("replay: missing header line");
  const auto seed = header.at("seed").get<std::uint64_t>();
  auto rec = std::make_unique<SessionRecorder>(header.at("scenario"), seed, nullptr, &session_log);
  while (std::getline(commands, line)) {
    if (line.empty()) continue;
    const Json j = Json::parse(line);
    if (j.value("type", "") == "reset") {
      rec = std::make_unique<SessionRecorder>(header.at("scenario"), seed, nullptr, &session_log);
      continue;
    }
    rec->step(command_from_json(j));
  }
}

// ---------------------------------------------------------------------------
// Metrics.

struct TargetTiming {
  std::string id;
  bool touched = false;
  long tick = 0;
  double time = 0.0;   // s since session start
  double delta = 0.0;  // s since the previous touch (or start)
};

struct Metrics {
  std::vector<TargetTiming> targets;  // scenario order
  bool complete = false;
  double total_time = 0.0;  // s, session start to last touch
  double path_length = 0.0;
};

inline Metrics compute_metrics(const Scenario& scenario, const SessionState& state) {
  Metrics m;
  m.path_length = state.path_length;
  std::vector<std::pair<long, std::size_t>> order;
  for (const Target& t : scenario.targets) {
    TargetTiming timing;
    timing.id = t.id;
    if (auto it = state.touched.find(t.id); it != state.touched.end()) {
      timing.touched = true;
      timing.tick = it->second;
      timing.time = it->second * scenario.tick_dt;
      order.emplace_back(it->second, m.targets.size());
    }
    m.targets.push_back(timing);
  }
  std::stable_sort(order.begin(), order.end());
  long previous = 0;
  for (const auto& [tick, idx] : order) {
    m.targets[idx].delta = (tick - previous) * scenario.tick_dt;
    previous = tick;
  }
  m.total_time = previous * scenario.tick_dt;
  m.complete = !scenario.targets.empty() && order.size() == scenario.targets.size();
  return m;
}

inline Json to_json(const Metrics& m) {
  Json targets = Json::array();
  for (const auto& t : m.targets) {
    targets.push_back({{"id", t.id}, {"touched", t.touched}, {"tick", t.tick}, {"time", t.time}, {"delta", t.delta}});
  }
  return {{"targets", targets}, {"complete", m.complete}, {"total_time", m.total_time},
          {"path_length", m.path_length}};
}

// ---------------------------------------------------------------------------
// Batch studies.

/// Unit vector in the plane through `tangent` with normal `normal`, at
/// `angle` from the tangent (positive about the normal).
inline Vec3 in_plane_direction(const Vec3& tangent, const Vec3& normal, double angle) {
  const Vec3 t = tangent.normalized();
  const Vec3 side = normal.cross(t).normalized();
  return std::cos(angle) * t + std::sin(angle) * side;
}

/// Orientation of a point dipole at `magnet` that produces a field along
/// `field_dir` at `point`: inverts B ~ (3 r r^T - I) m.
inline Vec3 dipole_for_field(const Vec3& magnet, const Vec3& point, const Vec3& field_dir) {
  const Vec3 r = (point - magnet).normalized();
  return (1.5 * r * r.dot(field_dir) - field_dir).normalized();
}

struct AlignmentRow {
  int n = 0;
  double angle = 0.0;      // rad, field angle from the entry tangent
  double alignment = 0.0;  // rad, between field and tip dipole
  bool converged = false;
};

/// Tip alignment in a uniform field rotating in the plane normal to
/// `plane_normal`, warm-started from one angle to the next for each length.
inline std::vector<AlignmentRow> run_alignment_study(const ChainConfig& base, const std::vector<int>& lengths,
                                                     double field_magnitude, const std::vector<double>& angles,
                                                     const SolverConfig& solver = {},
                                                     const Vec3& plane_normal = Vec3::UnitZ()) {
  if (!(field_magnitude > 0.0)) throw std::invalid_argument("alignment study: field magnitude must be positive");
  std::vector<AlignmentRow> rows;
  for (int n : lengths) {
    ChainConfig config = base;
    config.n = n;
    SolverConfig s = solver;
    s.warm_start.reset();
    for (double a : angles) {
      const Vec3 dir = in_plane_direction(base.base_tangent, plane_normal, a);
      const Equilibrium eq = solve_equilibrium(config, EnvField::uniform(field_magnitude * dir), s);
      rows.push_back({n, a, alignment_angle(dir, tip_tangent(eq.shape)), eq.diagnostics.converged});
      if (eq.diagnostics.converged) s.warm_start = eq.shape;
    }
  }
  return rows;
}

inline std::string alignment_csv(const std::vector<AlignmentRow>& rows) {
  std::ostringstream out;
  out << "n,field_angle_deg,alignment_deg,converged\n";
  out << std::setprecision(10);
  for (const auto& r : rows) {
    out << r.n << ',' << r.angle * 180.0 / std::numbers::pi << ',' << r.alignment * 180.0 / std::numbers::pi << ','
        << (r.converged ? "true" : "false") << '\n';
  }
  return out.str();
}

struct SweepTrace {
  int n = 0;
  std::vector<double> angles;  // rad, converged angles only
  std::vector<Vec3> tips;
  std::vector<double> excluded;  // rad, angles that failed to converge
  double area = 0.0;             // m^2
};

struct SweepResult {
  std::vector<SweepTrace> traces;
  Vec3 plane_normal = Vec3::UnitZ();
  double area = 0.0;  // m^2, union over lengths
};

namespace detail {

namespace bg = boost::geometry;
using Point2 = bg::model::d2::point_xy<double>;
using Polygon2 = bg::model::polygon<Point2>;
using MultiPolygon2 = bg::model::multi_polygon<Polygon2>;

/// Union of the fan triangles (origin, p_k, p_k+1): the polygon bounded by
/// the origin and the ordered trace, robust to self-intersecting traces.
inline MultiPolygon2 fan_region(const Point2& origin, const std::vector<Point2>& trace) {
  MultiPolygon2 acc;
  for (std::size_t k = 0; k + 1 < trace.size(); ++k) {
    Polygon2 tri;
    bg::append(tri.outer(), origin);
    bg::append(tri.outer(), trace[k]);
    bg::append(tri.outer(), trace[k + 1]);
    bg::append(tri.outer(), origin);
    bg::correct(tri);
    if (!(bg::area(tri) > 0.0)) continue;
    MultiPolygon2 merged;
    bg::union_(acc, tri, merged);
    acc = std::move(merged);
  }
  return acc;
}

}  // namespace detail

/// Normal of the least-squares plane through `points` (fallback if degenerate).
inline Vec3 best_fit_normal(const std::vector<Vec3>& points, const Vec3& fallback) {
  if (points.size() < 3) return fallback;
  Vec3 mean = Vec3::Zero();
  for (const Vec3& p : points) mean += p;
  mean /= static_cast<double>(points.size());
  Mat3 cov = Mat3::Zero();
  for (const Vec3& p : points) cov += (p - mean) * (p - mean).transpose();
  Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
  if (!(eig.eigenvalues()(1) > 1e-12 * eig.eigenvalues()(2))) return fallback;
  Vec3 n = eig.eigenvectors().col(0);
  if (n.dot(fallback) < 0.0) n = -n;
  return n;
}

/// Workspace sweep: for each chain length and field angle, point the magnet
/// so its field at the entry lies at that angle in the sweep plane, solve,
/// and record the tip. The area is that of the region bounded by the entry
/// point and each ordered tip trace, united over lengths, measured in the
/// best-fit plane of the traces (or the given plane).
inline SweepResult sweep_workspace(const ChainConfig& base, const ActuationUnit& unit, const std::vector<double>& angles,
                                   const std::vector<int>& lengths, std::optional<Vec3> plane_normal = std::nullopt,
                                   const SolverConfig& solver = {}) {
  for (double a : angles) {
    if (a < -1e-12 || a > std::numbers::pi + 1e-12) throw std::invalid_argument("sweep: angles must lie in [0, pi]");
  }
  const Vec3 sweep_normal = plane_normal.value_or(Vec3::UnitZ()).normalized();
  SweepResult result;
  std::vector<Vec3> all = {base.base_position};
  for (int n : lengths) {
    ChainConfig config = base;
    config.n = n;
    SolverConfig s = solver;
    s.warm_start.reset();
    SweepTrace trace;
    trace.n = n;
    for (double a : angles) {
      const Vec3 field_dir = in_plane_direction(base.base_tangent, sweep_normal, a);
      Dipole source{unit.position, unit.magnet_moment * dipole_for_field(unit.position, base.base_position, field_dir)};
      const Equilibrium eq = solve_equilibrium(config, EnvField::dipoles({source}), s);
      if (!eq.diagnostics.converged) {
        trace.excluded.push_back(a);
        continue;
      }
      trace.angles.push_back(a);
      trace.tips.push_back(eq.shape.tip());
      all.push_back(eq.shape.tip());
      s.warm_start = eq.shape;
    }
    result.traces.push_back(std::move(trace));
  }

  result.plane_normal = plane_normal ? sweep_normal : best_fit_normal(all, sweep_normal);
  const Mat3 frame = tip_frame(result.plane_normal);  // columns: normal, u, v
  const auto project = [&](const Vec3& p) {
    const Vec3 q = p - base.base_position;
    return detail::Point2(q.dot(frame.col(1)), q.dot(frame.col(2)));
  };
  const detail::Point2 origin = project(base.base_position);
  detail::MultiPolygon2 total;
  for (SweepTrace& t : result.traces) {
    std::vector<detail::Point2> pts;
    for (const Vec3& p : t.tips) pts.push_back(project(p));
    const detail::MultiPolygon2 region = detail::fan_region(origin, pts);
    t.area = boost::geometry::area(region);
    detail::MultiPolygon2 merged;
    boost::geometry::union_(total, region, merged);
    total = std::move(merged);
  }
  result.area = boost::geometry::area(total);
  return result;
}

}  // namespace ballchain

#endif  // BALLCHAIN_SESSION_HPP
