#ifndef BALLCHAIN_SCENARIO_HPP
#define BALLCHAIN_SCENARIO_HPP

// Scenario documents: unit-tagged JSON in, fully resolved SI structs out.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ballchain/actuation.hpp"
#include "ballchain/chain.hpp"
#include "ballchain/statics.hpp"

namespace ballchain {

using Json = nlohmann::json;

enum class Dim {
  kLength,
  kField,
  kForce,
  kPressure,
  kTime,
  kAngle,
  kAngularRate,
  kMoment,
  kDensity,
  kMass,
  kAcceleration,
  kSecondMoment,
  kDimensionless,
};

inline const char* dim_name(Dim d) {
  switch (d) {
    case Dim::kLength: return "length";
    case Dim::kField: return "magnetic field";
    case Dim::kForce: return "force";
    case Dim::kPressure: return "pressure";
    case Dim::kTime: return "time";
    case Dim::kAngle: return "angle";
    case Dim::kAngularRate: return "angular rate";
    case Dim::kMoment: return "dipole moment";
    case Dim::kDensity: return "density";
    case Dim::kMass: return "mass";
    case Dim::kAcceleration: return "acceleration";
    case Dim::kSecondMoment: return "second moment of area";
    case Dim::kDimensionless: return "dimensionless";
  }
  return "?";
}

namespace detail {

struct UnitEntry {
  std::string_view symbol;
  Dim dim;
  double to_si;
};

inline constexpr UnitEntry kUnits[] = {
    {"m", Dim::kLength, 1.0},        {"cm", Dim::kLength, 1e-2},       {"mm", Dim::kLength, 1e-3},
    {"um", Dim::kLength, 1e-6},      {"T", Dim::kField, 1.0},          {"mT", Dim::kField, 1e-3},
    {"uT", Dim::kField, 1e-6},       {"G", Dim::kField, 1e-4},         {"N", Dim::kForce, 1.0},
    {"mN", Dim::kForce, 1e-3},       {"gf", Dim::kForce, kGramForce},  {"kgf", Dim::kForce, 1e3 * kGramForce},
    {"Pa", Dim::kPressure, 1.0},     {"kPa", Dim::kPressure, 1e3},     {"MPa", Dim::kPressure, 1e6},
    {"GPa", Dim::kPressure, 1e9},    {"s", Dim::kTime, 1.0},           {"ms", Dim::kTime, 1e-3},
    {"rad", Dim::kAngle, 1.0},       {"deg", Dim::kAngle, std::numbers::pi / 180.0},
    {"rad/s", Dim::kAngularRate, 1.0},
    {"deg/s", Dim::kAngularRate, std::numbers::pi / 180.0},
    {"A m^2", Dim::kMoment, 1.0},    {"A*m^2", Dim::kMoment, 1.0},     {"kg/m^3", Dim::kDensity, 1.0},
    {"g/cm^3", Dim::kDensity, 1e3},  {"kg", Dim::kMass, 1.0},          {"g", Dim::kMass, 1e-3},
    {"m/s^2", Dim::kAcceleration, 1.0},
    {"m^4", Dim::kSecondMoment, 1.0}, {"mm^4", Dim::kSecondMoment, 1e-12},
};

inline std::string trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return std::string(s);
}

}  // namespace detail

/// Parses "3.175 mm", "23mT", "10 gf" into SI. Throws std::invalid_argument
/// on unknown units or a dimension mismatch.
inline double parse_quantity(std::string_view text, Dim expected) {
  const std::string s = detail::trim(text);
  double value = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || !std::isfinite(value)) {
    throw std::invalid_argument("not a number: '" + s + "'");
  }
  const std::string unit = detail::trim(std::string_view(end, s.data() + s.size() - end));
  if (unit.empty()) {
    if (expected == Dim::kDimensionless) return value;
    throw std::invalid_argument("missing unit for " + std::string(dim_name(expected)) + ": '" + s + "'");
  }
  for (const auto& u : detail::kUnits) {
    if (u.symbol == unit) {
      if (u.dim != expected) {
        throw std::invalid_argument("unit '" + unit + "' is a " + dim_name(u.dim) + ", expected " +
                                    dim_name(expected));
      }
      return value * u.to_si;
    }
  }
  throw std::invalid_argument("unknown unit '" + unit + "'");
}

/// Schema violations, one human-readable line per problem.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(std::vector<std::string> issues)
      : std::runtime_error(join(issues)), issues_(std::move(issues)) {}
  const std::vector<std::string>& issues() const { return issues_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string out = "invalid scenario:";
    for (const auto& s : v) out += "\n  " + s;
    return out;
  }
  std::vector<std::string> issues_;
};

/// Reads fields out of a JSON object, collecting errors instead of throwing
/// so that a single pass reports every problem in the document.
class JsonReader {
 public:
  explicit JsonReader(std::vector<std::string>& issues) : issues_(issues) {}

  void error(const std::string& path, const std::string& what) { issues_.push_back(path + ": " + what); }

  /// Numbers are SI; strings carry a unit.
  double quantity(const Json& v, const std::string& path, Dim dim, double fallback) {
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) {
      try {
        return parse_quantity(v.get<std::string>(), dim);
      } catch (const std::invalid_argument& e) {
        error(path, e.what());
        return fallback;
      }
    }
    error(path, std::string("expected a number or a quantity string (") + dim_name(dim) + ")");
    return fallback;
  }

  double quantity(const Json& obj, const std::string& key, const std::string& path, Dim dim, double fallback) {
    if (!obj.contains(key)) return fallback;
    return quantity(obj.at(key), path + "." + key, dim, fallback);
  }

  /// [x, y, z] of quantities, or {"value": [x, y, z], "unit": "mm"}.
  Vec3 vector(const Json& v, const std::string& path, Dim dim, const Vec3& fallback) {
    const Json* arr = &v;
    double scale = 1.0;
    if (v.is_object()) {
      if (!v.contains("value") || !v.contains("unit") || !v.at("unit").is_string()) {
        error(path, "vector object needs 'value' and 'unit'");
        return fallback;
      }
      try {
        scale = parse_quantity("1 " + v.at("unit").get<std::string>(), dim);
      } catch (const std::invalid_argument& e) {
        error(path, e.what());
        return fallback;
      }
      arr = &v.at("value");
    }
    if (!arr->is_array() || arr->size() != 3) {
      error(path, "expected a 3-vector");
      return fallback;
    }
    Vec3 out;
    for (int k = 0; k < 3; ++k) {
      out[k] = scale * quantity((*arr)[k], path + "[" + std::to_string(k) + "]", dim, fallback[k]);
    }
    return out;
  }

  Vec3 vector(const Json& obj, const std::string& key, const std::string& path, Dim dim, const Vec3& fallback) {
    if (!obj.contains(key)) return fallback;
    return vector(obj.at(key), path + "." + key, dim, fallback);
  }

  Vec3 direction(const Json& obj, const std::string& key, const std::string& path, const Vec3& fallback) {
    const Vec3 v = vector(obj, key, path, Dim::kDimensionless, fallback);
    if (!(v.norm() > 0.0)) {
      error(path + "." + key, "direction must be non-zero");
      return fallback;
    }
    return v.normalized();
  }

  int integer(const Json& obj, const std::string& key, const std::string& path, int fallback) {
    if (!obj.contains(key)) return fallback;
    const Json& v = obj.at(key);
    if (!v.is_number_integer()) {
      error(path + "." + key, "expected an integer");
      return fallback;
    }
    return v.get<int>();
  }

  bool boolean(const Json& obj, const std::string& key, const std::string& path, bool fallback) {
    if (!obj.contains(key)) return fallback;
    const Json& v = obj.at(key);
    if (v.is_boolean()) return v.get<bool>();
    if (v == "on") return true;
    if (v == "off") return false;
    error(path + "." + key, "expected true/false or \"on\"/\"off\"");
    return fallback;
  }

  std::string string(const Json& obj, const std::string& key, const std::string& path, const std::string& fallback) {
    if (!obj.contains(key)) return fallback;
    if (!obj.at(key).is_string()) {
      error(path + "." + key, "expected a string");
      return fallback;
    }
    return obj.at(key).get<std::string>();
  }

  const Json& object(const Json& obj, const std::string& key, const std::string& path) {
    static const Json empty = Json::object();
    if (!obj.contains(key)) return empty;
    if (!obj.at(key).is_object()) {
      error(path + "." + key, "expected an object");
      return empty;
    }
    return obj.at(key);
  }

  void known_keys(const Json& obj, const std::string& path, std::initializer_list<std::string_view> keys) {
    for (const auto& [k, v] : obj.items()) {
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) error(path + "." + k, "unknown key");
    }
  }

 private:
  std::vector<std::string>& issues_;
};

struct Target {
  std::string id;
  Vec3 position = Vec3::Zero();
  double radius = 2.5e-3;  // m
};

/// An actuation unit plus its scenario identity and loop gain.
struct UnitSlot {
  std::string id;
  ActuationUnit unit;
  double gain = 1.0;  // 1/s
};

enum class InputMapping { kWorld, kTip };

struct Scenario {
  std::string name = "unnamed";
  ChainConfig chain;  // chain.n is the initially exposed ball count
  int max_balls = 16;
  std::vector<UnitSlot> units;
  std::vector<Target> targets;
  EnvField::Mode field_mode = EnvField::Mode::kDipoleSources;
  double uniform_magnitude = 0.0;       // T, field per unit in uniform mode
  double tick_dt = 0.05;                // s
  double feed_interval = 0.2;           // s of held insert/retract per ball
  double max_angular_velocity = 1.0;    // rad/s per unit
  InputMapping mapping = InputMapping::kWorld;
  double reconfigure_threshold = 0.5 * std::numbers::pi / 180.0;
  int reconfigure_max_steps = 300;
  SolverConfig solver;

  /// Field from the current unit orientations.
  EnvField field(const std::vector<Mat3>& rotations) const {
    if (field_mode == EnvField::Mode::kUniform) {
      Vec3 b = Vec3::Zero();
      for (std::size_t k = 0; k < units.size(); ++k) b += uniform_magnitude * rotations[k].col(2);
      return EnvField::uniform(b);
    }
    std::vector<Dipole> sources;
    for (std::size_t k = 0; k < units.size(); ++k) {
      ActuationUnit u = units[k].unit;
      u.rotation = rotations[k];
      sources.push_back(u.dipole());
    }
    return EnvField::dipoles(std::move(sources));
  }

  std::vector<Mat3> initial_rotations() const {
    std::vector<Mat3> r;
    for (const auto& u : units) r.push_back(u.unit.rotation);
    return r;
  }
};

/// Rotation taking body z onto `dipole` by the shortest arc.
inline Mat3 rotation_for_dipole(const Vec3& dipole) {
  return Eigen::Quaterniond::FromTwoVectors(Vec3::UnitZ(), dipole.normalized()).toRotationMatrix();
}

namespace detail {

inline BallSpec read_ball(JsonReader& in, const Json& j, const std::string& path) {
  in.known_keys(j, path, {"diameter", "remanence", "density", "moment", "mass"});
  const double d = in.quantity(j, "diameter", path, Dim::kLength, 3.175e-3);
  const double br = in.quantity(j, "remanence", path, Dim::kField, kRemanenceN52);
  const double rho = in.quantity(j, "density", path, Dim::kDensity, kNdFeBDensity);
  if (!(d > 0.0)) in.error(path + ".diameter", "must be positive");
  BallSpec b = BallSpec::sphere(d > 0.0 ? d : 3.175e-3, br, rho);
  b.moment_magnitude = in.quantity(j, "moment", path, Dim::kMoment, b.moment_magnitude);
  b.mass = in.quantity(j, "mass", path, Dim::kMass, b.mass);
  if (b.moment_magnitude < 0.0 || b.mass < 0.0) in.error(path, "moment and mass must be non-negative");
  return b;
}

inline SleeveSpec read_sleeve(JsonReader& in, const Json& j, const std::string& path) {
  in.known_keys(j, path, {"enabled", "modulus", "outer_diameter", "inner_diameter", "second_moment",
                          "segment_modulus"});
  SleeveSpec s;
  s.enabled = in.boolean(j, "enabled", path, false);
  s.elastic_modulus = in.quantity(j, "modulus", path, Dim::kPressure, s.elastic_modulus);
  const double od = in.quantity(j, "outer_diameter", path, Dim::kLength, 3.5e-3);
  const double id = in.quantity(j, "inner_diameter", path, Dim::kLength, 3.0e-3);
  if (!(od > id) || id < 0.0) in.error(path, "outer_diameter must exceed inner_diameter >= 0");
  s.second_moment = tube_second_moment(od, id);
  s.second_moment = in.quantity(j, "second_moment", path, Dim::kSecondMoment, s.second_moment);
  if (j.contains("segment_modulus")) {
    const Json& seg = j.at("segment_modulus");
    if (!seg.is_array()) {
      in.error(path + ".segment_modulus", "expected an array");
    } else {
      for (std::size_t k = 0; k < seg.size(); ++k) {
        s.segment_modulus.push_back(in.quantity(seg[k], path + ".segment_modulus[" + std::to_string(k) + "]",
                                                Dim::kPressure, s.elastic_modulus));
      }
    }
  }
  if (s.elastic_modulus < 0.0) in.error(path + ".modulus", "must be non-negative");
  return s;
}

inline UnitSlot read_unit(JsonReader& in, const Json& j, const std::string& path) {
  in.known_keys(j, path, {"id", "position", "magnet", "moment", "bounding_radius", "dipole", "neutral_dipole",
                          "sensor_distance", "sensor_noise", "gain", "wheels"});
  UnitSlot slot;
  slot.id = in.string(j, "id", path, "");
  if (slot.id.empty()) in.error(path + ".id", "required");
  ActuationUnit& u = slot.unit;
  u = reference_unit();
  u.position = in.vector(j, "position", path, Dim::kLength, Vec3::Zero());
  if (!j.contains("position")) in.error(path + ".position", "required");

  const Json& magnet = in.object(j, "magnet", path);
  if (!magnet.empty()) {
    in.known_keys(magnet, path + ".magnet", {"shape", "diameter", "length", "remanence"});
    const std::string mp = path + ".magnet";
    const std::string shape = in.string(magnet, "shape", mp, "cylinder");
    const double br = in.quantity(magnet, "remanence", mp, Dim::kField, kRemanenceN52);
    const double dia = in.quantity(magnet, "diameter", mp, Dim::kLength, 76.2e-3);
    if (!(dia > 0.0)) in.error(mp + ".diameter", "must be positive");
    if (shape == "cylinder") {
      const double len = in.quantity(magnet, "length", mp, Dim::kLength, 38.1e-3);
      if (!(len > 0.0)) in.error(mp + ".length", "must be positive");
      u.magnet_moment = moment_from_remanence(br, cylinder_volume(dia, len));
      u.bounding_radius = 0.5 * std::hypot(dia, len);
    } else if (shape == "sphere") {
      u.magnet_moment = moment_from_remanence(br, sphere_volume(dia));
      u.bounding_radius = 0.5 * dia;
    } else {
      in.error(mp + ".shape", "expected \"cylinder\" or \"sphere\"");
    }
  }
  u.magnet_moment = in.quantity(j, "moment", path, Dim::kMoment, u.magnet_moment);
  u.bounding_radius = in.quantity(j, "bounding_radius", path, Dim::kLength, u.bounding_radius);
  u.sensor_distance = in.quantity(j, "sensor_distance", path, Dim::kLength, 1.2 * u.bounding_radius);
  u.sensor_noise = in.quantity(j, "sensor_noise", path, Dim::kField, 0.0);
  u.neutral_dipole = in.direction(j, "neutral_dipole", path, Vec3::UnitX());
  u.rotation = rotation_for_dipole(in.direction(j, "dipole", path, u.neutral_dipole));
  slot.gain = in.quantity(j, "gain", path, Dim::kDimensionless, 1.0);
  if (!(u.magnet_moment > 0.0)) in.error(path + ".moment", "must be positive");
  if (!(u.sensor_distance > u.bounding_radius)) {
    in.error(path + ".sensor_distance", "must lie outside the magnet's bounding sphere");
  }
  if (!(slot.gain > 0.0)) in.error(path + ".gain", "must be positive");

  const Json& w = in.object(j, "wheels", path);
  if (!w.empty()) {
    const std::string wp = path + ".wheels";
    in.known_keys(w, wp, {"wheel_radius", "magnet_radius", "matrix"});
    const WheelSet ref = WheelSet::reference_design();
    const double rw = in.quantity(w, "wheel_radius", wp, Dim::kLength, ref.wheel_radius());
    const double rm = in.quantity(w, "magnet_radius", wp, Dim::kLength, ref.magnet_radius());
    Mat3 a = ref.matrix();
    if (w.contains("matrix")) {
      const Json& rows = w.at("matrix");
      if (!rows.is_array() || rows.size() != 3) {
        in.error(wp + ".matrix", "expected 3 rows");
      } else {
        for (int r = 0; r < 3; ++r) {
          a.row(r) = in.vector(rows[r], wp + ".matrix[" + std::to_string(r) + "]", Dim::kDimensionless,
                               ref.matrix().row(r).transpose())
                         .transpose();
        }
      }
    }
    try {
      u.wheels = WheelSet(rw, rm, a);
    } catch (const std::invalid_argument& e) {
      in.error(wp, e.what());
    }
  }
  return slot;
}

}  // namespace detail

/// Builds a Scenario from a document, applying defaults. Throws
/// ValidationError listing every problem found.
inline Scenario load_scenario(const Json& doc) {
  std::vector<std::string> issues;
  JsonReader in(issues);
  Scenario s;
  if (!doc.is_object()) throw ValidationError({"$: scenario must be a JSON object"});
  in.known_keys(doc, "$", {"name", "chain", "entry", "units", "targets", "field_mode", "uniform_field",
                           "tick_dt", "feed_interval", "max_angular_velocity", "mapping", "reconfigure",
                           "solver", "description"});
  s.name = in.string(doc, "name", "$", "unnamed");

  const Json& chain = in.object(doc, "chain", "$");
  in.known_keys(chain, "$.chain", {"n", "max_balls", "ball", "sleeve", "gravity"});
  s.chain.n = in.integer(chain, "n", "$.chain", 1);
  s.max_balls = in.integer(chain, "max_balls", "$.chain", 16);
  s.chain.ball = detail::read_ball(in, in.object(chain, "ball", "$.chain"), "$.chain.ball");
  s.chain.sleeve = detail::read_sleeve(in, in.object(chain, "sleeve", "$.chain"), "$.chain.sleeve");
  s.chain.gravity = in.vector(chain, "gravity", "$.chain", Dim::kAcceleration, Vec3::Zero());
  if (s.max_balls < 1) in.error("$.chain.max_balls", "must be >= 1");
  if (s.chain.n < 1 || s.chain.n > s.max_balls) in.error("$.chain.n", "must lie in [1, max_balls]");

  const Json& entry = in.object(doc, "entry", "$");
  in.known_keys(entry, "$.entry", {"position", "tangent"});
  s.chain.base_position = in.vector(entry, "position", "$.entry", Dim::kLength, Vec3::Zero());
  s.chain.base_tangent = in.direction(entry, "tangent", "$.entry", Vec3::UnitX());

  if (!doc.contains("units") || !doc.at("units").is_array() || doc.at("units").empty()) {
    in.error("$.units", "at least one actuation unit is required");
  } else {
    std::set<std::string> ids;
    for (std::size_t k = 0; k < doc.at("units").size(); ++k) {
      const std::string path = "$.units[" + std::to_string(k) + "]";
      const Json& u = doc.at("units")[k];
      if (!u.is_object()) {
        in.error(path, "expected an object");
        continue;
      }
      s.units.push_back(detail::read_unit(in, u, path));
      if (!s.units.back().id.empty() && !ids.insert(s.units.back().id).second) {
        in.error(path + ".id", "duplicate unit id '" + s.units.back().id + "'");
      }
    }
  }

  if (doc.contains("targets")) {
    const Json& targets = doc.at("targets");
    if (!targets.is_array()) {
      in.error("$.targets", "expected an array");
    } else {
      std::set<std::string> ids;
      for (std::size_t k = 0; k < targets.size(); ++k) {
        const std::string path = "$.targets[" + std::to_string(k) + "]";
        const Json& t = targets[k];
        if (!t.is_object()) {
          in.error(path, "expected an object");
          continue;
        }
        in.known_keys(t, path, {"id", "position", "radius"});
        Target target;
        target.id = in.string(t, "id", path, "");
        if (target.id.empty()) in.error(path + ".id", "required");
        if (!t.contains("position")) in.error(path + ".position", "required");
        target.position = in.vector(t, "position", path, Dim::kLength, Vec3::Zero());
        target.radius = in.quantity(t, "radius", path, Dim::kLength, 2.5e-3);
        if (!(target.radius > 0.0)) in.error(path + ".radius", "must be positive");
        if (!target.id.empty() && !ids.insert(target.id).second) {
          in.error(path + ".id", "duplicate target id '" + target.id + "'");
        }
        s.targets.push_back(target);
      }
    }
  }

  const std::string mode = in.string(doc, "field_mode", "$", "dipoles");
  if (mode == "dipoles") {
    s.field_mode = EnvField::Mode::kDipoleSources;
  } else if (mode == "uniform") {
    s.field_mode = EnvField::Mode::kUniform;
    if (!doc.contains("uniform_field")) in.error("$.uniform_field", "required when field_mode is \"uniform\"");
  } else {
    in.error("$.field_mode", "expected \"dipoles\" or \"uniform\"");
  }
  s.uniform_magnitude = in.quantity(doc, "uniform_field", "$", Dim::kField, 0.0);

  s.tick_dt = in.quantity(doc, "tick_dt", "$", Dim::kTime, 0.05);
  s.feed_interval = in.quantity(doc, "feed_interval", "$", Dim::kTime, 0.2);
  s.max_angular_velocity = in.quantity(doc, "max_angular_velocity", "$", Dim::kAngularRate, 1.0);
  if (!(s.tick_dt > 0.0)) in.error("$.tick_dt", "must be positive");
  if (!(s.feed_interval > 0.0)) in.error("$.feed_interval", "must be positive");
  if (!(s.max_angular_velocity > 0.0)) in.error("$.max_angular_velocity", "must be positive");

  const std::string mapping = in.string(doc, "mapping", "$", "world");
  if (mapping == "world") {
    s.mapping = InputMapping::kWorld;
  } else if (mapping == "tip") {
    s.mapping = InputMapping::kTip;
  } else {
    in.error("$.mapping", "expected \"world\" or \"tip\"");
  }

  const Json& rc = in.object(doc, "reconfigure", "$");
  in.known_keys(rc, "$.reconfigure", {"threshold", "max_steps"});
  s.reconfigure_threshold = in.quantity(rc, "threshold", "$.reconfigure", Dim::kAngle, s.reconfigure_threshold);
  s.reconfigure_max_steps = in.integer(rc, "max_steps", "$.reconfigure", s.reconfigure_max_steps);
  for (std::size_t k = 0; k < s.units.size(); ++k) {
    if (!(s.units[k].gain * s.tick_dt < 1.0)) {
      in.error("$.units[" + std::to_string(k) + "].gain", "gain * tick_dt must be < 1");
    }
  }

  const Json& solver = in.object(doc, "solver", "$");
  in.known_keys(solver, "$.solver", {"gradient_tolerance", "max_iterations", "multistart_count", "seed"});
  s.solver.gradient_tolerance =
      in.quantity(solver, "gradient_tolerance", "$.solver", Dim::kDimensionless, s.solver.gradient_tolerance);
  s.solver.max_iterations = in.integer(solver, "max_iterations", "$.solver", s.solver.max_iterations);
  s.solver.multistart_count = in.integer(solver, "multistart_count", "$.solver", s.solver.multistart_count);
  s.solver.seed = static_cast<std::uint64_t>(in.integer(solver, "seed", "$.solver", 0));

  if (!issues.empty()) throw ValidationError(std::move(issues));
  return s;
}

inline Json load_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  try {
    return Json::parse(f);
  } catch (const Json::parse_error& e) {
    throw ValidationError({path + ": " + e.what()});
  }
}

inline Scenario load_scenario_file(const std::string& path) { return load_scenario(load_json_file(path)); }

/// Bundled scenario by name ("pv-rings", "bench-sweep", "uniform-alignment").
inline std::string bundled_scenario_path(const std::string& name) {
#ifdef BALLCHAIN_SCENARIO_DIR
  return std::string(BALLCHAIN_SCENARIO_DIR) + "/" + name + ".json";
#else
  return "scenarios/" + name + ".json";
#endif
}

inline Json to_json(const Vec3& v) { return Json::array({v.x(), v.y(), v.z()}); }

inline Vec3 vec_from_json(const Json& j) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline Json to_json(const ChainShape& s) {
  Json p = Json::array(), m = Json::array();
  for (const Vec3& v : s.positions) p.push_back(to_json(v));
  for (const Vec3& v : s.dipole_dirs) m.push_back(to_json(v));
  return {{"positions", p}, {"dipole_dirs", m}};
}

inline ChainShape shape_from_json(const Json& j) {
  ChainShape s;
  for (const Json& v : j.at("positions")) s.positions.push_back(vec_from_json(v));
  for (const Json& v : j.at("dipole_dirs")) s.dipole_dirs.push_back(vec_from_json(v));
  if (s.positions.size() != s.dipole_dirs.size()) {
    throw std::invalid_argument("shape: positions and dipole_dirs differ in length");
  }
  return s;
}

inline Json to_json(const SolveDiagnostics& d) {
  return {{"converged", d.converged},
          {"kinked", d.kinked},
          {"status", d.status},
          {"iterations", d.iterations},
          {"evaluations", d.evaluations},
          {"restarts", d.restarts},
          {"energy", d.energy},
          {"gradient_norm", d.gradient_norm},
          {"terms",
           {{"ballball", d.terms.ballball},
            {"external", d.terms.external},
            {"sleeve", d.terms.sleeve},
            {"gravity", d.terms.gravity},
            {"penalty", d.terms.penalty}}},
          {"violation", {{"link_error", d.violation.link_error}, {"overlap", d.violation.overlap}}}};
}

/// Resolved scenario in SI units; load_scenario(scenario_to_json(s)) reproduces s.
inline Json scenario_to_json(const Scenario& s) {
  Json units = Json::array();
  for (const auto& slot : s.units) {
    const ActuationUnit& u = slot.unit;
    Json matrix = Json::array();
    for (int r = 0; r < 3; ++r) matrix.push_back(to_json(u.wheels.matrix().row(r).transpose()));
    units.push_back({{"id", slot.id},
                     {"position", to_json(u.position)},
                     {"moment", u.magnet_moment},
                     {"bounding_radius", u.bounding_radius},
                     {"dipole", to_json(u.dipole_direction())},
                     {"neutral_dipole", to_json(u.neutral_dipole)},
                     {"sensor_distance", u.sensor_distance},
                     {"sensor_noise", u.sensor_noise},
                     {"gain", slot.gain},
                     {"wheels",
                      {{"wheel_radius", u.wheels.wheel_radius()},
                       {"magnet_radius", u.wheels.magnet_radius()},
                       {"matrix", matrix}}}});
  }
  Json targets = Json::array();
  for (const auto& t : s.targets) {
    targets.push_back({{"id", t.id}, {"position", to_json(t.position)}, {"radius", t.radius}});
  }
  Json segment = Json::array();
  for (double e : s.chain.sleeve.segment_modulus) segment.push_back(e);
  Json sleeve = {{"enabled", s.chain.sleeve.enabled},
                 {"modulus", s.chain.sleeve.elastic_modulus},
                 {"second_moment", s.chain.sleeve.second_moment}};
  if (!segment.empty()) sleeve["segment_modulus"] = segment;
  Json doc = {
      {"name", s.name},
      {"chain",
       {{"n", s.chain.n},
        {"max_balls", s.max_balls},
        {"ball",
         {{"diameter", s.chain.ball.diameter}, {"moment", s.chain.ball.moment_magnitude}, {"mass", s.chain.ball.mass}}},
        {"sleeve", sleeve},
        {"gravity", to_json(s.chain.gravity)}}},
      {"entry", {{"position", to_json(s.chain.base_position)}, {"tangent", to_json(s.chain.base_tangent)}}},
      {"units", units},
      {"targets", targets},
      {"field_mode", s.field_mode == EnvField::Mode::kUniform ? "uniform" : "dipoles"},
      {"tick_dt", s.tick_dt},
      {"feed_interval", s.feed_interval},
      {"max_angular_velocity", s.max_angular_velocity},
      {"mapping", s.mapping == InputMapping::kTip ? "tip" : "world"},
      {"reconfigure", {{"threshold", s.reconfigure_threshold}, {"max_steps", s.reconfigure_max_steps}}},
      {"solver",
       {{"gradient_tolerance", s.solver.gradient_tolerance},
        {"max_iterations", s.solver.max_iterations},
        {"multistart_count", s.solver.multistart_count},
        {"seed", s.solver.seed}}}};
  if (s.field_mode == EnvField::Mode::kUniform) doc["uniform_field"] = s.uniform_magnitude;
  return doc;
}

}  // namespace ballchain

#endif  // BALLCHAIN_SCENARIO_HPP
