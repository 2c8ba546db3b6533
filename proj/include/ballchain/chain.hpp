#ifndef BALLCHAIN_CHAIN_HPP
#define BALLCHAIN_CHAIN_HPP

#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "ballchain/magnetics.hpp"

namespace ballchain {

/// Default sintered NdFeB density (kg/m^3).
inline constexpr double kNdFeBDensity = 7500.0;
/// Largest bend angle admitted inside the sleeve energy; anything beyond is a kink.
inline constexpr double kBendAngleCap = std::numbers::pi - 1.0e-3;

struct BallSpec {
  double diameter = 3.175e-3;          // m
  double moment_magnitude = 0.0;       // A m^2
  double mass = 0.0;                   // kg

  /// Magnetized sphere of the given diameter, remanence and density.
  static BallSpec sphere(double diameter, double remanence = kRemanenceN52,
                         double density = kNdFeBDensity) {
    const double volume = sphere_volume(diameter);
    return {diameter, moment_from_remanence(remanence, volume), density * volume};
  }
};

/// Second moment of area of a tube cross-section.
inline double tube_second_moment(double outer_diameter, double inner_diameter) {
  const double od2 = outer_diameter * outer_diameter;
  const double id2 = inner_diameter * inner_diameter;
  return std::numbers::pi * (od2 * od2 - id2 * id2) / 64.0;
}

struct SleeveSpec {
  bool enabled = false;
  double elastic_modulus = 340.0e3;                    // Pa
  double second_moment = tube_second_moment(3.5e-3, 3.0e-3);  // m^4
  /// Optional per-interior-ball modulus override (piecewise constant E_i).
  std::vector<double> segment_modulus;

  /// E_i I_i for interior ball `i` (0-based ball index).
  double bending_stiffness(std::size_t i) const {
    if (i < segment_modulus.size()) return segment_modulus[i] * second_moment;
    return elastic_modulus * second_moment;
  }
};

struct ChainConfig {
  int n = 1;
  BallSpec ball = BallSpec::sphere(3.175e-3);
  SleeveSpec sleeve;
  Vec3 base_position = Vec3::Zero();
  Vec3 base_tangent = Vec3::UnitX();
  /// Enters the potential as sum(mass * gravity . p).
  Vec3 gravity = Vec3::Zero();

  void validate() const {
    if (n < 1) throw std::invalid_argument("chain: n must be >= 1");
    if (!(ball.diameter > 0.0)) throw std::invalid_argument("chain: ball diameter must be positive");
    if (ball.moment_magnitude < 0.0 || ball.mass < 0.0) {
      throw std::invalid_argument("chain: ball moment and mass must be non-negative");
    }
    if (std::abs(base_tangent.norm() - 1.0) > 1e-9) {
      throw std::invalid_argument("chain: base_tangent must be a unit vector");
    }
    if (sleeve.elastic_modulus < 0.0 || sleeve.second_moment < 0.0) {
      throw std::invalid_argument("chain: sleeve modulus and second moment must be non-negative");
    }
  }
};

struct ChainShape {
  std::vector<Vec3> positions;    // ball centers, world frame
  std::vector<Vec3> dipole_dirs;  // unit vectors

  int size() const { return static_cast<int>(positions.size()); }
  const Vec3& tip() const { return positions.back(); }

  /// Straight chain along the base tangent with every dipole along it.
  static ChainShape straight(const ChainConfig& config) {
    ChainShape s;
    for (int i = 0; i < config.n; ++i) {
      s.positions.push_back(config.base_position + i * config.ball.diameter * config.base_tangent);
      s.dipole_dirs.push_back(config.base_tangent);
    }
    return s;
  }
};

/// External field acting on the chain: either uniform or a superposition of point dipoles.
struct EnvField {
  enum class Mode { kUniform, kDipoleSources };

  Mode mode = Mode::kUniform;
  Vec3 uniform_B = Vec3::Zero();
  std::vector<Dipole> sources;

  static EnvField uniform(const Vec3& b) { return {Mode::kUniform, b, {}}; }
  static EnvField dipoles(std::vector<Dipole> sources) {
    return {Mode::kDipoleSources, Vec3::Zero(), std::move(sources)};
  }

  Vec3 field_at(const Vec3& p) const {
    return mode == Mode::kUniform ? uniform_B : superpose_field(sources, p);
  }
  Mat3 jacobian_at(const Vec3& p) const {
    return mode == Mode::kUniform ? Mat3::Zero() : superpose_field_jacobian(sources, p);
  }
  bool is_zero() const {
    return mode == Mode::kUniform ? uniform_B.isZero(0.0) : sources.empty();
  }
};

/// Bend at an interior ball: angle between consecutive links and sleeve radius of curvature.
struct Bend {
  double theta = 0.0;
  double radius = std::numeric_limits<double>::infinity();
  bool kink = false;
};

/// One entry per interior ball (indices 1..n-2). Empty for n < 3.
inline std::vector<Bend> bend_angles(const ChainShape& shape, double diameter) {
  std::vector<Bend> bends;
  const int n = shape.size();
  for (int i = 1; i + 1 < n; ++i) {
    const Vec3 out = shape.positions[i + 1] - shape.positions[i];
    const Vec3 in = shape.positions[i] - shape.positions[i - 1];
    if (out.squaredNorm() == 0.0 || in.squaredNorm() == 0.0) {
      throw DomainError("bend_angles: degenerate link");
    }
    Bend b;
    b.theta = std::atan2(out.cross(in).norm(), out.dot(in));
    b.kink = b.theta >= kBendAngleCap;
    if (b.kink) {
      b.radius = 0.0;
    } else if (b.theta > 0.0) {
      b.radius = 0.5 * diameter / std::tan(0.5 * b.theta);
    }
    bends.push_back(b);
  }
  return bends;
}

namespace detail {

/// theta tan(theta/2), the normalized sleeve energy of one bend (capped at the kink).
inline double bend_energy_factor(double theta) {
  theta = std::min(theta, kBendAngleCap);
  return theta * std::tan(0.5 * theta);
}

/// d/dtheta [theta tan(theta/2)] / sin(theta), finite at theta = 0.
inline double bend_gradient_factor(double theta) {
  const double c = std::cos(0.5 * theta);
  const double ratio = theta < 1e-4 ? 1.0 + theta * theta / 6.0 : theta / std::sin(theta);
  return (1.0 + ratio) / (2.0 * c * c);
}

}  // namespace detail

inline double energy_ballball(const ChainShape& shape, const BallSpec& ball) {
  double u = 0.0;
  const int n = shape.size();
  for (int i = 0; i < n; ++i) {
    const Vec3 mi = ball.moment_magnitude * shape.dipole_dirs[i];
    for (int j = i + 1; j < n; ++j) {
      const Vec3 mj = ball.moment_magnitude * shape.dipole_dirs[j];
      u -= mj.dot(dipole_field(shape.positions[j] - shape.positions[i], mi));
    }
  }
  return u;
}

inline double energy_external(const ChainShape& shape, const BallSpec& ball, const EnvField& env) {
  double u = 0.0;
  for (int i = 0; i < shape.size(); ++i) {
    u -= ball.moment_magnitude * shape.dipole_dirs[i].dot(env.field_at(shape.positions[i]));
  }
  return u;
}

/// Sleeve bending energy (1/d) sum E_i I_i theta_i tan(theta_i / 2); zero if disabled.
inline double energy_sleeve(const ChainShape& shape, const SleeveSpec& sleeve, double diameter) {
  if (!sleeve.enabled) return 0.0;
  const auto bends = bend_angles(shape, diameter);
  double u = 0.0;
  for (std::size_t k = 0; k < bends.size(); ++k) {
    u += sleeve.bending_stiffness(k + 1) * detail::bend_energy_factor(bends[k].theta);
  }
  return u / diameter;
}

inline double energy_gravity(const ChainShape& shape, const BallSpec& ball, const Vec3& gravity) {
  double u = 0.0;
  for (const Vec3& p : shape.positions) u += ball.mass * gravity.dot(p);
  return u;
}

inline double total_energy(const ChainShape& shape, const ChainConfig& config, const EnvField& env) {
  return energy_ballball(shape, config.ball) + energy_external(shape, config.ball, env) +
         energy_sleeve(shape, config.sleeve, config.ball.diameter) +
         energy_gravity(shape, config.ball, config.gravity);
}

inline bool has_kink(const ChainShape& shape, double diameter) {
  for (const Bend& b : bend_angles(shape, diameter)) {
    if (b.kink) return true;
  }
  return false;
}

inline Vec3 tip_tangent(const ChainShape& shape) { return shape.dipole_dirs.back().normalized(); }

inline Vec3 tip_tangent_twoball(const ChainShape& shape) {
  if (shape.size() < 2) throw std::invalid_argument("tip_tangent_twoball: needs at least two balls");
  const int n = shape.size();
  return (shape.positions[n - 1] - shape.positions[n - 2]).normalized();
}

/// Largest link length error and largest non-adjacent overlap, both in meters.
struct ConstraintViolation {
  double link_error = 0.0;
  double overlap = 0.0;
};

inline ConstraintViolation constraint_violation(const ChainShape& shape, double diameter) {
  ConstraintViolation v;
  const int n = shape.size();
  for (int i = 0; i + 1 < n; ++i) {
    v.link_error = std::max(
        v.link_error, std::abs((shape.positions[i + 1] - shape.positions[i]).norm() - diameter));
  }
  for (int i = 0; i < n; ++i) {
    for (int j = i + 2; j < n; ++j) {
      v.overlap = std::max(v.overlap, diameter - (shape.positions[j] - shape.positions[i]).norm());
    }
  }
  return v;
}

}  // namespace ballchain

#endif  // BALLCHAIN_CHAIN_HPP
