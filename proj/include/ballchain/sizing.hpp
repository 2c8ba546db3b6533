#ifndef BALLCHAIN_SIZING_HPP
#define BALLCHAIN_SIZING_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>

#include <boost/math/tools/roots.hpp>

#include "ballchain/chain.hpp"
#include "ballchain/magnetics.hpp"

namespace ballchain {

/// Full-scale magnet design problem. A bench measurement (force f_m at
/// distance d_m from a magnet of volume V_m) is scaled to a clinical
/// geometry where the catheter balls shrink by volume factor alpha and the
/// magnet center sits d_c + d_d/2 from the target.
struct SizingProblem {
  double measured_force = 132.6 * kGramForce;                 // N
  double desired_force = 10.0 * kGramForce;                   // N
  double measurement_distance = 0.1651;                       // m
  double patient_half_breadth = 0.5 * 0.5930;                 // m
  double measurement_magnet_volume = cylinder_volume(76.2e-3, 38.1e-3);  // m^3
  double ball_scale = 0.32;
  double magnet_density = kNdFeBDensity;                      // kg/m^3
  double remanence = kRemanenceN52;                           // T

  void validate() const {
    if (!(measured_force > 0.0) || !(desired_force > 0.0) || !(measurement_distance > 0.0) ||
        !(patient_half_breadth > 0.0) || !(measurement_magnet_volume > 0.0) || !(magnet_density > 0.0) ||
        !(remanence > 0.0)) {
      throw std::invalid_argument("sizing: all inputs must be positive");
    }
    if (!(ball_scale > 0.0) || ball_scale > 1.0) {
      throw std::invalid_argument("sizing: ball_scale must lie in (0, 1]");
    }
  }
};

/// Volume ratio between two ball diameters.
inline double ball_scale_factor(double d_new, double d_old) {
  if (!(d_new > 0.0) || !(d_old > 0.0)) throw std::invalid_argument("ball_scale_factor: diameters must be positive");
  const double r = d_new / d_old;
  return r * r * r;
}

inline double magnet_mass(double diameter, double density) {
  if (diameter < 0.0 || density < 0.0) throw std::invalid_argument("magnet_mass: inputs must be non-negative");
  return density * sphere_volume(diameter);
}

/// Force balance in d_d, written with dipole moments so that the remanence
/// appears (and cancels) explicitly:
///   alpha f_m d_m^4 m_d(d_d) - f_d (d_c + d_d/2)^4 m_m
/// Positive once the candidate magnet is strong enough.
inline double sizing_residual(const SizingProblem& p, double d_d) {
  const double m_d = moment_from_remanence(p.remanence, sphere_volume(d_d));
  const double m_m = moment_from_remanence(p.remanence, p.measurement_magnet_volume);
  const double dm2 = p.measurement_distance * p.measurement_distance;
  const double reach = p.patient_half_breadth + 0.5 * d_d;
  const double reach2 = reach * reach;
  return p.ball_scale * p.measured_force * dm2 * dm2 * m_d - p.desired_force * reach2 * reach2 * m_m;
}

/// Magnitude of either term of sizing_residual; the natural scale of the equation.
inline double sizing_scale(const SizingProblem& p, double d_d) {
  const double m_m = moment_from_remanence(p.remanence, p.measurement_magnet_volume);
  const double reach = p.patient_half_breadth + 0.5 * d_d;
  return p.desired_force * reach * reach * reach * reach * m_m;
}

struct SizingSolution {
  bool found = false;
  double diameter = 0.0;     // m
  double residual = 0.0;     // relative to sizing_scale
  int iterations = 0;
  std::string message;
};

inline constexpr double kSizingLower = 1.0e-3;  // m
inline constexpr double kSizingUpper = 1.0;     // m

/// Bracketed root of the force balance, by default on [1 mm, 1 m]. The
/// bracket is in the same length unit as the problem.
inline SizingSolution solve_magnet_diameter(const SizingProblem& p, double lower = kSizingLower,
                                            double upper = kSizingUpper) {
  p.validate();
  SizingSolution s;
  const auto f = [&p](double d) { return sizing_residual(p, d); };
  const double fa = f(lower);
  const double fb = f(upper);
  if (!(fa < 0.0 && fb > 0.0)) {
    s.message = fa >= 0.0 ? "no root: the smallest bracketed magnet already exceeds the desired force"
                          : "no root: even the largest bracketed magnet cannot reach the desired force";
    return s;
  }
  std::uintmax_t iters = 200;
  const auto [lo, hi] = boost::math::tools::toms748_solve(f, lower, upper, fa, fb,
                                                          boost::math::tools::eps_tolerance<double>(48), iters);
  s.found = true;
  s.diameter = 0.5 * (lo + hi);
  s.iterations = static_cast<int>(iters);
  s.residual = std::abs(f(s.diameter)) / sizing_scale(p, s.diameter);
  s.message = "ok";
  return s;
}

enum class MomentAlignment { kAligned, kAntiAligned };

/// Axial attraction (N, negative = repulsion) between two identical
/// spherical magnets of diameter d_d placed coaxially on either side of the
/// patient, center separation 2 (d_c + d_d/2).
inline double inter_magnet_force(double diameter, double half_breadth, double remanence,
                                 MomentAlignment alignment = MomentAlignment::kAligned) {
  const double separation = 2.0 * (half_breadth + 0.5 * diameter);
  if (!(diameter > 0.0) || !(separation > diameter)) {
    throw DomainError("inter_magnet_force: magnets overlap");
  }
  const double m = moment_from_remanence(remanence, sphere_volume(diameter));
  const Dipole a{Vec3::Zero(), m * Vec3::UnitZ()};
  const double sign = alignment == MomentAlignment::kAligned ? 1.0 : -1.0;
  const Dipole b{separation * Vec3::UnitZ(), sign * m * Vec3::UnitZ()};
  // Force on b points back toward a when they attract.
  return -force_on_dipole(b, a).z();
}

struct SizingReport {
  SizingSolution solution;
  double mass = 0.0;                // kg
  double inter_magnet_force = 0.0;  // N, coaxial aligned worst case
};

inline SizingReport design_magnet(const SizingProblem& p) {
  SizingReport r;
  r.solution = solve_magnet_diameter(p);
  if (!r.solution.found) return r;
  r.mass = magnet_mass(r.solution.diameter, p.magnet_density);
  r.inter_magnet_force = inter_magnet_force(r.solution.diameter, p.patient_half_breadth, p.remanence);
  return r;
}

}  // namespace ballchain

#endif  // BALLCHAIN_SIZING_HPP
