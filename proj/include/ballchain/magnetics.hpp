#ifndef BALLCHAIN_MAGNETICS_HPP
#define BALLCHAIN_MAGNETICS_HPP

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace ballchain {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Vacuum permeability (T m / A).
inline constexpr double kMu0 = 4.0e-7 * std::numbers::pi;
/// mu0 / 4pi, the prefactor of every dipole expression.
inline constexpr double kMu0Over4Pi = 1.0e-7;
/// One gram-force in newtons.
inline constexpr double kGramForce = 9.80665e-3;
/// Default remanence of N52 NdFeB (T).
inline constexpr double kRemanenceN52 = 1.45;

/// Raised when a field/force kernel is evaluated on or inside its singularity.
class DomainError : public std::domain_error {
 public:
  explicit DomainError(const std::string& what) : std::domain_error(what) {}
};

struct Dipole {
  Vec3 position = Vec3::Zero();  // m
  Vec3 moment = Vec3::Zero();    // A m^2
};

/// Dipole moment of a uniformly magnetized body: Br V / mu0.
inline double moment_from_remanence(double remanence, double volume) {
  return remanence * volume / kMu0;
}

inline double sphere_volume(double diameter) {
  return std::numbers::pi / 6.0 * diameter * diameter * diameter;
}

inline double cylinder_volume(double diameter, double length) {
  return std::numbers::pi * 0.25 * diameter * diameter * length;
}

/// Field (T) at offset r from a point dipole with moment m:
///   B = mu0 |m| / (4 pi |r|^3) (3 r^ r^T - I) m^
inline Vec3 dipole_field(const Vec3& r, const Vec3& m) {
  const double r2 = r.squaredNorm();
  if (!(r2 > 0.0) || !std::isfinite(r2)) {
    throw DomainError("dipole_field: offset must be finite and non-zero");
  }
  const double inv_r = 1.0 / std::sqrt(r2);
  const Vec3 rhat = r * inv_r;
  const double k = kMu0Over4Pi * inv_r * inv_r * inv_r;
  return k * (3.0 * rhat.dot(m) * rhat - m);
}

/// Spatial derivative dB_a/dr_b of dipole_field. Symmetric and traceless.
inline Mat3 dipole_field_jacobian(const Vec3& r, const Vec3& m) {
  const double r2 = r.squaredNorm();
  if (!(r2 > 0.0) || !std::isfinite(r2)) {
    throw DomainError("dipole_field_jacobian: offset must be finite and non-zero");
  }
  const double inv_r = 1.0 / std::sqrt(r2);
  const Vec3 rhat = r * inv_r;
  const double mr = m.dot(rhat);
  const double k = 3.0 * kMu0Over4Pi * inv_r * inv_r * inv_r * inv_r;
  Mat3 jac = m * rhat.transpose() + rhat * m.transpose() + mr * Mat3::Identity() -
             5.0 * mr * rhat * rhat.transpose();
  return k * jac;
}

/// Force (N) on `target` in the field of `source`: grad(m_t . B_s) at the target.
inline Vec3 force_on_dipole(const Dipole& target, const Dipole& source) {
  const Vec3 r = target.position - source.position;
  if (!(r.squaredNorm() > 0.0)) {
    throw DomainError("force_on_dipole: coincident dipole positions");
  }
  return dipole_field_jacobian(r, source.moment) * target.moment;
}

/// m x B.
inline Vec3 torque_on_dipole(const Dipole& target, const Vec3& field) {
  return target.moment.cross(field);
}

inline Vec3 superpose_field(std::span<const Dipole> sources, const Vec3& p) {
  Vec3 field = Vec3::Zero();
  for (const Dipole& s : sources) {
    field += dipole_field(p - s.position, s.moment);
  }
  return field;
}

inline Mat3 superpose_field_jacobian(std::span<const Dipole> sources, const Vec3& p) {
  Mat3 jac = Mat3::Zero();
  for (const Dipole& s : sources) {
    jac += dipole_field_jacobian(p - s.position, s.moment);
  }
  return jac;
}

/// Scalar force scaling law 3 mu0 |m_i| |m_a| / (4 pi d^4) used by the
/// magnet sizing calculation.
inline double force_intensity(double moment_i, double moment_a, double distance) {
  if (!(distance > 0.0)) {
    throw DomainError("force_intensity: distance must be positive");
  }
  const double d2 = distance * distance;
  return 3.0 * kMu0Over4Pi * moment_i * moment_a / (d2 * d2);
}

/// Angle in [0, pi] between two directions; robust near 0 and pi.
inline double alignment_angle(const Vec3& a, const Vec3& b) {
  return std::atan2(a.cross(b).norm(), a.dot(b));
}

}  // namespace ballchain

#endif  // BALLCHAIN_MAGNETICS_HPP
