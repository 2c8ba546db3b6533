#ifndef BALLCHAIN_ACTUATION_HPP
#define BALLCHAIN_ACTUATION_HPP

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "ballchain/magnetics.hpp"

namespace ballchain {

/// Three omni wheels driving a spherical magnet. Wheel speeds map to the
/// magnet angular velocity through omega_a = eta A omega_w, where the rows
/// of A are the negated wheel axes and eta = magnet radius / wheel radius.
class WheelSet {
 public:
  WheelSet(double wheel_radius, double magnet_radius, const Mat3& axis_matrix)
      : wheel_radius_(wheel_radius), magnet_radius_(magnet_radius), a_(axis_matrix) {
    if (!(wheel_radius > 0.0) || !(magnet_radius > 0.0)) {
      throw std::invalid_argument("wheels: radii must be positive");
    }
    for (int r = 0; r < 3; ++r) {
      if (std::abs(a_.row(r).norm() - 1.0) > 0.02) {
        throw std::invalid_argument("wheels: axis rows must be unit vectors");
      }
    }
    Eigen::FullPivLU<Mat3> lu(a_);
    if (!lu.isInvertible() || std::abs(a_.determinant()) < 1e-6) {
      throw std::invalid_argument("wheels: axis matrix is singular");
    }
    a_inv_ = lu.inverse();
  }

  /// Builds A from the three wheel axis directions.
  static WheelSet from_axes(double wheel_radius, double magnet_radius, const Vec3& a1, const Vec3& a2,
                            const Vec3& a3) {
    Mat3 a;
    a.row(0) = -a1.transpose();
    a.row(1) = -a2.transpose();
    a.row(2) = -a3.transpose();
    return {wheel_radius, magnet_radius, a};
  }

  /// The bench unit: 48 mm wheels, 43.5 mm effective magnet radius.
  static WheelSet reference_design() {
    Mat3 a;
    a << 0.82, 0.0, -0.58,
        -0.41, 0.71, -0.58,
        -0.41, -0.71, -0.58;
    return {48.0e-3, 43.5e-3, a};
  }

  double wheel_radius() const { return wheel_radius_; }
  double magnet_radius() const { return magnet_radius_; }
  double eta() const { return magnet_radius_ / wheel_radius_; }
  const Mat3& matrix() const { return a_; }
  const Mat3& inverse() const { return a_inv_; }

 private:
  double wheel_radius_;
  double magnet_radius_;
  Mat3 a_;
  Mat3 a_inv_;
};

inline Vec3 wheel_to_magnet(const Vec3& wheel_speeds, const WheelSet& wheels) {
  return wheels.eta() * (wheels.matrix() * wheel_speeds);
}

inline Vec3 magnet_to_wheel(const Vec3& magnet_rate, const WheelSet& wheels) {
  return wheels.inverse() * magnet_rate / wheels.eta();
}

/// R <- exp([omega dt]x) R, re-projected onto SO(3).
inline Mat3 integrate_rotation(const Mat3& rotation, const Vec3& omega, double dt) {
  if (dt < 0.0) throw std::invalid_argument("integrate_rotation: dt must be non-negative");
  const Vec3 phi = omega * dt;
  const double angle = phi.norm();
  if (angle == 0.0) return rotation;
  const Eigen::Quaterniond q = Eigen::Quaterniond(Eigen::AngleAxisd(angle, phi / angle)) * Eigen::Quaterniond(rotation);
  return q.normalized().toRotationMatrix();
}

struct ActuationUnit {
  WheelSet wheels = WheelSet::reference_design();
  double magnet_moment = 0.0;        // A m^2
  double bounding_radius = 0.0;      // m, radius of the magnet's bounding sphere
  Vec3 position = Vec3::Zero();      // magnet center, world
  Mat3 rotation = Mat3::Identity();  // magnet body -> world; dipole along body z
  double sensor_distance = 0.0;      // m, sensor sits at -D z below the magnet center
  Vec3 neutral_dipole = Vec3::UnitX();
  Vec3 slip = Vec3::Ones();          // per-wheel multiplicative slip (1 = no slip)
  double sensor_noise = 0.0;         // T, per-axis standard deviation

  Vec3 dipole_direction() const { return rotation.col(2); }
  Dipole dipole() const { return {position, magnet_moment * dipole_direction()}; }

  /// Magnet angular velocity actually produced by commanded wheel speeds.
  Vec3 realized_rate(const Vec3& wheel_speeds) const {
    return wheel_to_magnet(wheel_speeds.cwiseProduct(slip), wheels);
  }
};

/// Sensor reading: the dipole field at offset -D e3 from the magnet center.
template <typename Rng>
Vec3 sensor_reading(const ActuationUnit& unit, Rng* rng) {
  if (!(unit.sensor_distance > unit.bounding_radius)) {
    throw DomainError("sensor_reading: sensor lies inside the magnet's bounding sphere");
  }
  Vec3 b = dipole_field(-unit.sensor_distance * Vec3::UnitZ(), unit.magnet_moment * unit.dipole_direction());
  if (rng && unit.sensor_noise > 0.0) {
    std::normal_distribution<double> noise(0.0, unit.sensor_noise);
    for (int k = 0; k < 3; ++k) b[k] += noise(*rng);
  }
  return b;
}

inline Vec3 sensor_reading(const ActuationUnit& unit) {
  return sensor_reading<std::mt19937_64>(unit, nullptr);
}

/// Dipole direction recovered from a reading taken at -D e3. Inverts
/// B = mu0 |m| / (4 pi D^3) (3 e3 e3^T - I) m^, whose inverse matrix is (3/2) e3 e3^T - I.
inline Vec3 estimate_dipole_direction(const Vec3& reading, double sensor_distance, double moment,
                                      double noise_floor = 1e-12) {
  if (!(reading.norm() > noise_floor)) {
    throw DomainError("estimate_dipole_direction: reading below noise floor");
  }
  const double d3 = sensor_distance * sensor_distance * sensor_distance;
  Mat3 inv = -Mat3::Identity();
  inv(2, 2) += 1.5;
  const Vec3 m = d3 / (kMu0Over4Pi * moment) * (inv * reading);
  return m.normalized();
}

/// Wheel speeds of the alignment law K eta^-1 A^-1 (m_m x m_c).
inline Vec3 reconfigure_step(const Vec3& measured, const Vec3& neutral, double gain, const WheelSet& wheels) {
  if (!(gain > 0.0)) throw std::invalid_argument("reconfigure_step: gain must be positive");
  return gain * magnet_to_wheel(measured.cross(neutral), wheels);
}

struct ReconfigureOptions {
  double gain = 1.0;                     // 1/s
  double dt = 0.1;                       // s
  int max_steps = 300;
  double threshold = 0.5 * std::numbers::pi / 180.0;  // rad
};

struct ReconfigureSample {
  int step = 0;
  double angle = 0.0;  // rad, between estimated and neutral dipole before the step
  Vec3 wheel_speeds = Vec3::Zero();
};

struct ReconfigureResult {
  bool converged = false;
  int steps = 0;
  double final_angle = 0.0;
  std::vector<ReconfigureSample> trajectory;
};

/// Closed-loop alignment of an actuation magnet with its neutral direction,
/// one control period per call. Near the antipodal equilibrium the cross
/// product vanishes; a small fixed perpendicular rate is injected to escape it.
class ReconfigureController {
 public:
  explicit ReconfigureController(ReconfigureOptions options) : opt_(options) {
    if (!(opt_.gain * opt_.dt < 1.0) || !(opt_.dt > 0.0)) {
      throw std::invalid_argument("reconfigure: requires 0 < K dt < 1");
    }
  }

  const ReconfigureOptions& options() const { return opt_; }

  /// Measured misalignment of the unit (rad).
  template <typename Rng>
  double angle(const ActuationUnit& unit, Rng* rng) const {
    const Vec3 m = estimate_dipole_direction(sensor_reading(unit, rng), unit.sensor_distance, unit.magnet_moment);
    return alignment_angle(m, unit.neutral_dipole.normalized());
  }

  /// Runs one sensing + actuation period. Returns the sample, whose angle is
  /// the misalignment measured at the start of the period.
  template <typename Rng>
  ReconfigureSample step(ActuationUnit& unit, Rng* rng, int index) const {
    const Vec3 neutral = unit.neutral_dipole.normalized();
    const Vec3 measured =
        estimate_dipole_direction(sensor_reading(unit, rng), unit.sensor_distance, unit.magnet_moment);
    ReconfigureSample s;
    s.step = index;
    s.angle = alignment_angle(measured, neutral);
    const Vec3 cross = measured.cross(neutral);
    if (cross.norm() < 1e-6 && s.angle > 0.5 * std::numbers::pi) {
      s.wheel_speeds = magnet_to_wheel(0.01 * opt_.gain * perpendicular(neutral), unit.wheels);
    } else {
      s.wheel_speeds = reconfigure_step(measured, neutral, opt_.gain, unit.wheels);
    }
    unit.rotation = integrate_rotation(unit.rotation, unit.realized_rate(s.wheel_speeds), opt_.dt);
    return s;
  }

  static Vec3 perpendicular(const Vec3& u) {
    const Vec3 helper = std::abs(u.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
    return u.cross(helper).normalized();
  }

 private:
  ReconfigureOptions opt_;
};

template <typename Rng>
ReconfigureResult reconfigure_run(ActuationUnit& unit, const ReconfigureOptions& options, Rng* rng) {
  const ReconfigureController controller(options);
  ReconfigureResult result;
  for (int k = 0; k <= options.max_steps; ++k) {
    const double angle = controller.angle(unit, rng);
    result.final_angle = angle;
    result.steps = k;
    if (angle < options.threshold) {
      result.converged = true;
      break;
    }
    if (k == options.max_steps) break;
    result.trajectory.push_back(controller.step(unit, rng, k));
  }
  return result;
}

inline ReconfigureResult reconfigure_run(ActuationUnit& unit, const ReconfigureOptions& options) {
  return reconfigure_run<std::mt19937_64>(unit, options, nullptr);
}

/// Moment of the bench actuation magnet: N52 cylinder, 76.2 mm x 38.1 mm.
inline ActuationUnit reference_unit(double remanence = kRemanenceN52) {
  ActuationUnit unit;
  unit.magnet_moment = moment_from_remanence(remanence, cylinder_volume(76.2e-3, 38.1e-3));
  unit.bounding_radius = 0.5 * std::hypot(76.2e-3, 38.1e-3);
  unit.sensor_distance = 1.2 * unit.bounding_radius;
  return unit;
}

}  // namespace ballchain

#endif  // BALLCHAIN_ACTUATION_HPP
