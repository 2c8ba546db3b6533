#ifndef BALLCHAIN_STATICS_HPP
#define BALLCHAIN_STATICS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ballchain/chain.hpp"

namespace ballchain {

using VecX = Eigen::VectorXd;

struct SolverConfig {
  double gradient_tolerance = 1e-10;  // J/rad, Riemannian gradient norm
  int max_iterations = 20000;
  /// Non-adjacent overlap penalty (J/m^2); 0 selects 1e6 E0/d^2 with E0 the contact pair energy scale.
  double penalty_weight = 0.0;
  int multistart_count = 4;
  double restart_perturbation = 0.2;  // rad
  std::uint64_t seed = 0;
  std::optional<ChainShape> warm_start;
};

/// Inequality keeping the tip ball center on the positive side of a plane,
/// handled by an augmented Lagrangian term.
struct TipPlaneConstraint {
  Vec3 point = Vec3::Zero();
  Vec3 normal = Vec3::UnitY();
  double multiplier = 0.0;  // N
  double stiffness = 0.0;   // N/m
};

struct EnergyTerms {
  double ballball = 0.0;
  double external = 0.0;
  double sleeve = 0.0;
  double gravity = 0.0;
  double penalty = 0.0;
  double constraint = 0.0;
  bool kink = false;

  /// Physical potential, without penalty or constraint terms.
  double physical() const { return ballball + external + sleeve + gravity; }
  double total() const { return physical() + penalty + constraint; }
};

/// Partial derivatives of the energy with respect to ball positions, dipole
/// directions and (directly, through the sleeve) link directions.
struct CartesianGradient {
  std::vector<Vec3> position;
  std::vector<Vec3> dipole;
  std::vector<Vec3> link;

  void reset(int n) {
    position.assign(n, Vec3::Zero());
    dipole.assign(n, Vec3::Zero());
    link.assign(std::max(n - 1, 0), Vec3::Zero());
  }
};

/// Relative activation margin of the non-adjacent contact penalty.
inline constexpr double kContactMargin = 1e-5;

/// Energy scale of two touching balls, mu0 |m|^2 / (4 pi d^3).
inline double contact_energy_scale(const BallSpec& ball) {
  const double d = ball.diameter;
  const double e0 = kMu0Over4Pi * ball.moment_magnitude * ball.moment_magnitude / (d * d * d);
  return e0 > 0.0 ? e0 : 1.0;
}

class EnergyModel {
 public:
  EnergyModel(const ChainConfig& config, const EnvField& env, double penalty_weight,
              const TipPlaneConstraint* constraint = nullptr)
      : config_(config), env_(env), penalty_weight_(penalty_weight), constraint_(constraint) {
    if (penalty_weight_ <= 0.0) {
      const double d = config.ball.diameter;
      penalty_weight_ = 1e6 * contact_energy_scale(config.ball) / (d * d);
    }
  }

  const ChainConfig& config() const { return config_; }
  const EnvField& env() const { return env_; }
  double penalty_weight() const { return penalty_weight_; }

  EnergyTerms evaluate(const ChainShape& shape, CartesianGradient* grad) const {
    const int n = shape.size();
    const double mag = config_.ball.moment_magnitude;
    const double d = config_.ball.diameter;
    const auto& p = shape.positions;
    const auto& m = shape.dipole_dirs;
    if (grad) grad->reset(n);
    EnergyTerms terms;

    // Pairwise dipole energy plus the non-adjacent contact penalty.
    const double pair_scale = kMu0Over4Pi * mag * mag;
    const double contact = d * (1.0 + kContactMargin);
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) {
        const Vec3 r = p[j] - p[i];
        const double dist = r.norm();
        if (!(dist > 0.0)) throw DomainError("chain energy: coincident ball centers");
        const Vec3 rh = r / dist;
        const double inv3 = 1.0 / (dist * dist * dist);
        const double ai = m[i].dot(rh);
        const double aj = m[j].dot(rh);
        const double mij = m[i].dot(m[j]);
        terms.ballball -= pair_scale * inv3 * (3.0 * ai * aj - mij);
        if (grad) {
          // B_i at j (per unit moment) and vice versa.
          const Vec3 bi = pair_scale * inv3 * (3.0 * ai * rh - m[i]);
          const Vec3 bj = pair_scale * inv3 * (3.0 * aj * rh - m[j]);
          grad->dipole[j] -= bi;
          grad->dipole[i] -= bj;
          const Vec3 dr = -3.0 * pair_scale * inv3 / dist *
                          (m[i] * aj + m[j] * ai + mij * rh - 5.0 * ai * aj * rh);
          grad->position[j] += dr;
          grad->position[i] -= dr;
        }
        if (j > i + 1 && dist < contact) {
          const double gap = contact - dist;
          terms.penalty += penalty_weight_ * gap * gap;
          if (grad) {
            const Vec3 dpen = -2.0 * penalty_weight_ * gap * rh;
            grad->position[j] += dpen;
            grad->position[i] -= dpen;
          }
        }
      }
    }

    if (!env_.is_zero() && mag > 0.0) {
      for (int i = 0; i < n; ++i) {
        const Vec3 b = env_.field_at(p[i]);
        terms.external -= mag * m[i].dot(b);
        if (grad) {
          grad->dipole[i] -= mag * b;
          if (env_.mode == EnvField::Mode::kDipoleSources) {
            grad->position[i] -= mag * (env_.jacobian_at(p[i]) * m[i]);
          }
        }
      }
    }

    if (config_.sleeve.enabled && n >= 3) {
      for (int i = 1; i + 1 < n; ++i) {
        const Vec3 out = (p[i + 1] - p[i]) / d;
        const Vec3 in = (p[i] - p[i - 1]) / d;
        const double theta = std::atan2(out.cross(in).norm(), out.dot(in));
        const double stiff = config_.sleeve.bending_stiffness(i) / d;
        if (theta >= kBendAngleCap) terms.kink = true;
        terms.sleeve += stiff * detail::bend_energy_factor(theta);
        if (grad && theta < kBendAngleCap) {
          const double g = stiff * detail::bend_gradient_factor(theta);
          grad->link[i] -= g * in;
          grad->link[i - 1] -= g * out;
        }
      }
    }

    if (config_.ball.mass > 0.0 && !config_.gravity.isZero(0.0)) {
      for (int i = 0; i < n; ++i) {
        terms.gravity += config_.ball.mass * config_.gravity.dot(p[i]);
        if (grad) grad->position[i] += config_.ball.mass * config_.gravity;
      }
    }

    if (constraint_) {
      // Augmented Lagrangian for s >= 0 with s the signed tip distance to the plane.
      const double s = constraint_->normal.dot(p[n - 1] - constraint_->point);
      const double k = constraint_->stiffness;
      const double lam = constraint_->multiplier;
      const double active = std::max(0.0, lam - k * s);
      terms.constraint = (active * active - lam * lam) / (2.0 * k);
      if (grad) grad->position[n - 1] -= active * constraint_->normal;
    }
    return terms;
  }

 private:
  ChainConfig config_;
  EnvField env_;
  double penalty_weight_;
  const TipPlaneConstraint* constraint_;
};

/// Reduced coordinates of a chain: two chart angles per free unit vector.
/// Links 1..n-2 are free (link 0 is clamped to the base tangent) and every
/// dipole direction is free. Each unit vector is u = Q (sin a cos b, sin a sin b, cos a)
/// with the chart Q centered on the reference shape, so the reference sits at
/// (a, b) = (pi/2, 0), far from the chart poles.
class ChainParameterization {
 public:
  ChainParameterization(const ChainConfig& config, const ChainShape& reference)
      : base_(config.base_position), tangent_(config.base_tangent), d_(config.ball.diameter) {
    n_ = reference.size();
    for (int k = 1; k + 1 < n_; ++k) {
      link_frames_.push_back(
          frame_for((reference.positions[k + 1] - reference.positions[k]).normalized()));
    }
    for (int i = 0; i < n_; ++i) dipole_frames_.push_back(frame_for(reference.dipole_dirs[i]));
  }

  int balls() const { return n_; }
  int free_links() const { return static_cast<int>(link_frames_.size()); }
  int dimension() const { return 2 * (free_links() + n_); }

  VecX origin() const {
    VecX x(dimension());
    for (int k = 0; k < dimension() / 2; ++k) {
      x[2 * k] = 0.5 * std::numbers::pi;
      x[2 * k + 1] = 0.0;
    }
    return x;
  }

  ChainShape shape(const VecX& x) const {
    ChainShape s;
    s.positions.resize(n_);
    s.dipole_dirs.resize(n_);
    s.positions[0] = base_;
    if (n_ > 1) s.positions[1] = base_ + d_ * tangent_;
    for (int k = 0; k < free_links(); ++k) {
      s.positions[k + 2] = s.positions[k + 1] + d_ * unit(link_frames_[k], x, k);
    }
    for (int i = 0; i < n_; ++i) s.dipole_dirs[i] = unit(dipole_frames_[i], x, free_links() + i);
    return s;
  }

  /// Chain rule from Cartesian partials to the chart angles.
  VecX pullback(const VecX& x, const CartesianGradient& g) const {
    VecX out(dimension());
    // Moving link k translates every ball after it.
    Vec3 suffix = Vec3::Zero();
    std::vector<Vec3> link_total(std::max(n_ - 1, 0));
    for (int k = n_ - 2; k >= 0; --k) {
      suffix += g.position[k + 1];
      link_total[k] = g.link[k] + d_ * suffix;
    }
    for (int k = 0; k < free_links(); ++k) {
      write_angles(link_frames_[k], x, k, link_total[k + 1], out);
    }
    for (int i = 0; i < n_; ++i) write_angles(dipole_frames_[i], x, free_links() + i, g.dipole[i], out);
    return out;
  }

  /// Norm of the energy gradient projected on the tangent spaces of all free unit vectors.
  double tangent_gradient_norm(const ChainShape& s, const CartesianGradient& g) const {
    double sum = 0.0;
    Vec3 suffix = Vec3::Zero();
    for (int k = n_ - 2; k >= 1; --k) {
      suffix += g.position[k + 1];
      const Vec3 t = (s.positions[k + 1] - s.positions[k]) / d_;
      const Vec3 gk = g.link[k] + d_ * suffix;
      sum += (gk - gk.dot(t) * t).squaredNorm();
    }
    for (int i = 0; i < n_; ++i) {
      const Vec3& u = s.dipole_dirs[i];
      sum += (g.dipole[i] - g.dipole[i].dot(u) * u).squaredNorm();
    }
    return std::sqrt(sum);
  }

  /// Smallest |sin a| over all charts; small values mean a chart pole is near.
  static double min_chart_sine(const VecX& x) {
    double smin = 1.0;
    for (Eigen::Index k = 0; k < x.size(); k += 2) smin = std::min(smin, std::abs(std::sin(x[k])));
    return smin;
  }

 private:
  static Mat3 frame_for(const Vec3& u) {
    const Vec3 a = u.normalized();
    const Vec3 helper = std::abs(a.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
    const Vec3 v = (helper - helper.dot(a) * a).normalized();
    Mat3 q;
    q.col(0) = a;
    q.col(1) = v;
    q.col(2) = a.cross(v);
    return q;
  }

  static Vec3 unit(const Mat3& q, const VecX& x, int slot) {
    const double a = x[2 * slot];
    const double b = x[2 * slot + 1];
    return q * Vec3(std::sin(a) * std::cos(b), std::sin(a) * std::sin(b), std::cos(a));
  }

  static void write_angles(const Mat3& q, const VecX& x, int slot, const Vec3& g, VecX& out) {
    const double a = x[2 * slot];
    const double b = x[2 * slot + 1];
    const Vec3 da = q * Vec3(std::cos(a) * std::cos(b), std::cos(a) * std::sin(b), -std::sin(a));
    const Vec3 db = q * Vec3(-std::sin(a) * std::sin(b), std::sin(a) * std::cos(b), 0.0);
    out[2 * slot] = g.dot(da);
    out[2 * slot + 1] = g.dot(db);
  }

  Vec3 base_;
  Vec3 tangent_;
  double d_;
  int n_ = 0;
  std::vector<Mat3> link_frames_;
  std::vector<Mat3> dipole_frames_;
};

/// Exact gradient of the total energy in the reduced chart coordinates (J/rad).
inline VecX energy_gradient(const EnergyModel& model, const ChainParameterization& param,
                            const VecX& x) {
  CartesianGradient g;
  model.evaluate(param.shape(x), &g);
  return param.pullback(x, g);
}

inline double energy_at(const EnergyModel& model, const ChainParameterization& param,
                        const VecX& x) {
  return model.evaluate(param.shape(x), nullptr).total();
}

struct SolveDiagnostics {
  bool converged = false;
  bool kinked = false;
  int iterations = 0;
  int evaluations = 0;
  int restarts = 0;
  double energy = 0.0;  // J, physical potential
  EnergyTerms terms;
  double gradient_norm = 0.0;  // J/rad
  ConstraintViolation violation;
  std::string status;
};

struct Equilibrium {
  ChainShape shape;
  SolveDiagnostics diagnostics;
};

/// Brings a previous shape onto `config`: appends straight links or truncates
/// to n balls, clamps the first link to the base tangent and rebuilds the
/// positions from the base.
inline ChainShape adapt_shape(const ChainShape& previous, const ChainConfig& config) {
  if (previous.size() == 0) return ChainShape::straight(config);
  const double d = config.ball.diameter;
  std::vector<Vec3> links;
  for (int k = 0; k + 1 < previous.size(); ++k) {
    links.push_back((previous.positions[k + 1] - previous.positions[k]).normalized());
  }
  std::vector<Vec3> dipoles = previous.dipole_dirs;
  for (Vec3& m : dipoles) m.normalize();
  while (static_cast<int>(dipoles.size()) < config.n) {
    links.push_back(links.empty() ? config.base_tangent : links.back());
    dipoles.push_back(dipoles.back());
  }
  dipoles.resize(config.n);
  links.resize(config.n - 1);
  if (!links.empty()) links[0] = config.base_tangent;
  ChainShape s;
  s.positions.push_back(config.base_position);
  for (const Vec3& t : links) s.positions.push_back(s.positions.back() + d * t);
  s.dipole_dirs = std::move(dipoles);
  return s;
}

namespace detail {

struct MinimizeResult {
  ChainShape shape;
  EnergyTerms terms;
  double gradient_norm = 0.0;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  std::string status;
};

/// L-BFGS with Armijo backtracking over the chart angles. Charts are recentered
/// whenever a unit vector approaches a pole, which also clears the curvature memory.
inline MinimizeResult minimize(const EnergyModel& model, ChainShape start, double tolerance,
                               int max_iterations) {
  constexpr int kMemory = 12;
  constexpr double kArmijo = 1e-4;
  constexpr double kMaxStep = 0.5;  // rad per coordinate
  const double scale = contact_energy_scale(model.config().ball);
  const double tol = tolerance / scale;

  MinimizeResult res;
  CartesianGradient cg;
  auto param = std::make_unique<ChainParameterization>(model.config(), start);
  VecX x = param->origin();

  auto eval = [&](const VecX& at, VecX& grad, ChainShape& shape, EnergyTerms& terms) {
    shape = param->shape(at);
    terms = model.evaluate(shape, &cg);
    grad = param->pullback(at, cg) / scale;
    ++res.evaluations;
    return terms.total() / scale;
  };

  ChainShape shape;
  EnergyTerms terms;
  VecX g;
  double f = eval(x, g, shape, terms);
  double gnorm = param->tangent_gradient_norm(shape, cg) / scale;

  std::deque<std::pair<VecX, VecX>> memory;
  bool fresh_direction = true;
  int stalls = 0;

  for (res.iterations = 0; res.iterations < max_iterations; ++res.iterations) {
    if (gnorm <= tol) {
      res.converged = true;
      res.status = "converged";
      break;
    }

    // Two-loop recursion.
    VecX dir = -g;
    std::vector<double> alpha(memory.size());
    for (int k = static_cast<int>(memory.size()) - 1; k >= 0; --k) {
      const auto& [s, y] = memory[k];
      alpha[k] = s.dot(dir) / y.dot(s);
      dir -= alpha[k] * y;
    }
    if (!memory.empty()) {
      const auto& [s, y] = memory.back();
      dir *= s.dot(y) / y.dot(y);
    }
    for (std::size_t k = 0; k < memory.size(); ++k) {
      const auto& [s, y] = memory[k];
      const double beta = y.dot(dir) / y.dot(s);
      dir += (alpha[k] - beta) * s;
    }
    double slope = g.dot(dir);
    if (!(slope < 0.0)) {
      memory.clear();
      dir = -g;
      slope = -g.squaredNorm();
      fresh_direction = true;
    }

    double step = 1.0;
    const double dmax = dir.cwiseAbs().maxCoeff();
    if (fresh_direction) step = std::min(1.0, 0.1 / dmax);
    if (step * dmax > kMaxStep) step = kMaxStep / dmax;

    VecX x_new;
    VecX g_new;
    ChainShape shape_new;
    EnergyTerms terms_new;
    double f_new = 0.0;
    bool accepted = false;
    for (int tries = 0; tries < 60; ++tries) {
      x_new = x + step * dir;
      f_new = eval(x_new, g_new, shape_new, terms_new);
      if (f_new <= f + kArmijo * step * slope) {
        accepted = true;
        break;
      }
      // Near the optimum energy differences drown in round-off; accept steps that
      // keep the energy flat to machine precision and reduce the gradient.
      if (std::abs(f_new - f) <= 1e-13 * std::max(1.0, std::abs(f)) &&
          g_new.norm() < g.norm()) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }

    if (!accepted) {
      if (!fresh_direction) {
        memory.clear();
        fresh_direction = true;
        continue;
      }
      if (++stalls > 2) {
        res.status = "line search failed";
        break;
      }
      continue;
    }
    stalls = 0;

    const VecX s = x_new - x;
    const VecX y = g_new - g;
    x = x_new;
    g = g_new;
    f = f_new;
    shape = shape_new;
    terms = terms_new;
    gnorm = param->tangent_gradient_norm(shape, cg) / scale;
    fresh_direction = false;

    if (ChainParameterization::min_chart_sine(x) < 0.5) {
      param = std::make_unique<ChainParameterization>(model.config(), shape);
      x = param->origin();
      f = eval(x, g, shape, terms);
      memory.clear();
      fresh_direction = true;
      continue;
    }
    if (s.dot(y) > 1e-12 * s.norm() * y.norm()) {
      memory.emplace_back(s, y);
      if (static_cast<int>(memory.size()) > kMemory) memory.pop_front();
    }
  }
  if (!res.converged && res.status.empty()) res.status = "iteration limit";
  res.shape = std::move(shape);
  res.terms = terms;
  res.gradient_norm = gnorm * scale;
  return res;
}

/// Rotates every unit vector of the shape by an independent random small rotation.
inline ChainShape perturb(const ChainShape& s, const ChainConfig& config, double sigma,
                          std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, sigma);
  auto jitter = [&](const Vec3& u) {
    const Vec3 w(normal(rng), normal(rng), normal(rng));
    const double angle = w.norm();
    if (angle == 0.0) return u;
    return Vec3(Eigen::AngleAxisd(angle, w / angle) * u);
  };
  ChainShape out = s;
  for (int k = 1; k + 1 < s.size(); ++k) {
    const Vec3 t = jitter((s.positions[k + 1] - s.positions[k]).normalized());
    out.positions[k + 1] = out.positions[k] + config.ball.diameter * t;
  }
  for (Vec3& m : out.dipole_dirs) m = jitter(m);
  return out;
}

/// Cold-start alternative: every free link and dipole follows the local field,
/// so strong oblique fields do not leave the solver in the straight-chain basin.
inline ChainShape field_aligned(const ChainShape& s, const ChainConfig& config, const EnvField& env) {
  ChainShape out = s;
  for (int k = 1; k < s.size(); ++k) {
    if (k + 1 < s.size()) {
      const Vec3 b = env.field_at(out.positions[k]);
      const Vec3 t = b.norm() > 0.0 ? Vec3(b.normalized()) : Vec3((s.positions[k + 1] - s.positions[k]).normalized());
      out.positions[k + 1] = out.positions[k] + config.ball.diameter * t;
    }
  }
  for (int k = 0; k < s.size(); ++k) {
    const Vec3 b = env.field_at(out.positions[k]);
    if (b.norm() > 0.0) out.dipole_dirs[k] = b.normalized();
  }
  return out;
}

inline bool better(const MinimizeResult& a, const MinimizeResult& b) {
  const bool a_ok = a.converged && !a.terms.kink;
  const bool b_ok = b.converged && !b.terms.kink;
  if (a_ok != b_ok) return a_ok;
  return a.terms.total() < b.terms.total();
}

}  // namespace detail

/// Quasi-static equilibrium: minimizes the chain potential with the base ball
/// and first link clamped, starting from the warm start (or the straight chain).
inline Equilibrium solve_equilibrium(const ChainConfig& config, const EnvField& env,
                                     const SolverConfig& solver,
                                     const TipPlaneConstraint* constraint = nullptr) {
  config.validate();
  if (!(solver.gradient_tolerance > 0.0)) throw std::invalid_argument("solver: tolerance must be positive");
  Equilibrium out;
  ChainShape start =
      solver.warm_start ? adapt_shape(*solver.warm_start, config) : ChainShape::straight(config);

  if (config.n == 1) {
    // A single ball only turns its dipole toward the local field.
    const Vec3 b = env.field_at(config.base_position);
    if (b.norm() > 0.0) start.dipole_dirs[0] = b.normalized();
    EnergyModel model(config, env, solver.penalty_weight, constraint);
    out.shape = start;
    out.diagnostics.terms = model.evaluate(start, nullptr);
    out.diagnostics.energy = out.diagnostics.terms.physical();
    out.diagnostics.converged = true;
    out.diagnostics.status = "closed form";
    return out;
  }

  double weight = solver.penalty_weight;
  detail::MinimizeResult best;
  int restarts = 0;
  int iterations = 0;
  int evaluations = 0;
  for (int escalation = 0; escalation < 3; ++escalation) {
    EnergyModel model(config, env, weight, constraint);
    best = detail::minimize(model, start, solver.gradient_tolerance, solver.max_iterations);
    iterations += best.iterations;
    evaluations += best.evaluations;
    if (!solver.warm_start && escalation == 0) {
      // Cold starts also try the field-curled chain and the reversed-dipole
      // chain; the lowest converged energy wins.
      ChainShape reversed = start;
      for (Vec3& m : reversed.dipole_dirs) m = -m;
      for (const ChainShape& alt : {detail::field_aligned(start, config, env), reversed}) {
        auto trial = detail::minimize(model, alt, solver.gradient_tolerance, solver.max_iterations);
        iterations += trial.iterations;
        evaluations += trial.evaluations;
        if (detail::better(trial, best)) best = std::move(trial);
      }
    }
    std::mt19937_64 rng(solver.seed);
    for (int r = 0; r < solver.multistart_count && (!best.converged || best.terms.kink); ++r) {
      ++restarts;
      auto trial = detail::minimize(model, detail::perturb(start, config, solver.restart_perturbation, rng),
                                    solver.gradient_tolerance, solver.max_iterations);
      iterations += trial.iterations;
      evaluations += trial.evaluations;
      if (detail::better(trial, best)) best = std::move(trial);
    }
    const double overlap = constraint_violation(best.shape, config.ball.diameter).overlap;
    if (overlap <= 1e-6 * config.ball.diameter) break;
    weight = model.penalty_weight() * 100.0;
    start = best.shape;
  }

  out.shape = std::move(best.shape);
  auto& diag = out.diagnostics;
  diag.converged = best.converged && !best.terms.kink;
  diag.kinked = best.terms.kink;
  diag.iterations = iterations;
  diag.evaluations = evaluations;
  diag.restarts = restarts;
  diag.terms = best.terms;
  diag.energy = best.terms.physical();
  diag.gradient_norm = best.gradient_norm;
  diag.violation = constraint_violation(out.shape, config.ball.diameter);
  diag.status = best.terms.kink ? "infeasible: kinked sleeve" : best.status;
  return out;
}

struct ContactForce {
  double force = 0.0;  // N, normal reaction at the tip
  bool in_contact = false;
  Equilibrium equilibrium;
};

/// Normal force the tip exerts on a wall plane. The wall normal points from the
/// wall into free space; the tip is pushed back onto the plane when the free
/// equilibrium would cross it, and the reaction is the converged multiplier.
inline ContactForce tip_contact_force(const ChainConfig& config, const EnvField& env,
                                      const Vec3& wall_point, const Vec3& wall_normal,
                                      const SolverConfig& solver = {}) {
  ContactForce out;
  const Vec3 normal = wall_normal.normalized();
  Equilibrium free = solve_equilibrium(config, env, solver);
  const double d = config.ball.diameter;
  if (normal.dot(free.shape.tip() - wall_point) > 1e-9 * d) {
    out.equilibrium = std::move(free);
    return out;
  }
  out.in_contact = true;
  TipPlaneConstraint c;
  c.point = wall_point;
  c.normal = normal;
  c.stiffness = 1e3 * contact_energy_scale(config.ball) / (d * d);
  SolverConfig inner = solver;
  inner.warm_start = free.shape;
  Equilibrium eq;
  for (int outer = 0; outer < 60; ++outer) {
    eq = solve_equilibrium(config, env, inner, &c);
    const double s = normal.dot(eq.shape.tip() - wall_point);
    const double next = std::max(0.0, c.multiplier - c.stiffness * s);
    const bool settled = std::abs(next - c.multiplier) <= 1e-9 * std::max(next, 1e-12) + 1e-15 &&
                         std::abs(std::min(s, 0.0)) <= 1e-9 * d;
    c.multiplier = next;
    inner.warm_start = eq.shape;
    if (settled) break;
    if (outer % 10 == 9) c.stiffness *= 10.0;
  }
  out.force = c.multiplier;
  out.equilibrium = std::move(eq);
  return out;
}

}  // namespace ballchain

#endif  // BALLCHAIN_STATICS_HPP
