#include <gtest/gtest.h>

#include <array>
#include <functional>

#include "ballchain/statics.hpp"
#include "brute_force_oracle.hpp"
#include "chain_fixtures.hpp"

using namespace ballchain;
using namespace ballchain::testing;

namespace {

EnvField planar_field(double tesla, double degrees) {
  const double a = degrees * kDeg;
  return EnvField::uniform(tesla * Vec3(std::cos(a), std::sin(a), 0.0));
}

double tip_alignment(const ChainShape& s, const EnvField& env) {
  return alignment_angle(env.uniform_B.normalized(), tip_tangent(s));
}

}  // namespace

TEST(SolveEquilibrium, ZeroFieldGivesStraightAlignedChain) {
  for (int n : {1, 2, 5, 16}) {
    ChainConfig c;
    c.n = n;
    c.base_position = Vec3(0.01, -0.02, 0.005);
    c.base_tangent = Vec3(0.2, 0.9, -0.3).normalized();
    const Equilibrium eq = solve_equilibrium(c, EnvField::uniform(Vec3::Zero()), {});
    ASSERT_TRUE(eq.diagnostics.converged) << eq.diagnostics.status;
    for (int i = 0; i < n; ++i) {
      const Vec3 expected = c.base_position + i * c.ball.diameter * c.base_tangent;
      EXPECT_LT((eq.shape.positions[i] - expected).norm(), 1e-9 * c.ball.diameter);
      EXPECT_LT((eq.shape.dipole_dirs[i] - c.base_tangent).norm(), 1e-9);
    }
  }
}

TEST(SolveEquilibrium, SingleBallAlignsWithLocalField) {
  ChainConfig c;
  const Vec3 b(0.0, 0.01, 0.02);
  const Equilibrium eq = solve_equilibrium(c, EnvField::uniform(b), {});
  EXPECT_LT(alignment_angle(eq.shape.dipole_dirs[0], b), 1e-15);
  EXPECT_LT(rel_err(eq.diagnostics.energy, -c.ball.moment_magnitude * b.norm()), 1e-14);
}

TEST(SolveEquilibrium, TwoBallsMatchBruteForceAtPerpendicularField) {
  ChainConfig c;
  c.n = 2;
  const EnvField env = planar_field(0.023, 90.0);
  const Equilibrium eq = solve_equilibrium(c, env, {});
  ASSERT_TRUE(eq.diagnostics.converged);
  const OracleResult oracle = brute_force_minimum(c, env);
  EXPECT_LT(rel_err(eq.diagnostics.energy, oracle.energy), 1e-6);
  // At 23 mT the pair coupling dominates: the distal dipole stays far from the field.
  const double distal = alignment_angle(eq.shape.dipole_dirs[1], env.uniform_B);
  EXPECT_NEAR(distal, alignment_angle(oracle.shape.dipole_dirs[1], env.uniform_B), 1e-4);
  EXPECT_GT(distal, 45.0 * kDeg);
}

TEST(SolveEquilibrium, TwoBallsAlignUnderStrongField) {
  ChainConfig c;
  c.n = 2;
  const EnvField env = planar_field(0.2, 90.0);
  const Equilibrium eq = solve_equilibrium(c, env, {});
  ASSERT_TRUE(eq.diagnostics.converged);
  EXPECT_LT(alignment_angle(eq.shape.dipole_dirs[1], env.uniform_B), 5.0 * kDeg);
}

TEST(SolveEquilibrium, ThreeBallsMatchBruteForce) {
  ChainConfig c;
  c.n = 3;
  c.sleeve.enabled = true;
  c.gravity = Vec3(0, 0, 9.81);
  const EnvField env = planar_field(0.023, 60.0);
  const Equilibrium eq = solve_equilibrium(c, env, {});
  ASSERT_TRUE(eq.diagnostics.converged);
  const OracleResult oracle = brute_force_minimum(c, env);
  EXPECT_LT(rel_err(eq.diagnostics.energy, oracle.energy), 1e-6);
  EXPECT_LT((eq.shape.tip() - oracle.shape.tip()).norm(), 1e-4 * c.ball.diameter);
}

TEST(SolveEquilibrium, TipAlignsWithRotatingFieldForTenBalls) {
  ChainConfig c;
  c.n = 10;
  SolverConfig solver;
  for (int k = 0; k <= 8; ++k) {
    const EnvField env = planar_field(0.023, 22.5 * k);
    const Equilibrium eq = solve_equilibrium(c, env, solver);
    ASSERT_TRUE(eq.diagnostics.converged) << "angle step " << k;
    EXPECT_LE(tip_alignment(eq.shape, env), 1.4 * kDeg) << "angle step " << k;
    solver.warm_start = eq.shape;
  }
}

TEST(SolveEquilibrium, ReturnedShapesRespectContactAndNonPenetration) {
  Gen gen(31);
  for (int k = 0; k < 15; ++k) {
    ChainConfig c;
    c.n = gen.integer(3, 16);
    c.sleeve.enabled = k % 2 == 1;
    const EnvField env = k % 3 == 0 ? EnvField::dipoles(two_sources()) : EnvField::uniform(gen.vec(0.05));
    const Equilibrium eq = solve_equilibrium(c, env, {});
    EXPECT_TRUE(eq.diagnostics.converged) << eq.diagnostics.status;
    const auto v = constraint_violation(eq.shape, c.ball.diameter);
    EXPECT_LT(v.link_error, 1e-9 * c.ball.diameter);
    EXPECT_LT(v.overlap, 1e-6 * c.ball.diameter);
    for (const Vec3& m : eq.shape.dipole_dirs) EXPECT_NEAR(m.norm(), 1.0, 1e-12);
    EXPECT_LT((eq.shape.positions[1] - eq.shape.positions[0] - c.ball.diameter * c.base_tangent).norm(), 1e-15);
  }
}

TEST(SolveEquilibrium, ConvergedShapeIsLocalMinimum) {
  ChainConfig c;
  c.n = 8;
  c.sleeve.enabled = true;
  const EnvField env = EnvField::dipoles(two_sources());
  SolverConfig solver;
  const Equilibrium eq = solve_equilibrium(c, env, solver);
  ASSERT_TRUE(eq.diagnostics.converged);
  EXPECT_LE(eq.diagnostics.gradient_norm, solver.gradient_tolerance);

  const EnergyModel model(c, env, 0.0);
  const ChainParameterization param(c, eq.shape);
  const double e0 = energy_at(model, param, param.origin());
  Gen gen(32);
  for (int k = 0; k < 20; ++k) {
    VecX x = param.origin();
    VecX dir(x.size());
    for (Eigen::Index i = 0; i < dir.size(); ++i) dir[i] = gen.uniform(-1, 1);
    x += 1e-3 * dir.normalized();
    EXPECT_GE(energy_at(model, param, x), e0 - 1e-12);
  }
}

TEST(SolveEquilibrium, FrameInvariance) {
  Gen gen(33);
  ChainConfig c;
  c.n = 9;
  c.sleeve.enabled = true;
  c.gravity = Vec3(0, 0, 9.81);
  const EnvField env = planar_field(0.023, 110.0);
  const Equilibrium ref = solve_equilibrium(c, env, {});
  for (int k = 0; k < 3; ++k) {
    const Mat3 rot = gen.rotation();
    ChainConfig rc = c;
    rc.base_tangent = rot * c.base_tangent;
    rc.gravity = rot * c.gravity;
    rc.base_position = gen.vec(0.1);
    const Equilibrium eq = solve_equilibrium(rc, EnvField::uniform(rot * env.uniform_B), {});
    ASSERT_TRUE(eq.diagnostics.converged);
    for (int i = 0; i < c.n; ++i) {
      const Vec3 expected = rot * (ref.shape.positions[i] - c.base_position);
      EXPECT_LT((eq.shape.positions[i] - rc.base_position - expected).norm(), 1e-6 * c.ball.diameter);
    }
  }
}

TEST(SolveEquilibrium, WarmStartIsExtendedAndTruncated) {
  ChainConfig c;
  c.n = 6;
  const EnvField env = planar_field(0.023, 90.0);
  const Equilibrium six = solve_equilibrium(c, env, {});

  const ChainShape longer = adapt_shape(six.shape, [&] { auto k = c; k.n = 8; return k; }());
  ASSERT_EQ(longer.size(), 8);
  const Vec3 last = six.shape.positions[5] - six.shape.positions[4];
  EXPECT_LT((longer.positions[7] - longer.positions[6] - last).norm(), 1e-15);
  EXPECT_EQ(longer.dipole_dirs[7], six.shape.dipole_dirs[5]);

  const ChainShape shorter = adapt_shape(six.shape, [&] { auto k = c; k.n = 3; return k; }());
  ASSERT_EQ(shorter.size(), 3);
  EXPECT_LT((shorter.positions[2] - six.shape.positions[2]).norm(), 1e-15);

  // Re-solving from the previous equilibrium converges immediately to the same shape.
  SolverConfig warm;
  warm.warm_start = six.shape;
  const Equilibrium again = solve_equilibrium(c, env, warm);
  EXPECT_LE(again.diagnostics.iterations, 2);
  EXPECT_LT((again.shape.tip() - six.shape.tip()).norm(), 1e-9 * c.ball.diameter);
}

TEST(SolveEquilibrium, NonConvergenceIsReported) {
  ChainConfig c;
  c.n = 12;
  SolverConfig solver;
  solver.max_iterations = 3;
  solver.multistart_count = 2;
  const Equilibrium eq = solve_equilibrium(c, planar_field(0.023, 120.0), solver);
  EXPECT_FALSE(eq.diagnostics.converged);
  EXPECT_EQ(eq.diagnostics.restarts, 2);
  EXPECT_EQ(eq.shape.size(), 12);
  EXPECT_EQ(eq.diagnostics.status, "iteration limit");
}

TEST(TipTangent, EstimatorsAgreeForLongerChains) {
  for (int n = 6; n <= 16; ++n) {
    ChainConfig c;
    c.n = n;
    SolverConfig solver;
    for (int k = 0; k <= 8; ++k) {
      const Equilibrium eq = solve_equilibrium(c, planar_field(0.023, 22.5 * k), solver);
      solver.warm_start = eq.shape;
      EXPECT_LT(alignment_angle(tip_tangent(eq.shape), tip_tangent_twoball(eq.shape)), 10.0 * kDeg)
          << "n=" << n << " step " << k;
    }
  }
}

TEST(TipContactForce, ZeroFieldExertsNothing) {
  ChainConfig c;
  c.n = 8;
  const ContactForce f = tip_contact_force(c, EnvField::uniform(Vec3::Zero()), Vec3(0, -0.001, 0), Vec3::UnitY());
  EXPECT_FALSE(f.in_contact);
  EXPECT_EQ(f.force, 0.0);
}

TEST(TipContactForce, GrowsAsSourceApproaches) {
  const double magnet = moment_from_remanence(1.45, cylinder_volume(76.2e-3, 38.1e-3));
  ChainConfig c;
  c.n = 10;
  double previous = 0.0;
  for (double distance : {0.10, 0.09, 0.08, 0.07, 0.06}) {
    const EnvField env = EnvField::dipoles({{Vec3(0.025, -distance, 0), Vec3(-magnet, 0, 0)}});
    const ContactForce f = tip_contact_force(c, env, Vec3(0, -0.002, 0), Vec3::UnitY());
    ASSERT_TRUE(f.in_contact);
    EXPECT_TRUE(f.equilibrium.diagnostics.converged);
    EXPECT_NEAR(f.equilibrium.shape.tip().y(), -0.002, 1e-9 * c.ball.diameter);
    EXPECT_GT(f.force, previous);
    previous = f.force;
  }
}

TEST(TipContactForce, SleeveChangesForceByBoundedAmount) {
  const double magnet = moment_from_remanence(1.45, cylinder_volume(76.2e-3, 38.1e-3));
  const EnvField env = EnvField::dipoles({{Vec3(0.025, -0.08, 0), Vec3(-magnet, 0, 0)}});
  ChainConfig c;
  c.n = 10;
  const double bare = tip_contact_force(c, env, Vec3(0, -0.002, 0), Vec3::UnitY()).force;
  c.sleeve.enabled = true;
  const double sleeved = tip_contact_force(c, env, Vec3(0, -0.002, 0), Vec3::UnitY()).force;
  EXPECT_GT(sleeved, 0.0);
  EXPECT_LT(std::abs(sleeved - bare), 0.5 * bare);
}

TEST(TipContactForce, MultiplierMatchesEnergySlope) {
  // The reaction equals the derivative of the constrained minimum energy with
  // respect to the wall offset (envelope theorem), checked by differencing.
  const double magnet = moment_from_remanence(1.45, cylinder_volume(76.2e-3, 38.1e-3));
  const EnvField env = EnvField::dipoles({{Vec3(0.025, -0.08, 0), Vec3(-magnet, 0, 0)}});
  ChainConfig c;
  c.n = 10;
  const double h = 2e-6;
  const auto at = [&](double wall) { return tip_contact_force(c, env, Vec3(0, wall, 0), Vec3::UnitY()); };
  const ContactForce mid = at(-0.002);
  const double slope = (at(-0.002 + h).equilibrium.diagnostics.energy - at(-0.002 - h).equilibrium.diagnostics.energy) / (2 * h);
  EXPECT_LT(rel_err(slope, mid.force), 1e-3);
}
