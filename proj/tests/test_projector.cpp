#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "hardproj/errors.hpp"
#include "hardproj/mpc.hpp"
#include "hardproj/projector.hpp"
#include "hardproj/toys.hpp"

using namespace hardproj;

namespace {

Vector scalar(double v) { return Vector::Constant(1, v); }

ConstraintSet identity_eq() {
  return make_linear_constraints(Matrix::Ones(1, 1), Vector::Zero(1), Matrix(0, 1), Vector(0),
                                 Vector(0));
}

// Random linear set with m equality and q two-sided inequality rows.
ConstraintSet random_linear(Index m, Index q, Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Matrix A(m + q, n);
  for (Index i = 0; i < A.size(); ++i) A.data()[i] = normal(rng);
  Vector b(m), lo(q), hi(q);
  for (Index i = 0; i < m; ++i) b[i] = normal(rng);
  for (Index i = 0; i < q; ++i) {
    lo[i] = -0.5 - std::abs(normal(rng));
    hi[i] = 0.5 + std::abs(normal(rng));
  }
  return make_linear_constraints(A.topRows(m), b, A.bottomRows(q), lo, hi);
}

Vector random_vector(Index n, std::mt19937_64& rng, double scale = 3.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

}  // namespace

TEST(DampedStep, ScalarClosedForm) {
  EXPECT_NEAR(damped_step(identity_eq(), scalar(1.0), 0.5)[0], 1.0 / 3.0, 1e-15);
}

TEST(DampedStep, CircleFirstStep) {
  const Vector y = damped_step(toys::circle(), toys::circle_start(), 0.3);
  EXPECT_NEAR(y[0], 2.0 - 12.0 / 16.3, 1e-15);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_NEAR(y[0], 1.2638, 1e-4);
}

TEST(DampedStep, FixedPointAndPrecondition) {
  const ConstraintSet cs = toys::circle();
  Vector on(2);
  on << 0.6, 0.8;
  EXPECT_EQ(damped_step(cs, on, 0.3), on);
  EXPECT_THROW(damped_step(cs, on, 0.0), PreconditionError);
  EXPECT_THROW(damped_step(cs, on, -1.0), PreconditionError);
}

TEST(VanillaStep, LinearEqualityIsOneStepExact) {
  std::mt19937_64 rng(1);
  const ConstraintSet cs = random_linear(1, 0, 4, rng);
  const Vector y = vanilla_step(cs, random_vector(4, rng));
  EXPECT_LE(residual(cs, y).norm(), 1e-12);
  EXPECT_LE((vanilla_step(cs, y) - y).norm(), 1e-12);
}

TEST(VanillaStep, FixedPoint) {
  Vector on(2);
  on << 0.0, -1.0;
  EXPECT_EQ(vanilla_step(toys::circle(), on), on);
}

TEST(VanillaStep, RankDeficiencyIsLoud) {
  // Two parallel rows.
  Matrix A(2, 3);
  A << 1, 2, 3, 2, 4, 6;
  const ConstraintSet cs =
      make_linear_constraints(A, Vector::Ones(2), Matrix(0, 3), Vector(0), Vector(0));
  EXPECT_THROW(vanilla_step(cs, Vector::Zero(3)), RankDeficiencyError);
  // Circle at the origin: zero Jacobian row.
  EXPECT_THROW(vanilla_step(toys::circle(), Vector::Zero(2)), RankDeficiencyError);
}

TEST(LmStep, SatisfiedInequalitiesOnly) {
  const ConstraintSet cs = make_linear_constraints(Matrix(0, 2), Vector(0), Matrix::Identity(2, 2),
                                                   Vector::Constant(2, -1), Vector::Constant(2, 1));
  Vector y(2);
  y << 0.3, -0.7;
  EXPECT_EQ(lm_step(cs, y, 0.3), y);
}

TEST(LmStep, ScalarClosedForm) {
  EXPECT_NEAR(lm_step(identity_eq(), scalar(1.0), 0.5)[0], 1.0 / 3.0, 1e-15);
}

TEST(LmStep, DiffersFromDampedAtStalledVanillaPoint) {
  const ConstraintSet cs = toys::two_constraint();
  ProjectionConfig cfg{0.0, 200, 0.0, Method::VanillaHardNet};
  const Vector stalled = project(cs, toys::two_constraint_start(), cfg).y;
  ASSERT_GT(violation_energy(cs, stalled), 1e-4);
  const Vector d_damped = damped_step(cs, stalled, 0.3) - stalled;
  const Vector d_lm = lm_step(cs, stalled, 0.3) - stalled;
  ASSERT_GT(d_damped.norm(), 0.0);
  ASSERT_GT(d_lm.norm(), 0.0);
  const double cosine = d_damped.dot(d_lm) / (d_damped.norm() * d_lm.norm());
  const double angle = std::acos(std::clamp(cosine, -1.0, 1.0));
  EXPECT_GT(angle, 1e-6);
}

TEST(Project, CircleConvergesToNearestPoint) {
  ProjectionConfig cfg{0.3, 500, 1e-10, Method::DampedHardNet};
  const ProjectionResult res = project(toys::circle(), toys::circle_start(), cfg);
  EXPECT_TRUE(res.trace.converged);
  EXPECT_NEAR(res.y[0], 1.0, 1e-10);
  EXPECT_EQ(res.y[1], 0.0);
  EXPECT_LE(residual(toys::circle(), res.y).norm(), 1e-10);
}

TEST(Project, FeasibleStartTakesNoSteps) {
  Vector on(2);
  on << 0.6, -0.8;
  for (Method m : {Method::DampedHardNet, Method::VanillaHardNet, Method::LevenbergMarquardt}) {
    ProjectionConfig cfg{m == Method::VanillaHardNet ? 0.0 : 0.3, 500, 1e-9, m};
    const ProjectionResult res = project(toys::two_constraint(), on, cfg);
    EXPECT_TRUE(res.trace.converged);
    EXPECT_EQ(res.trace.iters_used, 0);
    EXPECT_EQ(res.trace.iterates.size(), 1u);
    EXPECT_EQ(res.trace.energies.size(), 1u);
  }
}

TEST(Project, TwoConstraintDichotomy) {
  const ConstraintSet cs = toys::two_constraint();
  ProjectionConfig damped{0.3, 500, 0.0, Method::DampedHardNet};
  const ProjectionResult d = project(cs, toys::two_constraint_start(), damped);
  EXPECT_LE(d.trace.energies.back(), 1e-10);

  ProjectionConfig vanilla{0.0, 10000, 0.0, Method::VanillaHardNet};
  const ProjectionResult v = project(cs, toys::two_constraint_start(), vanilla);
  double best = std::numeric_limits<double>::infinity();
  for (double e : v.trace.energies) best = std::min(best, e);
  EXPECT_GT(best, 1e-4);
}

TEST(Project, TraceShapeAndDeterminism) {
  ProjectionConfig cfg{0.3, 37, 0.0, Method::DampedHardNet};
  const ProjectionResult a = project(toys::two_constraint(), toys::two_constraint_start(), cfg);
  const ProjectionResult b = project(toys::two_constraint(), toys::two_constraint_start(), cfg);
  EXPECT_EQ(a.trace.iterates.size(), 38u);
  EXPECT_EQ(a.trace.energies.size(), 38u);
  EXPECT_EQ(a.trace.iters_used, 37);
  EXPECT_EQ(a.y, b.y);
  EXPECT_EQ(a.trace.energies, b.trace.energies);
}

TEST(Project, ConvergedTraceEndsBelowTolerance) {
  const double tol = 1e-7;
  ProjectionConfig cfg{0.3, 500, tol, Method::DampedHardNet};
  const ConstraintSet cs = toys::two_constraint();
  const ProjectionResult res = project(cs, toys::two_constraint_start(), cfg);
  ASSERT_TRUE(res.trace.converged);
  EXPECT_LE(std::sqrt(2.0 * res.trace.energies.back()), tol);
  EXPECT_EQ(res.trace.iterates.back(), res.y);
}

TEST(Project, NonFiniteIterateReportsIndex) {
  // h(y) = y - 1 with a Jacobian understated by 150 orders of magnitude: the
  // first step lands near 1e150 and the second overflows in the Gram solve.
  EqualityConstraints eq;
  eq.count = 1;
  eq.eval = [](const Vector& y) { return scalar(y[0] - 1.0); };
  eq.jacobian = [](const Vector&) { return Matrix(Matrix::Constant(1, 1, 1e-150)); };
  const ConstraintSet cs(1, std::move(eq), {});
  ProjectionConfig cfg{0.0, 10, 0.0, Method::VanillaHardNet};
  try {
    project(cs, scalar(0.0), cfg);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.iteration(), 2);
  }
}

TEST(ProjectionConfig, Validation) {
  EXPECT_THROW((ProjectionConfig{0.0, 10, 0.0, Method::DampedHardNet}.validate()),
               PreconditionError);
  EXPECT_THROW((ProjectionConfig{0.0, 10, 0.0, Method::LevenbergMarquardt}.validate()),
               PreconditionError);
  EXPECT_NO_THROW((ProjectionConfig{0.0, 10, 0.0, Method::VanillaHardNet}.validate()));
  EXPECT_THROW((ProjectionConfig{0.3, 0, 0.0, Method::DampedHardNet}.validate()),
               PreconditionError);
  EXPECT_THROW((ProjectionConfig{0.3, 10, -1.0, Method::DampedHardNet}.validate()),
               PreconditionError);
}

TEST(DecayBound, Examples) {
  const DecayBound b = decay_bound(1.0, 1.0, 1.0, 1.0);
  EXPECT_DOUBLE_EQ(b.c_eps, 0.375);
  EXPECT_DOUBLE_EQ(b.factor, 0.25);

  const DecayBound far = decay_bound(1.0, 1.0, 1.0, 1e12);
  EXPECT_LT(far.c_eps, 1e-11);
  EXPECT_GT(far.factor, 1.0 - 1e-11);

  EXPECT_THROW(decay_bound(1.0, 1.0, 1.0, 0.5), PreconditionError);
  EXPECT_THROW(decay_bound(0.0, 1.0, 1.0, 1.0), PreconditionError);
}

TEST(DecayBound, FactorInUnitIntervalWhenMuEqualsL) {
  for (double L : {0.1, 1.0, 7.0}) {
    for (double G2 : {L, 2.0 * L}) {
      for (double eps_over : {0.5000001, 0.6, 1.0, 3.0, 100.0}) {
        const DecayBound b = decay_bound(L, L, std::sqrt(G2), eps_over * L);
        EXPECT_GE(b.factor, 0.0);
        EXPECT_LT(b.factor, 1.0);
      }
    }
  }
}

TEST(VerifyDecay, ScalarRatioIsExactlyAQuarter) {
  ProjectionConfig cfg{1.0, 20, 0.0, Method::DampedHardNet};
  const DecayReport rep =
      verify_decay(identity_eq(), scalar(3.0), cfg, decay_bound(1.0, 1.0, 1.0, 1.0));
  EXPECT_TRUE(rep.passed);
  EXPECT_TRUE(rep.monotone);
  EXPECT_NEAR(rep.worst_ratio, 0.25, 1e-14);
}

TEST(VerifyDecay, AffineFamily) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const toys::AffineToy toy = toys::affine(4, 7, 0.3, 1.5, seed);
    for (double scale : {0.51, 1.0, 2.0}) {
      const DecayBound bound = decay_bound(toy.mu, toy.L, toy.G, scale * toy.L);
      ProjectionConfig cfg{bound.epsilon, 200, 0.0, Method::DampedHardNet};
      const DecayReport rep = verify_decay(toy.constraints, toy.y0, cfg, bound);
      EXPECT_TRUE(rep.passed) << seed << " " << scale << " first " << rep.first_violation;
      EXPECT_LE(rep.worst_ratio, bound.factor + 1e-12);
    }
  }
}

TEST(VerifyDecay, ReportsFailureInsteadOfThrowing) {
  // Overstated mu makes the envelope too tight for the observed decay.
  const toys::AffineToy toy = toys::affine(3, 5, 0.2, 1.0, 4);
  const DecayBound wrong = decay_bound(1.0, toy.L, toy.G, toy.L);
  ProjectionConfig cfg{wrong.epsilon, 50, 0.0, Method::DampedHardNet};
  const DecayReport rep = verify_decay(toy.constraints, toy.y0, cfg, wrong);
  EXPECT_FALSE(rep.passed);
  EXPECT_GE(rep.first_violation, 1);
}

// Properties

TEST(Properties, DampedApproachesVanillaAsEpsilonVanishes) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const ConstraintSet cs = random_linear(2, 3, 8, rng);
    const Vector y = random_vector(8, rng);
    EXPECT_LE((damped_step(cs, y, 1e-10) - vanilla_step(cs, y)).norm(), 1e-6);
  }
}

TEST(Properties, DampedEqualsLmOnEqualityOnlySets) {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 20; ++trial) {
    const ConstraintSet cs = random_linear(3, 0, 6, rng);
    const Vector y = random_vector(6, rng);
    for (double eps : {1e-3, 0.3, 5.0}) {
      const Vector a = damped_step(cs, y, eps);
      const Vector b = lm_step(cs, y, eps);
      EXPECT_LE((a - b).norm(), 1e-10 * (1.0 + a.norm()));
    }
  }
  const Vector a = damped_step(toys::circle(), toys::circle_start(), 0.3);
  const Vector b = lm_step(toys::circle(), toys::circle_start(), 0.3);
  EXPECT_LE((a - b).norm(), 1e-14);
}

TEST(Properties, DampedStepNormBound) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const Index n = 2 + trial % 6;
    const ConstraintSet cs = random_linear(1 + trial % 3, 1 + trial % 4, n, rng);
    const Vector y = random_vector(n, rng);
    for (double eps : {1e-4, 0.3, 10.0}) {
      const double step = (damped_step(cs, y, eps) - y).norm();
      EXPECT_LE(step, residual(cs, y).norm() / (2.0 * std::sqrt(eps)) * (1 + 1e-12));
    }
  }
  const auto inst = mpc::MpcInstance::standard();
  const ConstraintSet cs = mpc::build_constraints(inst);
  const Vector y = random_vector(inst.num_vars(), rng);
  EXPECT_LE((damped_step(cs, y, 0.3) - y).norm(),
            residual(cs, y).norm() / (2.0 * std::sqrt(0.3)) * (1 + 1e-12));
}

TEST(Properties, MpcVanillaRejectedDampedAccepted) {
  const auto inst = mpc::MpcInstance::standard();
  const ConstraintSet cs = mpc::build_constraints(inst);
  ASSERT_EQ(cs.num_rows(), 100);
  ASSERT_EQ(cs.dim(), 90);
  Vector y = Vector::Zero(inst.num_vars());
  y[inst.control_offset(0)] = 2.0;
  EXPECT_THROW(vanilla_step(cs, y), RankDeficiencyError);
  EXPECT_NO_THROW(damped_step(cs, y, 0.3));
}
