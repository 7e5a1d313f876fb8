#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "hardproj/constraints.hpp"
#include "hardproj/errors.hpp"
#include "hardproj/mpc.hpp"
#include "hardproj/toys.hpp"

using namespace hardproj;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

ConstraintSet scalar_box(double lo, double hi) {
  return make_linear_constraints(Matrix(0, 1), Vector(0), Matrix::Ones(1, 1),
                                 Vector::Constant(1, lo), Vector::Constant(1, hi));
}

ConstraintSet scalar_identity_eq() {
  return make_linear_constraints(Matrix::Ones(1, 1), Vector::Zero(1), Matrix(0, 1), Vector(0),
                                 Vector(0));
}

Vector scalar(double v) { return Vector::Constant(1, v); }

// Nonlinear set with a mix of bound types, used by several property checks.
ConstraintSet mixed_set() {
  EqualityConstraints eq;
  eq.count = 1;
  eq.eval = [](const Vector& y) { return scalar(std::sin(y[0]) + y[1] * y[2] - 0.3); };
  eq.jacobian = [](const Vector& y) -> Matrix {
    Matrix J(1, 3);
    J << std::cos(y[0]), y[2], y[1];
    return J;
  };
  InequalityConstraints in;
  in.count = 3;
  in.eval = [](const Vector& y) {
    Vector g(3);
    g << y[0] * y[0] + y[1], std::exp(y[2]), y[0] - y[1];
    return g;
  };
  in.jacobian = [](const Vector& y) -> Matrix {
    Matrix J(3, 3);
    J << 2 * y[0], 1, 0, 0, 0, std::exp(y[2]), 1, -1, 0;
    return J;
  };
  in.lower = Vector(3);
  in.upper = Vector(3);
  in.lower << -kInf, 0.5, -1.0;
  in.upper << 1.0, kInf, 1.0;
  return ConstraintSet(3, std::move(eq), std::move(in));
}

}  // namespace

TEST(Residual, ScalarBoxBranches) {
  const ConstraintSet cs = scalar_box(-1.0, 1.0);
  EXPECT_DOUBLE_EQ(residual(cs, scalar(2.0))[0], 1.0);
  EXPECT_DOUBLE_EQ(residual(cs, scalar(-2.0))[0], -1.0);
  EXPECT_DOUBLE_EQ(residual(cs, scalar(0.5))[0], 0.0);
}

TEST(Residual, InfiniteBoundsNeverProduceNaN) {
  const ConstraintSet upper_only = scalar_box(-kInf, 1.0);
  EXPECT_DOUBLE_EQ(residual(upper_only, scalar(-1e300))[0], 0.0);
  EXPECT_DOUBLE_EQ(residual(upper_only, scalar(3.0))[0], 2.0);
  const ConstraintSet lower_only = scalar_box(0.0, kInf);
  EXPECT_DOUBLE_EQ(residual(lower_only, scalar(1e300))[0], 0.0);
  EXPECT_DOUBLE_EQ(residual(lower_only, scalar(-0.25))[0], -0.25);
}

TEST(Residual, NaNEvaluationReportsIndex) {
  InequalityConstraints in;
  in.count = 2;
  in.eval = [](const Vector& y) {
    Vector g(2);
    g << y[0], std::sqrt(y[0]);
    return g;
  };
  in.jacobian = [](const Vector&) { return Matrix(Matrix::Zero(2, 1)); };
  in.lower = Vector::Constant(2, -1.0);
  in.upper = Vector::Constant(2, 1.0);
  EqualityConstraints eq;
  eq.count = 1;
  eq.eval = [](const Vector& y) { return scalar(y[0]); };
  eq.jacobian = [](const Vector&) { return Matrix(Matrix::Ones(1, 1)); };
  const ConstraintSet cs(1, std::move(eq), std::move(in));
  try {
    residual(cs, scalar(-1.0));
    FAIL() << "expected EvaluationError";
  } catch (const EvaluationError& e) {
    // Stacked index: one equality row before the failing inequality row.
    EXPECT_EQ(e.constraint_index(), 2u);
  }
}

TEST(Residual, WrongInputLengthIsDimensionError) {
  EXPECT_THROW(residual(scalar_box(-1, 1), Vector::Zero(2)), DimensionError);
}

TEST(ConstraintSetCtor, RejectsBadBounds) {
  EXPECT_THROW(scalar_box(1.0, 1.0), PreconditionError);
  EXPECT_THROW(scalar_box(2.0, 1.0), PreconditionError);
  EXPECT_THROW(scalar_box(std::nan(""), 1.0), PreconditionError);
  EXPECT_THROW(scalar_box(kInf, kInf), PreconditionError);
}

TEST(ViolationEnergy, Examples) {
  EXPECT_DOUBLE_EQ(violation_energy(scalar_box(-1, 1), scalar(0.0)), 0.0);
  EXPECT_DOUBLE_EQ(violation_energy(scalar_identity_eq(), scalar(2.0)), 2.0);
  EXPECT_DOUBLE_EQ(violation_energy(toys::circle(), toys::circle_start()), 4.5);
}

TEST(ConstraintJacobian, Examples) {
  const Matrix J = constraint_jacobian(toys::circle(), toys::circle_start());
  ASSERT_EQ(J.rows(), 1);
  EXPECT_DOUBLE_EQ(J(0, 0), 4.0);
  EXPECT_DOUBLE_EQ(J(0, 1), 0.0);

  Matrix A = Matrix::Random(2, 4);
  const ConstraintSet lin = make_linear_constraints(A.topRows(1), Vector::Zero(1), A.bottomRows(1),
                                                    scalar(-1), scalar(1));
  EXPECT_EQ(constraint_jacobian(lin, Vector::Zero(4)), constraint_jacobian(lin, Vector::Ones(4)));
  EXPECT_EQ(constraint_jacobian(lin, Vector::Zero(4)), A);
}

TEST(ConstraintJacobian, MpcQuadraticRow) {
  const auto inst = mpc::MpcInstance::standard();
  const ConstraintSet cs = mpc::build_constraints(inst);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal;
  Vector y(inst.num_vars());
  for (Index i = 0; i < y.size(); ++i) y[i] = normal(rng);
  const Matrix J = constraint_jacobian(cs, y);
  const auto groups = mpc::constraint_groups(inst);
  for (Index k = 1; k <= inst.horizon; ++k) {
    const Index row = groups.quad_begin + k - 1;
    const Vector x = y.segment(inst.state_offset(k), inst.nx);
    Vector expected = Vector::Zero(inst.num_vars());
    expected.segment(inst.state_offset(k), inst.nx) = 2.0 * inst.Q * x;
    EXPECT_LE((J.row(row).transpose() - expected).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(ResidualJacobian, KinkAndViolationRows) {
  const ConstraintSet cs = scalar_box(-1.0, 1.0);
  EXPECT_EQ(residual_jacobian(cs, scalar(0.0))(0, 0), 0.0);
  EXPECT_EQ(residual_jacobian(cs, scalar(1.0))(0, 0), 0.0);
  EXPECT_EQ(residual_jacobian(cs, scalar(-1.0))(0, 0), 0.0);
  EXPECT_EQ(residual_jacobian(cs, scalar(1.5))(0, 0), 1.0);
  EXPECT_EQ(residual_jacobian(cs, scalar(-1.5))(0, 0), 1.0);
}

TEST(ResidualJacobian, SatisfiedSetKeepsOnlyEqualityRows) {
  const ConstraintSet cs = mixed_set();
  Vector y(3);
  y << 0.2, 0.1, 0.0;  // g = (0.14, 1, 0.1), all inside
  const Matrix Jr = residual_jacobian(cs, y);
  const Matrix Jc = constraint_jacobian(cs, y);
  EXPECT_EQ(Jr.row(0), Jc.row(0));
  EXPECT_TRUE(Jr.bottomRows(3).isZero(0.0));
}

TEST(JacobianContract, FiniteDifferencesAgree) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const ConstraintSet cs = mixed_set();
  for (int trial = 0; trial < 20; ++trial) {
    Vector y(3);
    for (Index i = 0; i < 3; ++i) y[i] = unit(rng);
    EXPECT_LE(jacobian_fd_error(cs, y), 1e-8);
  }
  const auto inst = mpc::MpcInstance::standard();
  Vector y(inst.num_vars());
  for (Index i = 0; i < y.size(); ++i) y[i] = 3.0 * unit(rng);
  EXPECT_LE(jacobian_fd_error(mpc::build_constraints(inst), y), 1e-8);
}

TEST(JacobianContract, DetectsWrongJacobian) {
  EqualityConstraints eq;
  eq.count = 1;
  eq.eval = [](const Vector& y) { return scalar(y[0] * y[0]); };
  eq.jacobian = [](const Vector& y) -> Matrix { return Matrix::Constant(1, 1, y[0]); };
  const ConstraintSet cs(1, std::move(eq), {});
  EXPECT_GT(jacobian_fd_error(cs, scalar(2.0)), 0.1);
}

// Invariants

TEST(Invariants, FeasibleIffZeroResidualIffZeroEnergy) {
  const ConstraintSet cs = scalar_box(-1.0, 1.0);
  for (double v : {-3.0, -1.0, -0.2, 0.0, 1.0, 1.0 + 1e-12, 4.0}) {
    const bool feasible = v >= -1.0 && v <= 1.0;
    EXPECT_EQ(residual(cs, scalar(v)).isZero(0.0), feasible) << v;
    EXPECT_EQ(violation_energy(cs, scalar(v)) == 0.0, feasible) << v;
  }
}

TEST(Invariants, GradientMatchesBothJacobiansAndFiniteDifferences) {
  const ConstraintSet cs = mixed_set();
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> unit(-2.0, 2.0);
  int checked = 0;
  for (int trial = 0; trial < 50; ++trial) {
    Vector y(3);
    for (Index i = 0; i < 3; ++i) y[i] = unit(rng);
    const Vector g = stack_constraints(cs, y).tail(3);
    // Skip points within the finite-difference stencil of a kink.
    const Vector d_hi = (g - cs.upper()).cwiseAbs();
    const Vector d_lo = (g - cs.lower()).cwiseAbs();
    if (std::min(d_hi.minCoeff(), d_lo.minCoeff()) < 1e-3) continue;
    ++checked;
    const Vector r = residual(cs, y);
    const Vector grad = energy_gradient(cs, y);
    EXPECT_LE((grad - residual_jacobian(cs, y).transpose() * r).norm(), 1e-14 * (1 + grad.norm()));
    Vector fd(3);
    const double h = 1e-6;
    for (Index i = 0; i < 3; ++i) {
      Vector yp = y, ym = y;
      yp[i] += h;
      ym[i] -= h;
      fd[i] = (violation_energy(cs, yp) - violation_energy(cs, ym)) / (2 * h);
    }
    EXPECT_LE((fd - grad).norm(), 1e-5 * std::max(1.0, grad.norm()));
  }
  EXPECT_GT(checked, 20);
}

TEST(Invariants, ScalingInequalityMaps) {
  // Bounds are scaled with g so the feasible set is unchanged; the
  // violated entry's residual scales linearly, the satisfied one stays zero.
  auto make = [](double s) {
    InequalityConstraints in;
    in.count = 2;
    in.eval = [s](const Vector& y) { return Vector(s * y); };
    in.jacobian = [s](const Vector&) { return Matrix(s * Matrix::Identity(2, 2)); };
    in.lower = Vector::Constant(2, -s);
    in.upper = Vector::Constant(2, s);
    return ConstraintSet(2, {}, std::move(in));
  };
  Vector y(2);
  y << 0.5, 3.0;
  const Vector r1 = residual(make(1.0), y);
  for (double s : {0.5, 2.0, 7.0}) {
    const Vector rs = residual(make(s), y);
    EXPECT_EQ(rs[0], 0.0);
    EXPECT_NEAR(rs[1], s * r1[1], 1e-14);
  }
}

TEST(Invariants, JacobiansDifferOnlyOnZeroResidualRows) {
  const ConstraintSet cs = mixed_set();
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> unit(-2.0, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    Vector y(3);
    for (Index i = 0; i < 3; ++i) y[i] = unit(rng);
    const Vector r = residual(cs, y);
    const Matrix diff = constraint_jacobian(cs, y) - residual_jacobian(cs, y);
    for (Index i = 0; i < r.size(); ++i) {
      if (!diff.row(i).isZero(0.0)) {
        EXPECT_GE(i, cs.num_eq());
        EXPECT_EQ(r[i], 0.0);
      }
    }
  }
}
