#include <gtest/gtest.h>

#include <random>

#include "hardproj/errors.hpp"
#include "hardproj/mpc.hpp"
#include "hardproj/projector.hpp"
#include "hardproj/toys.hpp"
#include "hardproj/traced_projection.hpp"

using namespace hardproj;

namespace {

Vector random_vector(Index n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

Matrix random_matrix(Index r, Index c, std::mt19937_64& rng) {
  Matrix M(r, c);
  for (Index j = 0; j < c; ++j) M.col(j) = random_vector(r, rng);
  return M;
}

Vector traced_forward(const TracedConstraints& tc, const Vector& y0, double eps, int K) {
  ad::Tape tape;
  const ad::Value y = tape.constant(y0);
  return tape.vector(unrolled_project_traced(tape, tc, y, eps, K));
}

// d(output)/d(y0) by one backward pass per output row.
Matrix traced_jacobian(const TracedConstraints& tc, const Vector& y0, double eps, int K) {
  const Index n = y0.size();
  Matrix J(n, n);
  for (Index i = 0; i < n; ++i) {
    ad::Tape tape;
    const ad::Value y = tape.parameter(y0);
    const ad::Value out = unrolled_project_traced(tape, tc, y, eps, K);
    const ad::Value pick = tape.constant(Vector::Unit(n, i));
    J.row(i) = tape.backward(ad::transpose_matvec(out, pick))[y].transpose();
  }
  return J;
}

}  // namespace

TEST(UnrolledProjection, ZeroIterationsIsIdentity) {
  std::mt19937_64 rng(1);
  const Vector y0 = random_vector(2, rng);
  EXPECT_EQ(traced_forward(toys::circle_traced(), y0, 0.3, 0), y0);
  const Matrix J = traced_jacobian(toys::circle_traced(), y0, 0.3, 0);
  EXPECT_EQ(J, Matrix::Identity(2, 2));
}

TEST(UnrolledProjection, CircleMatchesUntracedProject) {
  ProjectionConfig cfg{0.3, 50, 0.0, Method::DampedHardNet};
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const Vector y0 = random_vector(2, rng, 2.0);
    const Vector dense = project(toys::circle(), y0, cfg).y;
    EXPECT_LE((traced_forward(toys::circle_traced(), y0, 0.3, 50) - dense).cwiseAbs().maxCoeff(),
              1e-12);
  }
}

TEST(UnrolledProjection, LinearOneStepJacobianMatchesClosedForm) {
  std::mt19937_64 rng(3);
  const Index n = 6;
  const Matrix A = random_matrix(3, n, rng);
  const Vector b = random_vector(3, rng);
  const TracedConstraints tc =
      make_linear_traced(A, b, Matrix(0, n), Vector(0), Vector(0));
  const ConstraintSet cs = make_linear_constraints(A, b, Matrix(0, n), Vector(0), Vector(0));
  for (double eps : {1e-6, 0.3}) {
    const Vector y0 = random_vector(n, rng);
    Matrix H = A * A.transpose();
    H.diagonal().array() += eps;
    const Matrix P = Matrix::Identity(n, n) - A.transpose() * H.ldlt().solve(A);
    const Vector affine = P * y0 + A.transpose() * H.ldlt().solve(b);
    EXPECT_LE((traced_forward(tc, y0, eps, 1) - affine).norm(), 1e-10);
    EXPECT_LE((traced_forward(tc, y0, eps, 1) - damped_step(cs, y0, eps)).norm(), 1e-10);
    EXPECT_LE((traced_jacobian(tc, y0, eps, 1) - P).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(UnrolledProjection, LinearInequalitiesMatchDenseStep) {
  std::mt19937_64 rng(4);
  const Index n = 5;
  const Matrix Aeq = random_matrix(1, n, rng), Ain = random_matrix(3, n, rng);
  const Vector beq = random_vector(1, rng);
  const double inf = std::numeric_limits<double>::infinity();
  Vector lo(3), hi(3);
  lo << -0.2, -inf, -1.0;
  hi << 0.2, 0.1, inf;
  const TracedConstraints tc = make_linear_traced(Aeq, beq, Ain, lo, hi);
  const ConstraintSet cs = make_linear_constraints(Aeq, beq, Ain, lo, hi);
  ProjectionConfig cfg{0.3, 20, 0.0, Method::DampedHardNet};
  for (int trial = 0; trial < 5; ++trial) {
    const Vector y0 = random_vector(n, rng, 3.0);
    EXPECT_LE((traced_forward(tc, y0, 0.3, 20) - project(cs, y0, cfg).y).norm(), 1e-12);
  }
}

TEST(UnrolledProjection, MpcFiveHundredStepsMatchUntracedProject) {
  const auto inst = mpc::MpcInstance::standard();
  std::mt19937_64 rng(5);
  const ProjectionConfig cfg{0.3, 500, 0.0, Method::DampedHardNet};
  for (int trial = 0; trial < 2; ++trial) {
    const mpc::MpcInstance sample = inst.with_initial_state(mpc::sample_feasible_initial(inst, rng));
    const Vector y0 = random_vector(inst.num_vars(), rng, 3.0);
    const Vector dense = project(mpc::build_constraints(sample), y0, cfg).y;
    const Vector traced = traced_forward(mpc::traced_constraints(sample), y0, 0.3, 500);
    EXPECT_LE((traced - dense).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(UnrolledProjection, CircleGradientThroughFiftySteps) {
  // Loss w^T y_K; the start is off-axis so the Jacobian dependence matters.
  std::mt19937_64 rng(6);
  const TracedConstraints tc = toys::circle_traced();
  for (int trial = 0; trial < 5; ++trial) {
    const Vector y0 = random_vector(2, rng, 1.5) + Vector::Constant(2, 0.5);
    const Vector w = random_vector(2, rng);
    ad::Tape tape;
    const ad::Value y = tape.parameter(y0);
    const ad::Value out = unrolled_project_traced(tape, tc, y, 0.3, 50);
    const Vector grad = tape.backward(ad::transpose_matvec(out, tape.constant(w)))[y];

    Vector fd(2);
    const double h = 1e-5;
    for (Index i = 0; i < 2; ++i) {
      Vector p = y0, m = y0;
      p[i] += h;
      m[i] -= h;
      fd[i] = (w.dot(traced_forward(tc, p, 0.3, 50)) - w.dot(traced_forward(tc, m, 0.3, 50))) /
              (2 * h);
    }
    EXPECT_LE((grad - fd).norm() / std::max(fd.norm(), 1e-8), 1e-4) << y0.transpose();
  }
}

TEST(UnrolledProjection, RejectsMismatchedShapes) {
  ad::Tape tape;
  const ad::Value y = tape.constant(Vector::Zero(3));
  EXPECT_THROW(unrolled_project_traced(tape, toys::circle_traced(), y, 0.3, 1), DimensionError);
  const ad::Value y2 = tape.constant(Vector::Zero(2));
  EXPECT_THROW(unrolled_project_traced(tape, toys::circle_traced(), y2, 0.0, 1), PreconditionError);
  EXPECT_THROW(unrolled_project_traced(tape, toys::circle_traced(), y2, 0.3, -1),
               PreconditionError);
}

TEST(TracedBounds, MatchesUntracedResidual) {
  const double inf = std::numeric_limits<double>::infinity();
  Vector lo(4), hi(4);
  lo << -1.0, -inf, 0.0, -inf;
  hi << 1.0, 2.0, inf, inf;
  const ConstraintSet cs =
      make_linear_constraints(Matrix(0, 4), Vector(0), Matrix::Identity(4, 4), lo, hi);
  Vector g(4);
  g << 3.0, 5.0, -2.0, 1e300;
  ad::Tape tape;
  const TracedBounds bounds(tape, lo, hi);
  EXPECT_EQ(tape.vector(bounds.residual(tape.constant(g))), residual(cs, g));
}
