#include "hardproj/toys.hpp"

#include <Eigen/QR>
#include <limits>
#include <memory>
#include <random>

#include "hardproj/errors.hpp"

namespace hardproj::toys {

namespace {

Matrix random_orthogonal(Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Matrix M(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) M(i, j) = normal(rng);
  }
  Eigen::HouseholderQR<Matrix> qr(M);
  return qr.householderQ() * Matrix::Identity(n, n);
}

}  // namespace

ConstraintSet circle() {
  EqualityConstraints eq;
  eq.count = 1;
  eq.eval = [](const Vector& y) { return Vector::Constant(1, y.squaredNorm() - 1.0); };
  eq.jacobian = [](const Vector& y) -> Matrix { return 2.0 * y.transpose(); };
  return ConstraintSet(2, std::move(eq), {});
}

TracedConstraints circle_traced() {
  TracedConstraints out;
  out.dim = 2;
  out.constant_jacobian = Matrix(0, 2);
  out.num_variable_rows = 1;
  auto pattern = std::make_shared<ad::ScatterPattern>();
  pattern->rows = 1;
  pattern->cols = 2;
  pattern->source_size = 2;
  pattern->terms = {{0, 0, 0, 2.0}, {0, 1, 1, 2.0}};
  out.linear_jacobian = pattern;
  out.bind = [pattern](ad::Tape& tape) {
    const ad::Value one = tape.constant(Vector::Ones(1));
    TracedProgram prog;
    prog.residual = [one](const ad::Value& y) { return sum(square(y)) - one; };
    prog.variable_jacobian = [pattern](const ad::Value& y) { return scatter(y, pattern); };
    return prog;
  };
  return out;
}

Vector circle_start() { return (Vector(2) << 2.0, 0.0).finished(); }

ConstraintSet two_constraint() {
  EqualityConstraints eq;
  eq.count = 1;
  eq.eval = [](const Vector& y) { return Vector::Constant(1, y.squaredNorm() - 1.0); };
  eq.jacobian = [](const Vector& y) -> Matrix { return 2.0 * y.transpose(); };
  InequalityConstraints in;
  in.count = 1;
  in.eval = [](const Vector& y) { return Vector::Constant(1, y[1]); };
  in.jacobian = [](const Vector&) { return Matrix((Matrix(1, 2) << 0.0, 1.0).finished()); };
  in.lower = Vector::Constant(1, -std::numeric_limits<double>::infinity());
  in.upper = Vector::Constant(1, -0.5);
  return ConstraintSet(2, std::move(eq), std::move(in));
}

Vector two_constraint_start() { return (Vector(2) << 1.5, -2.0).finished(); }

AffineToy affine(Index rows, Index cols, double sigma_min, double sigma_max, std::uint64_t seed) {
  if (rows <= 0 || rows > cols) throw PreconditionError("affine toy needs 0 < rows <= cols");
  if (!(sigma_min > 0.0) || sigma_min > sigma_max) {
    throw PreconditionError("affine toy needs 0 < sigma_min <= sigma_max");
  }
  std::mt19937_64 rng(seed);
  const Matrix U = random_orthogonal(rows, rng);
  const Matrix Vt = random_orthogonal(cols, rng);
  Vector sigma(rows);
  sigma[0] = sigma_max;
  sigma[rows - 1] = sigma_min;
  std::uniform_real_distribution<double> unit(sigma_min, sigma_max);
  for (Index i = 1; i + 1 < rows; ++i) sigma[i] = unit(rng);

  Matrix A = U * sigma.asDiagonal() * Vt.topRows(rows);
  AffineToy toy{make_linear_constraints(A, Vector::Zero(rows), Matrix(0, cols), Vector(0),
                                        Vector(0)),
                A, Vector(rows), Vector(cols)};
  toy.A = U * sigma.asDiagonal() * Vt.topRows(rows);
  std::normal_distribution<double> normal;
  toy.b.resize(rows);
  toy.y0.resize(cols);
  for (Index i = 0; i < rows; ++i) toy.b[i] = normal(rng);
  for (Index i = 0; i < cols; ++i) toy.y0[i] = normal(rng);
  toy.constraints =
      make_linear_constraints(toy.A, toy.b, Matrix(0, cols), Vector(0), Vector(0));
  toy.mu = sigma_min * sigma_min;
  toy.L = sigma_max * sigma_max;
  toy.G = sigma_max;
  return toy;
}

}  // namespace hardproj::toys
