#include "hardproj/constraints.hpp"

#include <fmt/format.h>

#include <cmath>
#include <utility>

#include "hardproj/errors.hpp"

namespace hardproj {

namespace {

void require_finite(const Vector& v, Index offset, const char* what) {
  for (Index i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw EvaluationError(fmt::format("{} produced a non-finite value at constraint {}", what,
                                        offset + i),
                            static_cast<std::size_t>(offset + i));
    }
  }
}

void require_finite_rows(const Matrix& m, Index offset, const char* what) {
  for (Index i = 0; i < m.rows(); ++i) {
    if (!m.row(i).allFinite()) {
      throw EvaluationError(fmt::format("{} produced a non-finite entry in row {}", what, offset + i),
                            static_cast<std::size_t>(offset + i));
    }
  }
}

}  // namespace

ConstraintSet::ConstraintSet(Index dim, EqualityConstraints eq, InequalityConstraints ineq)
    : dim_(dim), eq_(std::move(eq)), ineq_(std::move(ineq)) {
  if (dim_ <= 0) {
    throw DimensionError("constraint set dimension must be positive");
  }
  if (eq_.count < 0 || ineq_.count < 0) {
    throw DimensionError("constraint counts must be non-negative");
  }
  if (eq_.count > 0 && (!eq_.eval || !eq_.jacobian)) {
    throw PreconditionError("equality block needs both eval and jacobian");
  }
  if (ineq_.count > 0 && (!ineq_.eval || !ineq_.jacobian)) {
    throw PreconditionError("inequality block needs both eval and jacobian");
  }
  if (ineq_.lower.size() != ineq_.count || ineq_.upper.size() != ineq_.count) {
    throw DimensionError(fmt::format("expected {} inequality bounds, got lower={} upper={}",
                                     ineq_.count, ineq_.lower.size(), ineq_.upper.size()));
  }
  for (Index j = 0; j < ineq_.count; ++j) {
    const double lo = ineq_.lower[j];
    const double hi = ineq_.upper[j];
    if (std::isnan(lo) || std::isnan(hi) || lo == INFINITY || hi == -INFINITY) {
      throw PreconditionError(fmt::format("invalid bounds on inequality {}", j));
    }
    // Equalities belong in h, so a degenerate interval is rejected as well.
    if (!(lo < hi)) {
      throw PreconditionError(
          fmt::format("inequality {} needs lower < upper, got [{}, {}]", j, lo, hi));
    }
  }
}

void ConstraintSet::check_input(const Vector& y) const {
  if (y.size() != dim_) {
    throw DimensionError(fmt::format("expected y of length {}, got {}", dim_, y.size()));
  }
}

Vector ConstraintSet::eval_h(const Vector& y) const {
  check_input(y);
  if (eq_.count == 0) return Vector(0);
  Vector h = eq_.eval(y);
  if (h.size() != eq_.count) {
    throw DimensionError(fmt::format("h returned {} values, expected {}", h.size(), eq_.count));
  }
  require_finite(h, 0, "h");
  return h;
}

Vector ConstraintSet::eval_g(const Vector& y) const {
  check_input(y);
  if (ineq_.count == 0) return Vector(0);
  Vector g = ineq_.eval(y);
  if (g.size() != ineq_.count) {
    throw DimensionError(fmt::format("g returned {} values, expected {}", g.size(), ineq_.count));
  }
  require_finite(g, eq_.count, "g");
  return g;
}

Matrix ConstraintSet::jac_h(const Vector& y) const {
  check_input(y);
  if (eq_.count == 0) return Matrix(0, dim_);
  Matrix J = eq_.jacobian(y);
  if (J.rows() != eq_.count || J.cols() != dim_) {
    throw DimensionError(fmt::format("jac_h is {}x{}, expected {}x{}", J.rows(), J.cols(),
                                     eq_.count, dim_));
  }
  require_finite_rows(J, 0, "jac_h");
  return J;
}

Matrix ConstraintSet::jac_g(const Vector& y) const {
  check_input(y);
  if (ineq_.count == 0) return Matrix(0, dim_);
  Matrix J = ineq_.jacobian(y);
  if (J.rows() != ineq_.count || J.cols() != dim_) {
    throw DimensionError(fmt::format("jac_g is {}x{}, expected {}x{}", J.rows(), J.cols(),
                                     ineq_.count, dim_));
  }
  require_finite_rows(J, eq_.count, "jac_g");
  return J;
}

ConstraintSet make_linear_constraints(const Matrix& A_eq, const Vector& b_eq, const Matrix& A_in,
                                      const Vector& lower, const Vector& upper) {
  const Index n = A_eq.rows() > 0 ? A_eq.cols() : A_in.cols();
  if (A_eq.rows() > 0 && A_in.rows() > 0 && A_eq.cols() != A_in.cols()) {
    throw DimensionError("A_eq and A_in disagree on the number of columns");
  }
  if (b_eq.size() != A_eq.rows()) {
    throw DimensionError("b_eq length must match rows of A_eq");
  }
  EqualityConstraints eq;
  eq.count = A_eq.rows();
  if (eq.count > 0) {
    eq.eval = [A_eq, b_eq](const Vector& y) -> Vector { return A_eq * y - b_eq; };
    eq.jacobian = [A_eq](const Vector&) -> Matrix { return A_eq; };
  }
  InequalityConstraints in;
  in.count = A_in.rows();
  in.lower = lower;
  in.upper = upper;
  if (in.count > 0) {
    in.eval = [A_in](const Vector& y) -> Vector { return A_in * y; };
    in.jacobian = [A_in](const Vector&) -> Matrix { return A_in; };
  }
  return ConstraintSet(n, std::move(eq), std::move(in));
}

Vector stack_constraints(const ConstraintSet& cs, const Vector& y) {
  Vector c(cs.num_rows());
  c << cs.eval_h(y), cs.eval_g(y);
  return c;
}

Vector residual(const ConstraintSet& cs, const Vector& y) {
  const Index m = cs.num_eq();
  Vector r(cs.num_rows());
  r.head(m) = cs.eval_h(y);
  const Vector g = cs.eval_g(y);
  for (Index j = 0; j < cs.num_ineq(); ++j) {
    // At most one branch is active since lower < upper; infinite bounds never
    // pass the comparison, so no inf arithmetic happens.
    if (g[j] > cs.upper()[j]) {
      r[m + j] = g[j] - cs.upper()[j];
    } else if (g[j] < cs.lower()[j]) {
      r[m + j] = -(cs.lower()[j] - g[j]);
    } else {
      r[m + j] = 0.0;
    }
  }
  return r;
}

double violation_energy(const ConstraintSet& cs, const Vector& y) {
  return 0.5 * residual(cs, y).squaredNorm();
}

Matrix constraint_jacobian(const ConstraintSet& cs, const Vector& y) {
  Matrix J(cs.num_rows(), cs.dim());
  J << cs.jac_h(y), cs.jac_g(y);
  return J;
}

Matrix residual_jacobian(const ConstraintSet& cs, const Vector& y) {
  Matrix J = constraint_jacobian(cs, y);
  const Vector g = cs.eval_g(y);
  for (Index j = 0; j < cs.num_ineq(); ++j) {
    const bool violated = g[j] > cs.upper()[j] || g[j] < cs.lower()[j];
    if (!violated) {
      J.row(cs.num_eq() + j).setZero();
    }
  }
  return J;
}

Vector energy_gradient(const ConstraintSet& cs, const Vector& y) {
  return constraint_jacobian(cs, y).transpose() * residual(cs, y);
}

double jacobian_fd_error(const ConstraintSet& cs, const Vector& y, double step) {
  const Matrix J = constraint_jacobian(cs, y);
  Matrix J_fd(J.rows(), J.cols());
  Vector yp = y;
  Vector ym = y;
  for (Index j = 0; j < cs.dim(); ++j) {
    yp[j] = y[j] + step;
    ym[j] = y[j] - step;
    J_fd.col(j) = (stack_constraints(cs, yp) - stack_constraints(cs, ym)) / (2.0 * step);
    yp[j] = y[j];
    ym[j] = y[j];
  }
  double worst = 0.0;
  for (Index i = 0; i < J.rows(); ++i) {
    for (Index j = 0; j < J.cols(); ++j) {
      const double scale = std::max(1.0, std::abs(J(i, j)));
      worst = std::max(worst, std::abs(J(i, j) - J_fd(i, j)) / scale);
    }
  }
  return worst;
}

}  // namespace hardproj
