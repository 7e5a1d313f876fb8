#pragma once

#include <Eigen/Core>
#include <functional>

namespace hardproj {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

using VectorMap = std::function<Vector(const Vector&)>;
using JacobianMap = std::function<Matrix(const Vector&)>;

// Equality block h(y) = 0 with its analytic Jacobian.
struct EqualityConstraints {
  Index count = 0;
  VectorMap eval;
  JacobianMap jacobian;
};

// Inequality block lower <= g(y) <= upper. One-sided rows use IEEE infinities
// for the missing bound.
struct InequalityConstraints {
  Index count = 0;
  VectorMap eval;
  JacobianMap jacobian;
  Vector lower;
  Vector upper;
};

/**
 * Immutable bundle of equality and inequality constraints on y in R^n.
 *
 * Stacked order is always [h(y); g(y)]. Jacobians are supplied by the author of
 * the constraints and must match the derivative of the maps; see
 * `check_jacobians` for the finite-difference contract. Input-dependent
 * constraints are modelled by building a fresh set per input.
 */
class ConstraintSet {
 public:
  ConstraintSet(Index dim, EqualityConstraints eq, InequalityConstraints ineq);

  Index dim() const { return dim_; }
  Index num_eq() const { return eq_.count; }
  Index num_ineq() const { return ineq_.count; }
  Index num_rows() const { return eq_.count + ineq_.count; }

  const Vector& lower() const { return ineq_.lower; }
  const Vector& upper() const { return ineq_.upper; }

  // Checked evaluations; throw DimensionError / EvaluationError.
  Vector eval_h(const Vector& y) const;
  Vector eval_g(const Vector& y) const;
  Matrix jac_h(const Vector& y) const;
  Matrix jac_g(const Vector& y) const;

 private:
  void check_input(const Vector& y) const;

  Index dim_;
  EqualityConstraints eq_;
  InequalityConstraints ineq_;
};

// Affine constraints A_eq y = b_eq and lower <= A_in y <= upper.
ConstraintSet make_linear_constraints(const Matrix& A_eq, const Vector& b_eq, const Matrix& A_in,
                                      const Vector& lower, const Vector& upper);

// c(y) = [h(y); g(y)].
Vector stack_constraints(const ConstraintSet& cs, const Vector& y);

// r(y) = [h(y); ReLU(g(y) - upper) - ReLU(lower - g(y))].
Vector residual(const ConstraintSet& cs, const Vector& y);

// V(y) = 0.5 * ||r(y)||^2.
double violation_energy(const ConstraintSet& cs, const Vector& y);

// J_c(y) = [J_h(y); J_g(y)], every inequality row included.
Matrix constraint_jacobian(const ConstraintSet& cs, const Vector& y);

// J_r(y): inequality rows are zeroed wherever the row is satisfied, including
// exactly on a bound.
Matrix residual_jacobian(const ConstraintSet& cs, const Vector& y);

// grad V(y) = J_c(y)^T r(y).
Vector energy_gradient(const ConstraintSet& cs, const Vector& y);

// Largest relative discrepancy between the analytic Jacobian and central
// differences of c at y, measured per entry against max(1, |entry|).
double jacobian_fd_error(const ConstraintSet& cs, const Vector& y, double step = 1e-6);

}  // namespace hardproj
