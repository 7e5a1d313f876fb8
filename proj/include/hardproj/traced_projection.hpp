#pragma once

#include <functional>
#include <memory>

#include "hardproj/constraints.hpp"
#include "hardproj/tape.hpp"

namespace hardproj {

// Per-iterate closures of a TracedConstraints bound to one tape.
struct TracedProgram {
  std::function<ad::Value(const ad::Value& y)> residual;
  std::function<ad::Value(const ad::Value& y)> variable_jacobian;
};

/**
 * A constraint set expressed as a tape program.
 *
 * `bind` places the program's constant data on a tape once and returns the
 * closures evaluated at every iterate. The residual rows are ordered
 * [constant-Jacobian rows; variable-Jacobian rows]. The first block has the fixed Jacobian `constant_jacobian` (p x n);
 * the second block's Jacobian G(y) (s x n) is built on the tape by
 * `variable_jacobian`, so gradients flow through its dependence on y. The
 * damped step is invariant to row order, so this need not match the [h; g]
 * order of the corresponding ConstraintSet.
 */
struct TracedConstraints {
  Index dim = 0;
  Matrix constant_jacobian;  // p x dim, p may be zero
  Index num_variable_rows = 0;
  std::function<TracedProgram(ad::Tape&)> bind;
  // Optional: set when G(y) is linear in y, G(y) = scatter(y, *linear_jacobian).
  // Must agree with variable_jacobian; lets the projector fold its constant
  // factors into the pattern instead of multiplying dense matrices per step.
  std::shared_ptr<const ad::ScatterPattern> linear_jacobian;

  Index num_constant_rows() const { return constant_jacobian.rows(); }
};

// Affine constraints A_eq y = b_eq and lower <= A_in y <= upper as a tape program.
TracedConstraints make_linear_traced(const Matrix& A_eq, const Vector& b_eq, const Matrix& A_in,
                                     const Vector& lower, const Vector& upper);

// Inequality bounds placed on a tape; residual(g) = ReLU(g - upper) - ReLU(lower - g).
// Infinite bounds drop their term.
class TracedBounds {
 public:
  TracedBounds(ad::Tape& tape, const Vector& lower, const Vector& upper);

  ad::Value residual(const ad::Value& g) const;

 private:
  Index size_;
  ad::Value zero_;
  bool has_upper_ = false, all_upper_ = true, has_lower_ = false, all_lower_ = true;
  ad::Value upper_, upper_mask_, lower_, lower_mask_;
};

/**
 * Emits K damped steps y <- y - J^T (J J^T + eps I)^{-1} r(y) onto a tape.
 *
 * With J = [F; G(y)] and F constant, the step is computed by block elimination:
 *
 *   W = F^T (F F^T + eps I)^{-1},  M = I - W F          (precomputed)
 *   a = W r_F
 *   z = (G M G^T + eps I)^{-1} (r_G - G a)
 *   y <- y - a - (G M)^T z
 *
 * which equals the dense step exactly in real arithmetic.
 */
class UnrolledProjector {
 public:
  UnrolledProjector(const Matrix& constant_jacobian, Index dim, double epsilon);

  double epsilon() const { return epsilon_; }

  // K = 0 returns y0 unchanged.
  ad::Value run(ad::Tape& tape, const TracedConstraints& program, const ad::Value& y0,
                int num_iters) const;

 private:
  Index dim_;
  Index num_constant_rows_;
  double epsilon_;
  Matrix W_;  // dim x p
  Matrix M_;  // dim x dim, symmetric
};

// Convenience wrapper that builds an UnrolledProjector for one call.
ad::Value unrolled_project_traced(ad::Tape& tape, const TracedConstraints& program,
                                  const ad::Value& y0, double epsilon, int num_iters);

}  // namespace hardproj
