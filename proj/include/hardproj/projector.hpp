#pragma once

#include <vector>

#include "hardproj/constraints.hpp"

namespace hardproj {

enum class Method { DampedHardNet, VanillaHardNet, LevenbergMarquardt };

const char* method_name(Method method);

struct ProjectionConfig {
  double epsilon = 0.3;
  int max_iters = 500;
  // Early stop once ||r(y_k)||_2 <= tol. Zero runs the full budget.
  double tol = 1e-9;
  Method method = Method::DampedHardNet;

  // Throws PreconditionError.
  void validate() const;
};

struct ProjectionTrace {
  std::vector<Vector> iterates;  // y_0 ... y_K
  std::vector<double> energies;  // V(y_k), same length as iterates
  bool converged = false;
  int iters_used = 0;
};

struct ProjectionResult {
  Vector y;
  ProjectionTrace trace;
};

// y - J^T (J J^T)^{-1} r. Throws RankDeficiencyError unless J_c(y) has full row rank.
Vector vanilla_step(const ConstraintSet& cs, const Vector& y);

// y - J^T (J J^T + eps I)^{-1} r, solved with a Cholesky factorization of the
// (m+q)x(m+q) shifted Gram matrix.
Vector damped_step(const ConstraintSet& cs, const Vector& y, double epsilon);

// y + delta with (J_r^T J_r + eps I) delta = -J_r^T r.
Vector lm_step(const ConstraintSet& cs, const Vector& y, double epsilon);

// Iterates the configured step from y0. Throws NumericalError on a non-finite
// iterate (with its index) and propagates RankDeficiencyError for the vanilla rule.
ProjectionResult project(const ConstraintSet& cs, const Vector& y0, const ProjectionConfig& cfg);

/**
 * Geometric envelope on the violation energy of the damped iteration:
 *
 *   c(eps)  = min{ 1/eps - L/(2 eps^2),  1/(eps+G^2) - L/(2 (eps+G^2)^2) }
 *   factor  = 1 - 2 mu c(eps)
 *
 * valid when V is L-smooth and mu-PL, c is G-Lipschitz, and eps > L/2.
 */
struct DecayBound {
  double mu = 0.0;
  double L = 0.0;
  double G = 0.0;
  double epsilon = 0.0;
  double c_eps = 0.0;
  double factor = 0.0;
};

// Throws PreconditionError unless mu, L, G > 0 and epsilon > L/2.
DecayBound decay_bound(double mu, double L, double G, double epsilon);

struct DecayReport {
  bool passed = false;
  bool monotone = false;
  // max_k V(y_{k+1}) / V(y_k) over steps with V(y_k) > 0.
  double worst_ratio = 0.0;
  // First k where the envelope was exceeded, or -1.
  int first_violation = -1;
  ProjectionTrace trace;
};

// Runs project and checks V(y_k) <= factor^k V(y_0) + 1e-12 for every recorded k.
DecayReport verify_decay(const ConstraintSet& cs, const Vector& y0, const ProjectionConfig& cfg,
                         const DecayBound& bound);

}  // namespace hardproj
