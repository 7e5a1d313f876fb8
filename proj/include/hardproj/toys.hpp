#pragma once

#include <cstdint>

#include "hardproj/constraints.hpp"
#include "hardproj/traced_projection.hpp"

// Small problems with known geometry, used by the CLI and the test suites.
namespace hardproj::toys {

// h(y) = |y|^2 - 1 in R^2.
ConstraintSet circle();
TracedConstraints circle_traced();
Vector circle_start();  // (2, 0)

// Unit-circle equality plus the linear inequality y_2 <= -0.5. From the start
// (1.5, -2) the inequality is satisfied and the horizontal line through the
// start misses the circle, so undamped steps can only slide sideways.
ConstraintSet two_constraint();
Vector two_constraint_start();

// h(y) = A y - b with prescribed singular values of A (m <= n, full row rank).
// V = 1/2 |Ay - b|^2 is then L-smooth and mu-PL with L = G^2 = sigma_max^2 and
// mu = sigma_min^2.
struct AffineToy {
  ConstraintSet constraints;
  Matrix A;
  Vector b;
  Vector y0;
  double mu = 0.0;
  double L = 0.0;
  double G = 0.0;
};

AffineToy affine(Index rows, Index cols, double sigma_min, double sigma_max, std::uint64_t seed);

}  // namespace hardproj::toys
