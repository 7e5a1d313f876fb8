#include "hardproj/traced_projection.hpp"

#include <fmt/format.h>

#include <Eigen/Cholesky>
#include <cmath>
#include <memory>
#include <vector>

#include "hardproj/errors.hpp"

namespace hardproj {

using ad::Tape;
using ad::Value;

namespace {

// Constant 0/1 diagonal selecting finite entries, and the bound with
// infinities replaced by zero.
struct MaskedBound {
  bool any = false;
  bool all = true;
  Vector finite_values;
  Matrix mask;
};

MaskedBound mask_bound(const Vector& bound) {
  MaskedBound out;
  out.finite_values = Vector::Zero(bound.size());
  out.mask = Matrix::Zero(bound.size(), bound.size());
  for (Index i = 0; i < bound.size(); ++i) {
    if (std::isfinite(bound[i])) {
      out.any = true;
      out.finite_values[i] = bound[i];
      out.mask(i, i) = 1.0;
    } else {
      out.all = false;
    }
  }
  return out;
}

// Pattern of y -> G(y) M given the pattern of y -> G(y).
std::shared_ptr<const ad::ScatterPattern> fold_right(const ad::ScatterPattern& g, const Matrix& M) {
  auto out = std::make_shared<ad::ScatterPattern>();
  out->rows = g.rows;
  out->cols = M.cols();
  out->source_size = g.source_size;
  // Accumulate one dense row of coefficients per (row, source) pair.
  std::vector<std::pair<Index, Index>> keys;
  std::vector<Vector> coefs;
  for (const auto& t : g.terms) {
    std::size_t slot = 0;
    while (slot < keys.size() && keys[slot] != std::make_pair(t.row, t.source)) ++slot;
    if (slot == keys.size()) {
      keys.emplace_back(t.row, t.source);
      coefs.push_back(Vector::Zero(M.cols()));
    }
    coefs[slot] += t.coef * M.row(t.col).transpose();
  }
  for (std::size_t slot = 0; slot < keys.size(); ++slot) {
    for (Index j = 0; j < M.cols(); ++j) {
      if (coefs[slot][j] != 0.0) {
        out->terms.push_back({keys[slot].first, j, keys[slot].second, coefs[slot][j]});
      }
    }
  }
  return out;
}

}  // namespace

TracedBounds::TracedBounds(Tape& tape, const Vector& lower, const Vector& upper)
    : size_(lower.size()) {
  if (lower.size() != upper.size()) throw DimensionError("bound vectors differ in length");
  const MaskedBound hi = mask_bound(upper);
  const MaskedBound lo = mask_bound(lower);
  zero_ = tape.constant(Vector::Zero(size_));
  has_upper_ = hi.any;
  all_upper_ = hi.all;
  has_lower_ = lo.any;
  all_lower_ = lo.all;
  if (has_upper_) {
    upper_ = tape.constant(hi.finite_values);
    if (!all_upper_) upper_mask_ = tape.constant(hi.mask);
  }
  if (has_lower_) {
    lower_ = tape.constant(lo.finite_values);
    if (!all_lower_) lower_mask_ = tape.constant(lo.mask);
  }
}

Value TracedBounds::residual(const Value& g) const {
  if (!g.is_vector() || g.rows() != size_) {
    throw DimensionError("traced inequality residual: bound lengths do not match g");
  }
  Value r = zero_;
  if (has_upper_) {
    Value above = relu(g - upper_);
    if (!all_upper_) above = matvec(upper_mask_, above);
    r = above;
  }
  if (has_lower_) {
    Value below = relu(lower_ - g);
    if (!all_lower_) below = matvec(lower_mask_, below);
    r = r - below;
  }
  return r;
}

UnrolledProjector::UnrolledProjector(const Matrix& constant_jacobian, Index dim, double epsilon)
    : dim_(dim), num_constant_rows_(constant_jacobian.rows()), epsilon_(epsilon) {
  if (!(epsilon > 0.0)) {
    throw PreconditionError(fmt::format("unrolled projection needs epsilon > 0, got {}", epsilon));
  }
  if (num_constant_rows_ > 0 && constant_jacobian.cols() != dim) {
    throw DimensionError("constant Jacobian has the wrong number of columns");
  }
  if (num_constant_rows_ == 0) return;
  const Matrix& F = constant_jacobian;
  Matrix A0 = F * F.transpose();
  A0.diagonal().array() += epsilon;
  Eigen::LLT<Matrix> llt(A0);
  W_ = llt.solve(F).transpose();
  M_ = Matrix::Identity(dim, dim) - W_ * F;
  M_ = (0.5 * (M_ + M_.transpose())).eval();
}

Value UnrolledProjector::run(Tape& tape, const TracedConstraints& program, const Value& y0,
                             int num_iters) const {
  if (num_iters < 0) throw PreconditionError("num_iters must be non-negative");
  if (program.dim != dim_ || program.num_constant_rows() != num_constant_rows_ ||
      y0.rows() != dim_ || !y0.is_vector()) {
    throw DimensionError("traced program does not match the projector's shape");
  }
  const Index p = num_constant_rows_;
  const Index s = program.num_variable_rows;
  if (p + s == 0) return y0;

  const auto& pattern = program.linear_jacobian;
  if (pattern && (pattern->rows != s || pattern->cols != dim_ || pattern->source_size != dim_)) {
    throw DimensionError("linear Jacobian pattern does not match the program");
  }
  std::shared_ptr<const ad::ScatterPattern> folded;
  if (pattern && p > 0) folded = fold_right(*pattern, M_);

  Value W;
  Value M;
  Value shift;
  if (p > 0) W = tape.constant(W_);
  if (p > 0 && s > 0 && !folded) M = tape.constant(M_);
  if (s > 0) shift = tape.constant(Matrix(epsilon_ * Matrix::Identity(s, s)));

  const TracedProgram bound = program.bind(tape);
  Value y = y0;
  for (int k = 0; k < num_iters; ++k) {
    const Value r = bound.residual(y);
    if (r.rows() != p + s) throw DimensionError("traced residual has the wrong length");

    Value a;
    if (p > 0) a = matvec(W, slice(r, 0, p));
    if (s == 0) {
      y = y - a;
      continue;
    }
    const Value G = pattern ? scatter(y, pattern) : bound.variable_jacobian(y);
    Value V = G;
    if (p > 0) V = folded ? scatter(y, folded) : matmul(G, M);
    const Value S = matmul(V, transpose(G)) + shift;
    Value rhs = slice(r, p, s);
    if (p > 0) rhs = rhs - matvec(G, a);
    const Value z = spd_solve(S, rhs);
    Value step = transpose_matvec(V, z);
    if (p > 0) step = a + step;
    y = y - step;
  }
  return y;
}

TracedConstraints make_linear_traced(const Matrix& A_eq, const Vector& b_eq, const Matrix& A_in,
                                     const Vector& lower, const Vector& upper) {
  if (A_eq.cols() != A_in.cols() || A_eq.rows() != b_eq.size() || A_in.rows() != lower.size() ||
      A_in.rows() != upper.size()) {
    throw DimensionError("linear traced constraints: inconsistent shapes");
  }
  const Index m = A_eq.rows();
  const Index q = A_in.rows();
  TracedConstraints out;
  out.dim = A_eq.cols();
  out.constant_jacobian.resize(m + q, out.dim);
  out.constant_jacobian << A_eq, A_in;
  out.num_variable_rows = 0;
  out.bind = [A_eq, b_eq, A_in, lower, upper, m, q](Tape& tape) {
    const Value E = tape.constant(A_eq);
    const Value b = tape.constant(b_eq);
    const Value I = tape.constant(A_in);
    const auto bounds = std::make_shared<TracedBounds>(tape, lower, upper);
    TracedProgram prog;
    prog.residual = [=](const Value& y) {
      if (q == 0) return matvec(E, y) - b;
      const Value rin = bounds->residual(matvec(I, y));
      if (m == 0) return rin;
      return ad::concat({matvec(E, y) - b, rin});
    };
    prog.variable_jacobian = [](const Value&) -> Value {
      throw PreconditionError("linear constraints have no variable Jacobian rows");
    };
    return prog;
  };
  return out;
}

Value unrolled_project_traced(Tape& tape, const TracedConstraints& program, const Value& y0,
                              double epsilon, int num_iters) {
  const UnrolledProjector projector(program.constant_jacobian, program.dim, epsilon);
  return projector.run(tape, program, y0, num_iters);
}

}  // namespace hardproj
