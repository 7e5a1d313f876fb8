#include "hardproj/mpc.hpp"

#include <fmt/format.h>

#include <Eigen/Cholesky>
#include <Eigen/LU>
#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "hardproj/errors.hpp"

namespace hardproj::mpc {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Matrix json_matrix(const nlohmann::json& j) {
  const auto rows = j.get<std::vector<std::vector<double>>>();
  if (rows.empty()) return Matrix(0, 0);
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.front().size()) throw PreconditionError("ragged matrix in config");
    for (std::size_t c = 0; c < rows[i].size(); ++c) {
      m(static_cast<Index>(i), static_cast<Index>(c)) = rows[i][c];
    }
  }
  return m;
}

Vector json_vector(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

nlohmann::json matrix_json(const Matrix& m) {
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(m.rows()));
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index c = 0; c < m.cols(); ++c) rows[static_cast<std::size_t>(i)].push_back(m(i, c));
  }
  return rows;
}

// Infinite bounds are written as null.
double json_bound(const nlohmann::json& j) { return j.is_null() ? kInf : j.get<double>(); }
nlohmann::json bound_json(double b) { return std::isfinite(b) ? nlohmann::json(b) : nlohmann::json(); }

// Dynamics rows x_{k+1} - A x_k - B u_k as F y - b.
void dynamics_rows(const MpcInstance& inst, Matrix& F, Vector& b) {
  const Index n = inst.num_vars();
  F = Matrix::Zero(inst.horizon * inst.nx, n);
  b = Vector::Zero(inst.horizon * inst.nx);
  for (Index k = 0; k < inst.horizon; ++k) {
    const Index row = k * inst.nx;
    F.block(row, inst.state_offset(k + 1), inst.nx, inst.nx).setIdentity();
    if (k > 0) {
      F.block(row, inst.state_offset(k), inst.nx, inst.nx) = -inst.A;
    } else {
      b.segment(row, inst.nx) = inst.A * inst.x_in;
    }
    F.block(row, inst.control_offset(k), inst.nx, inst.nu) = -inst.B;
  }
}

Matrix box_rows(const MpcInstance& inst) {
  Matrix F = Matrix::Zero(inst.horizon * inst.nu, inst.num_vars());
  F.rightCols(inst.horizon * inst.nu).setIdentity();
  return F;
}

Vector target_vector(const MpcInstance& inst) {
  Vector t = Vector::Zero(inst.num_vars());
  for (Index k = 1; k <= inst.horizon; ++k) t.segment(inst.state_offset(k), inst.nx) = inst.x_target;
  return t;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Control-reduced form: stacked states X = phi x_in + gamma u.
struct Prediction {
  Matrix phi;    // N nx x nx
  Matrix gamma;  // N nx x N nu
};

Prediction prediction_matrices(const MpcInstance& inst) {
  const Index N = inst.horizon;
  Prediction p;
  p.phi = Matrix::Zero(N * inst.nx, inst.nx);
  p.gamma = Matrix::Zero(N * inst.nx, N * inst.nu);
  Matrix Ak = Matrix::Identity(inst.nx, inst.nx);
  for (Index k = 1; k <= N; ++k) {
    Ak = inst.A * Ak;
    p.phi.middleRows((k - 1) * inst.nx, inst.nx) = Ak;
  }
  // Block (k, j) = A^{k-1-j} B for j < k.
  for (Index j = 0; j < N; ++j) {
    Matrix blk = inst.B;
    for (Index k = j + 1; k <= N; ++k) {
      p.gamma.block((k - 1) * inst.nx, j * inst.nu, inst.nx, inst.nu) = blk;
      blk = inst.A * blk;
    }
  }
  return p;
}

Vector assemble_y(const MpcInstance& inst, const Prediction& pred, const Vector& u) {
  Vector y(inst.num_vars());
  y.head(inst.horizon * inst.nx) = pred.phi * inst.x_in + pred.gamma * u;
  y.tail(inst.horizon * inst.nu) = u;
  return y;
}

// Barrier subproblem data for the control-reduced QCQP.
class BarrierProblem {
 public:
  explicit BarrierProblem(const MpcInstance& inst)
      : inst_(inst), pred_(prediction_matrices(inst)) {
    const Index N = inst.horizon;
    nu_total_ = N * inst.nu;
    offset_ = pred_.phi * inst.x_in - target_vector(inst).head(N * inst.nx);
    hess_Z_ = 2.0 * (pred_.gamma.transpose() * pred_.gamma +
                     Matrix::Identity(nu_total_, nu_total_));
    has_box_ = std::isfinite(inst.u_bound);
    has_quad_ = std::isfinite(inst.x_bound);
    Qsym_ = inst.Q + inst.Q.transpose();
  }

  Index size() const { return nu_total_; }
  Index num_inequalities() const {
    return (has_box_ ? 2 * nu_total_ : 0) + (has_quad_ ? inst_.horizon : 0);
  }
  const Prediction& prediction() const { return pred_; }

  double objective(const Vector& u) const {
    return (offset_ + pred_.gamma * u).squaredNorm() + u.squaredNorm();
  }
  Vector objective_gradient(const Vector& u) const {
    return 2.0 * pred_.gamma.transpose() * (offset_ + pred_.gamma * u) + 2.0 * u;
  }

  // Values f_i(u) <= 0: [u - ub; -u - ub; x_k^T Q x_k - xb].
  Vector constraints(const Vector& u) const {
    Vector f(num_inequalities());
    Index i = 0;
    if (has_box_) {
      f.segment(i, nu_total_) = u.array() - inst_.u_bound;
      i += nu_total_;
      f.segment(i, nu_total_) = -u.array() - inst_.u_bound;
      i += nu_total_;
    }
    if (has_quad_) {
      const Vector X = pred_.phi * inst_.x_in + pred_.gamma * u;
      for (Index k = 0; k < inst_.horizon; ++k) {
        const auto x = X.segment(k * inst_.nx, inst_.nx);
        f[i++] = x.dot(inst_.Q * x) - inst_.x_bound;
      }
    }
    return f;
  }

  // Gradients of f_i as columns.
  Matrix constraint_gradients(const Vector& u) const {
    Matrix D = Matrix::Zero(nu_total_, num_inequalities());
    Index i = 0;
    if (has_box_) {
      D.block(0, i, nu_total_, nu_total_).setIdentity();
      i += nu_total_;
      D.block(0, i, nu_total_, nu_total_) = -Matrix::Identity(nu_total_, nu_total_);
      i += nu_total_;
    }
    if (has_quad_) {
      const Vector X = pred_.phi * inst_.x_in + pred_.gamma * u;
      for (Index k = 0; k < inst_.horizon; ++k) {
        const auto Gk = pred_.gamma.middleRows(k * inst_.nx, inst_.nx);
        D.col(i++) = Gk.transpose() * (Qsym_ * X.segment(k * inst_.nx, inst_.nx));
      }
    }
    return D;
  }

  double barrier(const Vector& u, double t) const {
    const Vector f = constraints(u);
    if ((f.array() >= 0.0).any()) return kInf;
    return t * objective(u) - (-f.array()).log().sum();
  }

  void barrier_derivatives(const Vector& u, double t, Vector& grad, Matrix& hess) const {
    const Vector f = constraints(u);
    const Matrix D = constraint_gradients(u);
    grad = t * objective_gradient(u);
    hess = t * hess_Z_;
    for (Index i = 0; i < f.size(); ++i) {
      const double inv = -1.0 / f[i];
      grad += inv * D.col(i);
      hess.noalias() += (inv * inv) * D.col(i) * D.col(i).transpose();
    }
    if (has_quad_) {
      const Index first = has_box_ ? 2 * nu_total_ : 0;
      for (Index k = 0; k < inst_.horizon; ++k) {
        const auto Gk = pred_.gamma.middleRows(k * inst_.nx, inst_.nx);
        const double inv = -1.0 / f[first + k];
        hess.noalias() += inv * (Gk.transpose() * Qsym_ * Gk);
      }
    }
  }

  // sum_i w_i * Hessian(f_i); box rows are linear.
  Matrix weighted_constraint_hessian(const Vector& w) const {
    Matrix H = Matrix::Zero(nu_total_, nu_total_);
    if (!has_quad_) return H;
    const Index first = has_box_ ? 2 * nu_total_ : 0;
    for (Index k = 0; k < inst_.horizon; ++k) {
      if (w[first + k] == 0.0) continue;
      const auto Gk = pred_.gamma.middleRows(k * inst_.nx, inst_.nx);
      H.noalias() += w[first + k] * (Gk.transpose() * Qsym_ * Gk);
    }
    return H;
  }

  const Matrix& objective_hessian() const { return hess_Z_; }

  // max of stationarity, primal and dual infeasibility and complementarity.
  double kkt_residual(const Vector& u, const Vector& lambda) const {
    const Vector f = constraints(u);
    double kkt = (objective_gradient(u) + constraint_gradients(u) * lambda).cwiseAbs().maxCoeff();
    for (Index i = 0; i < f.size(); ++i) {
      kkt = std::max({kkt, f[i], -lambda[i], std::abs(lambda[i] * f[i])});
    }
    return kkt;
  }

  bool strictly_feasible(const Vector& u) const {
    return (constraints(u).array() < 0.0).all();
  }

 private:
  const MpcInstance& inst_;
  Prediction pred_;
  Index nu_total_ = 0;
  Vector offset_;
  Matrix hess_Z_;
  Matrix Qsym_;
  bool has_box_ = false;
  bool has_quad_ = false;
};

struct KktPoint {
  Vector u;
  Vector lambda;
  double residual = kInf;
};

// Newton on the KKT system of the constraints the barrier solution treats as
// active (multiplier above slack), the others dropped. Near an active bound the
// barrier gradient is dominated by cancellation in f_i, which caps its accuracy
// at large t; this recovers the vertex to working precision.
KktPoint polish(const BarrierProblem& problem, const Vector& u0, const Vector& lambda0) {
  const Vector f0 = problem.constraints(u0);
  std::vector<Index> active;
  for (Index i = 0; i < f0.size(); ++i) {
    if (lambda0[i] > -f0[i]) active.push_back(i);
  }
  const Index n = problem.size();
  const Index a = static_cast<Index>(active.size());
  KktPoint best{u0, lambda0, problem.kkt_residual(u0, lambda0)};
  if (a > n) return best;

  Vector u = u0;
  Vector lambda = Vector::Zero(f0.size());
  for (Index j = 0; j < a; ++j) lambda[active[j]] = lambda0[active[j]];
  for (int it = 0; it < 20; ++it) {
    const Vector f = problem.constraints(u);
    const Matrix D = problem.constraint_gradients(u);
    Matrix K = Matrix::Zero(n + a, n + a);
    Vector rhs(n + a);
    K.topLeftCorner(n, n) = problem.objective_hessian() + problem.weighted_constraint_hessian(lambda);
    rhs.head(n) = -(problem.objective_gradient(u) + D * lambda);
    for (Index j = 0; j < a; ++j) {
      K.block(0, n + j, n, 1) = D.col(active[j]);
      K.block(n + j, 0, 1, n) = D.col(active[j]).transpose();
      rhs[n + j] = -f[active[j]];
    }
    const Vector delta = K.fullPivLu().solve(rhs);
    if (!delta.allFinite()) break;
    u += delta.head(n);
    for (Index j = 0; j < a; ++j) lambda[active[j]] += delta[n + j];
    const double r = problem.kkt_residual(u, lambda);
    if (!(r < best.residual)) break;
    best = KktPoint{u, lambda, r};
  }
  return best;
}

// u = 0 unless it sits on the state boundary; then move every control along
// -B^T Q x_in, which lowers x_k^T Q x_k for small steps.
Vector strictly_feasible_start(const MpcInstance& inst, const BarrierProblem& problem) {
  Vector u = Vector::Zero(problem.size());
  if (problem.strictly_feasible(u)) return u;
  const Vector d = -(inst.B.transpose() * (inst.Q * inst.x_in));
  const double dmax = d.cwiseAbs().maxCoeff();
  if (dmax > 0.0) {
    double tau = (std::isfinite(inst.u_bound) ? 0.9 * inst.u_bound : 1.0) / dmax;
    for (int attempt = 0; attempt < 60; ++attempt, tau *= 0.5) {
      for (Index k = 0; k < inst.horizon; ++k) u.segment(k * inst.nu, inst.nu) = tau * d;
      if (problem.strictly_feasible(u)) return u;
    }
  }
  throw SolverError("oracle: could not find a strictly feasible starting point");
}

}  // namespace

MpcInstance MpcInstance::standard() {
  MpcInstance inst;
  inst.A = Matrix::Identity(5, 5);
  inst.B = Matrix::Zero(5, 4);
  inst.B.topRows(4).setIdentity();
  inst.B(4, 3) = 1.0;
  inst.Q = Matrix::Zero(5, 5);
  inst.Q(0, 0) = 0.05;
  inst.Q(0, 1) = 0.025;
  inst.Q(1, 0) = 0.025;
  inst.Q(1, 1) = 0.1;
  inst.Q.bottomRightCorner(3, 3) = 0.1 * Matrix::Identity(3, 3);
  inst.x_target = (Vector(5) << 3.0, 12.0, 10.0, 10.0, 10.0).finished();
  inst.x_in = Vector::Zero(5);
  return inst;
}

void MpcInstance::validate() const {
  if (nx <= 0 || nu <= 0 || horizon <= 0) throw PreconditionError("MPC dimensions must be positive");
  if (A.rows() != nx || A.cols() != nx) throw PreconditionError("A must be nx x nx");
  if (B.rows() != nx || B.cols() != nu) throw PreconditionError("B must be nx x nu");
  if (Q.rows() != nx || Q.cols() != nx) throw PreconditionError("Q must be nx x nx");
  if (x_target.size() != nx || x_in.size() != nx) {
    throw PreconditionError("x_target and x_in must have length nx");
  }
  if (!Q.isApprox(Q.transpose(), 0.0)) throw PreconditionError("Q must be symmetric");
  if (Eigen::LLT<Matrix>(Q).info() != Eigen::Success) {
    throw PreconditionError("Q must be positive definite");
  }
  if (!(u_bound > 0.0) || !(x_bound > 0.0)) throw PreconditionError("bounds must be positive");
}

MpcInstance MpcInstance::with_initial_state(const Vector& x) const {
  MpcInstance copy = *this;
  copy.x_in = x;
  return copy;
}

Trajectory Trajectory::unflatten(const MpcInstance& inst, const Vector& y) {
  if (y.size() != inst.num_vars()) {
    throw DimensionError(fmt::format("trajectory needs {} values, got {}", inst.num_vars(), y.size()));
  }
  Trajectory t;
  t.states = Eigen::Map<const Matrix>(y.data(), inst.nx, inst.horizon);
  t.controls = Eigen::Map<const Matrix>(y.data() + inst.horizon * inst.nx, inst.nu, inst.horizon);
  return t;
}

Vector Trajectory::flatten() const {
  Vector y(states.size() + controls.size());
  y.head(states.size()) = Eigen::Map<const Vector>(states.data(), states.size());
  y.tail(controls.size()) = Eigen::Map<const Vector>(controls.data(), controls.size());
  return y;
}

ConstraintGroups constraint_groups(const MpcInstance& inst) {
  ConstraintGroups g;
  g.dynamics_begin = 0;
  g.dynamics_count = inst.horizon * inst.nx;
  g.box_begin = g.dynamics_count;
  g.box_count = inst.horizon * inst.nu;
  g.quad_begin = g.box_begin + g.box_count;
  g.quad_count = inst.horizon;
  return g;
}

ConstraintSet build_constraints(const MpcInstance& inst) {
  inst.validate();
  Matrix F;
  Vector b;
  dynamics_rows(inst, F, b);

  EqualityConstraints eq;
  eq.count = F.rows();
  eq.eval = [F, b](const Vector& y) -> Vector { return F * y - b; };
  eq.jacobian = [F](const Vector&) -> Matrix { return F; };

  const Index N = inst.horizon;
  const Index nbox = N * inst.nu;
  const Matrix Fbox = box_rows(inst);
  InequalityConstraints in;
  in.count = nbox + N;
  in.lower.resize(in.count);
  in.upper.resize(in.count);
  in.lower.head(nbox).setConstant(-inst.u_bound);
  in.upper.head(nbox).setConstant(inst.u_bound);
  in.lower.tail(N).setConstant(-kInf);
  in.upper.tail(N).setConstant(inst.x_bound);
  in.eval = [inst, nbox](const Vector& y) -> Vector {
    Vector g(nbox + inst.horizon);
    g.head(nbox) = y.tail(nbox);
    for (Index k = 1; k <= inst.horizon; ++k) {
      const auto x = y.segment(inst.state_offset(k), inst.nx);
      g[nbox + k - 1] = x.dot(inst.Q * x);
    }
    return g;
  };
  in.jacobian = [inst, nbox, Fbox](const Vector& y) -> Matrix {
    Matrix J = Matrix::Zero(nbox + inst.horizon, inst.num_vars());
    J.topRows(nbox) = Fbox;
    const Matrix Qsym = inst.Q + inst.Q.transpose();
    for (Index k = 1; k <= inst.horizon; ++k) {
      const auto x = y.segment(inst.state_offset(k), inst.nx);
      J.block(nbox + k - 1, inst.state_offset(k), 1, inst.nx) = (Qsym * x).transpose();
    }
    return J;
  };
  return ConstraintSet(inst.num_vars(), std::move(eq), std::move(in));
}

TracedConstraints traced_constraints(const MpcInstance& inst) {
  inst.validate();
  const Index N = inst.horizon;
  const Index nx = inst.nx;
  const Index nbox = N * inst.nu;
  const Index n = inst.num_vars();

  Matrix Fdyn;
  Vector bdyn;
  dynamics_rows(inst, Fdyn, bdyn);
  const Matrix Fbox = box_rows(inst);

  TracedConstraints out;
  out.dim = n;
  out.constant_jacobian.resize(Fdyn.rows() + Fbox.rows(), n);
  out.constant_jacobian << Fdyn, Fbox;
  out.num_variable_rows = N;

  // x^T Q x = |L^T x|^2 with Q = L L^T, summed blockwise.
  const Matrix Lt = Eigen::LLT<Matrix>(inst.Q).matrixU();
  Matrix root = Matrix::Zero(N * nx, N * nx);
  Matrix block_sum = Matrix::Zero(N, N * nx);
  for (Index k = 0; k < N; ++k) {
    root.block(k * nx, k * nx, nx, nx) = Lt;
    block_sum.block(k, k * nx, 1, nx).setOnes();
  }

  // Row k-1 of G(y) is (Q + Q^T) x_k in the x_k columns.
  auto pattern = std::make_shared<ad::ScatterPattern>();
  pattern->rows = N;
  pattern->cols = n;
  pattern->source_size = n;
  const Matrix Qsym = inst.Q + inst.Q.transpose();
  for (Index k = 1; k <= N; ++k) {
    const Index off = inst.state_offset(k);
    for (Index j = 0; j < nx; ++j) {
      for (Index l = 0; l < nx; ++l) {
        if (Qsym(j, l) != 0.0) pattern->terms.push_back({k - 1, off + j, off + l, Qsym(j, l)});
      }
    }
  }

  Vector box_lower = Vector::Constant(nbox, -inst.u_bound);
  Vector box_upper = Vector::Constant(nbox, inst.u_bound);
  Vector quad_lower = Vector::Constant(N, -kInf);
  Vector quad_upper = Vector::Constant(N, inst.x_bound);

  out.linear_jacobian = pattern;
  out.bind = [=](ad::Tape& tape) -> TracedProgram {
    const ad::Value F = tape.constant(Fdyn);
    const ad::Value b = tape.constant(bdyn);
    const ad::Value R = tape.constant(root);
    const ad::Value S = tape.constant(block_sum);
    const auto box = std::make_shared<TracedBounds>(tape, box_lower, box_upper);
    const auto quad = std::make_shared<TracedBounds>(tape, quad_lower, quad_upper);
    TracedProgram prog;
    prog.residual = [=](const ad::Value& y) {
      const ad::Value dyn = matvec(F, y) - b;
      const ad::Value rbox = box->residual(slice(y, N * nx, nbox));
      const ad::Value g = matvec(S, square(matvec(R, slice(y, 0, N * nx))));
      return ad::concat({dyn, rbox, quad->residual(g)});
    };
    prog.variable_jacobian = [=](const ad::Value& y) { return scatter(y, pattern); };
    return prog;
  };
  return out;
}

double objective(const MpcInstance& inst, const Vector& y) {
  if (y.size() != inst.num_vars()) throw DimensionError("objective: wrong trajectory length");
  return (y - target_vector(inst)).squaredNorm();
}

double objective(const MpcInstance& inst, const Trajectory& traj) {
  double z = 0.0;
  for (Index k = 0; k < inst.horizon; ++k) {
    z += (traj.states.col(k) - inst.x_target).squaredNorm();
    z += traj.controls.col(k).squaredNorm();
  }
  return z;
}

ad::Value traced_objective(ad::Tape& tape, const MpcInstance& inst, const ad::Value& y) {
  return sum(square(y - tape.constant(target_vector(inst))));
}

bool is_feasible_initial(const MpcInstance& inst, const Vector& x) {
  return x.dot(inst.Q * x) <= inst.x_bound;
}

Vector sample_feasible_initial(const MpcInstance& inst, std::mt19937_64& rng, double box,
                               int max_tries) {
  std::uniform_real_distribution<double> dist(-box, box);
  Vector x(inst.nx);
  for (int attempt = 0; attempt < max_tries; ++attempt) {
    for (Index i = 0; i < inst.nx; ++i) x[i] = dist(rng);
    if (is_feasible_initial(inst, x)) return x;
  }
  throw SolverError(fmt::format("no feasible initial state after {} draws", max_tries));
}

OracleSolution oracle_solve(const MpcInstance& inst, const OracleOptions& options) {
  inst.validate();
  const BarrierProblem problem(inst);
  Vector u = strictly_feasible_start(inst, problem);
  const Index m = problem.num_inequalities();

  OracleSolution sol;
  double t = m > 0 ? options.t0 : 1.0;
  Vector grad;
  Matrix hess;
  for (;;) {
    // Centering by damped Newton with a feasibility-preserving backtracking search.
    double previous_decrement2 = kInf;
    for (int inner = 0;; ++inner) {
      if (sol.newton_steps >= options.max_newton) {
        throw SolverError(fmt::format("oracle: Newton budget exhausted at t={:.3e}", t));
      }
      problem.barrier_derivatives(u, t, grad, hess);
      Eigen::LLT<Matrix> llt(hess);
      if (llt.info() != Eigen::Success) throw SolverError("oracle: barrier Hessian not SPD");
      const Vector step = -llt.solve(grad);
      const double decrement2 = -grad.dot(step);
      if (!std::isfinite(decrement2)) throw SolverError("oracle: non-finite Newton decrement");
      if (0.5 * decrement2 <= options.newton_tol) break;

      // Inside the quadratic-convergence region of the self-concordant barrier
      // (decrement < 1/4) take full steps; once the decrement stops shrinking
      // the remaining error is rounding and the Armijo test is meaningless.
      if (decrement2 < 0.0625) {
        if (decrement2 >= previous_decrement2) break;
        previous_decrement2 = decrement2;
        const Vector trial = u + step;
        if (problem.strictly_feasible(trial)) {
          u = trial;
          ++sol.newton_steps;
          continue;
        }
      }

      const double phi = problem.barrier(u, t);
      double alpha = 1.0;
      bool accepted = false;
      for (int ls = 0; ls < 80; ++ls, alpha *= 0.5) {
        const Vector trial = u + alpha * step;
        const double phi_trial = problem.barrier(trial, t);
        if (phi_trial <= phi - 0.25 * alpha * decrement2) {
          u = trial;
          accepted = true;
          break;
        }
      }
      ++sol.newton_steps;
      // No further decrease is representable at this t.
      if (!accepted) break;
    }
    if (m == 0 || static_cast<double>(m) / t <= options.gap_tol) break;
    t *= options.t_factor;
  }

  Vector lambda(m);
  if (m > 0) lambda = (t * -problem.constraints(u).array()).inverse().matrix();
  const KktPoint point = polish(problem, u, lambda);
  u = point.u;
  lambda = point.lambda;
  const double kkt = point.residual;

  sol.y = assemble_y(inst, problem.prediction(), u);
  sol.trajectory = Trajectory::unflatten(inst, sol.y);
  sol.objective = objective(inst, sol.y);
  sol.kkt_residual = kkt;
  sol.multipliers.assign(lambda.data(), lambda.data() + lambda.size());
  return sol;
}

Vector unconstrained_solution(const MpcInstance& inst) {
  inst.validate();
  const Prediction pred = prediction_matrices(inst);
  const Index N = inst.horizon;
  const Index nu_total = N * inst.nu;
  // min |gamma u - (T - phi x_in)|^2 + |u|^2 as one stacked least-squares problem.
  Matrix lhs(N * inst.nx + nu_total, nu_total);
  lhs << pred.gamma, Matrix::Identity(nu_total, nu_total);
  Vector rhs = Vector::Zero(lhs.rows());
  rhs.head(N * inst.nx) = target_vector(inst).head(N * inst.nx) - pred.phi * inst.x_in;
  const Vector u = lhs.colPivHouseholderQr().solve(rhs);
  return assemble_y(inst, pred, u);
}

std::optional<double> suboptimality(double z_model, double z_star) {
  if (!(z_star > 0.0)) return std::nullopt;
  return std::max(0.0, z_model - z_star) / z_star;
}

Violations group_violations(const MpcInstance& inst, const Vector& y) {
  const Vector r = residual(build_constraints(inst), y);
  const ConstraintGroups g = constraint_groups(inst);
  Violations v;
  v.dynamics = r.segment(g.dynamics_begin, g.dynamics_count).cwiseAbs().maxCoeff();
  v.box = r.segment(g.box_begin, g.box_count).cwiseAbs().maxCoeff();
  v.quadratic = r.segment(g.quad_begin, g.quad_count).cwiseAbs().maxCoeff();
  return v;
}

nlohmann::json EvalReport::to_json() const {
  const auto stat = [](const Stat& s) {
    return nlohmann::json{{"average", s.average}, {"maximum", s.maximum}};
  };
  return nlohmann::json{{"samples", samples},
                        {"excluded", excluded},
                        {"suboptimality", stat(suboptimality)},
                        {"dynamics_violation", stat(dynamics)},
                        {"box_violation", stat(box)},
                        {"quadratic_violation", stat(quadratic)}};
}

std::uint64_t sample_seed(std::uint64_t seed, int index) {
  return splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(index) + 1));
}

EvalReport evaluate(const Model& model, const MpcInstance& base, const EvalOptions& options) {
  if (options.n_test <= 0) throw PreconditionError("n_test must be positive");
  if (!options.oracle_as_model && !model) throw PreconditionError("evaluate needs a model");
  EvalReport report;
  double subopt_sum = 0.0;
  int subopt_count = 0;
  for (int i = 0; i < options.n_test; ++i) {
    SampleResult s;
    s.index = i;
    s.seed = sample_seed(options.seed, i);
    std::mt19937_64 rng(s.seed);
    s.x_in = sample_feasible_initial(base, rng, options.sample_box);
    const MpcInstance inst = base.with_initial_state(s.x_in);

    try {
      const OracleSolution oracle = oracle_solve(inst);
      s.oracle_y = oracle.y;
      s.oracle_objective = oracle.objective;
      s.oracle_kkt = oracle.kkt_residual;
    } catch (const SolverError&) {
      s.oracle_failed = true;
    }

    Vector raw;
    if (options.oracle_as_model) {
      if (s.oracle_failed) {
        ++report.excluded;
        report.per_sample.push_back(std::move(s));
        continue;
      }
      raw = s.oracle_y;
    } else {
      raw = model(s.x_in);
    }
    const ProjectionResult projected = project(build_constraints(inst), raw, options.projection);
    s.model_y = projected.y;
    s.projection_converged = projected.trace.converged;
    s.projection_iters = projected.trace.iters_used;
    s.model_objective = objective(inst, s.model_y);
    s.violations = group_violations(inst, s.model_y);
    if (!s.oracle_failed) s.suboptimality = suboptimality(s.model_objective, s.oracle_objective);

    if (s.suboptimality) {
      subopt_sum += *s.suboptimality;
      ++subopt_count;
      report.suboptimality.maximum = std::max(report.suboptimality.maximum, *s.suboptimality);
    } else {
      ++report.excluded;
    }
    report.dynamics.average += s.violations.dynamics;
    report.box.average += s.violations.box;
    report.quadratic.average += s.violations.quadratic;
    report.dynamics.maximum = std::max(report.dynamics.maximum, s.violations.dynamics);
    report.box.maximum = std::max(report.box.maximum, s.violations.box);
    report.quadratic.maximum = std::max(report.quadratic.maximum, s.violations.quadratic);
    ++report.samples;
    report.per_sample.push_back(std::move(s));
  }
  if (subopt_count > 0) report.suboptimality.average = subopt_sum / subopt_count;
  if (report.samples > 0) {
    report.dynamics.average /= report.samples;
    report.box.average /= report.samples;
    report.quadratic.average /= report.samples;
  }
  return report;
}

LossProgram make_training_loss(const MpcInstance& base, double epsilon, int num_iters) {
  base.validate();
  const TracedConstraints shape = traced_constraints(base);
  // The constant rows depend only on A and B, so one projector serves every x_in.
  auto projector = std::make_shared<const UnrolledProjector>(shape.constant_jacobian, shape.dim,
                                                             epsilon);
  return [base, projector, num_iters](ad::Tape& tape, const ad::Value& output,
                                      const Vector& x_in) {
    const MpcInstance inst = base.with_initial_state(x_in);
    const ad::Value projected = projector->run(tape, traced_constraints(inst), output, num_iters);
    return traced_objective(tape, inst, projected);
  };
}

MpcInstance instance_from_json(const nlohmann::json& j) {
  MpcInstance inst = MpcInstance::standard();
  if (j.contains("nx")) inst.nx = j.at("nx").get<Index>();
  if (j.contains("nu")) inst.nu = j.at("nu").get<Index>();
  if (j.contains("horizon")) inst.horizon = j.at("horizon").get<Index>();
  if (j.contains("A")) inst.A = json_matrix(j.at("A"));
  if (j.contains("B")) inst.B = json_matrix(j.at("B"));
  if (j.contains("Q")) inst.Q = json_matrix(j.at("Q"));
  if (j.contains("u_bound")) inst.u_bound = json_bound(j.at("u_bound"));
  if (j.contains("x_bound")) inst.x_bound = json_bound(j.at("x_bound"));
  if (j.contains("x_target")) inst.x_target = json_vector(j.at("x_target"));
  if (j.contains("x_in")) inst.x_in = json_vector(j.at("x_in"));
  inst.validate();
  return inst;
}

nlohmann::json instance_to_json(const MpcInstance& inst) {
  return nlohmann::json{{"nx", inst.nx},
                        {"nu", inst.nu},
                        {"horizon", inst.horizon},
                        {"A", matrix_json(inst.A)},
                        {"B", matrix_json(inst.B)},
                        {"Q", matrix_json(inst.Q)},
                        {"u_bound", bound_json(inst.u_bound)},
                        {"x_bound", bound_json(inst.x_bound)},
                        {"x_target", std::vector<double>(inst.x_target.data(),
                                                         inst.x_target.data() + inst.x_target.size())},
                        {"x_in", std::vector<double>(inst.x_in.data(),
                                                     inst.x_in.data() + inst.x_in.size())}};
}

}  // namespace hardproj::mpc
