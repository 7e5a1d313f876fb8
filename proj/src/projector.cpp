#include "hardproj/projector.hpp"

#include <fmt/format.h>

#include <Eigen/Cholesky>
#include <Eigen/QR>
#include <algorithm>
#include <cmath>

#include "hardproj/errors.hpp"

namespace hardproj {

namespace {

constexpr double kEnvelopeSlack = 1e-12;

// Relative pivot threshold below which J is treated as rank deficient.
constexpr double kRankTolerance = 1e-12;

}  // namespace

const char* method_name(Method method) {
  switch (method) {
    case Method::DampedHardNet:
      return "damped";
    case Method::VanillaHardNet:
      return "vanilla";
    case Method::LevenbergMarquardt:
      return "levenberg-marquardt";
  }
  return "unknown";
}

void ProjectionConfig::validate() const {
  if (max_iters <= 0) {
    throw PreconditionError("max_iters must be positive");
  }
  if (!(tol >= 0.0)) {
    throw PreconditionError("tol must be non-negative");
  }
  if (method == Method::VanillaHardNet) {
    if (!(epsilon >= 0.0)) throw PreconditionError("epsilon must be non-negative");
  } else if (!(epsilon > 0.0)) {
    throw PreconditionError(
        fmt::format("{} needs epsilon > 0, got {}", method_name(method), epsilon));
  }
}

Vector vanilla_step(const ConstraintSet& cs, const Vector& y) {
  const Vector r = residual(cs, y);
  if (r.size() == 0) return y;
  const Matrix J = constraint_jacobian(cs, y);
  if (J.rows() > J.cols()) {
    throw RankDeficiencyError(fmt::format(
        "vanilla step needs full row rank, but J has {} rows and {} columns", J.rows(), J.cols()));
  }
  Eigen::ColPivHouseholderQR<Matrix> qr(J.transpose());
  qr.setThreshold(kRankTolerance);
  if (qr.rank() < J.rows()) {
    throw RankDeficiencyError(
        fmt::format("vanilla step needs full row rank, J has rank {} < {}", qr.rank(), J.rows()));
  }
  const Matrix H = J * J.transpose();
  Eigen::LLT<Matrix> llt(H);
  if (llt.info() != Eigen::Success) {
    throw RankDeficiencyError("Gram matrix J J^T is not positive definite");
  }
  return y - J.transpose() * llt.solve(r);
}

Vector damped_step(const ConstraintSet& cs, const Vector& y, double epsilon) {
  if (!(epsilon > 0.0)) {
    throw PreconditionError(fmt::format("damped step needs epsilon > 0, got {}", epsilon));
  }
  const Vector r = residual(cs, y);
  if (r.size() == 0) return y;
  const Matrix J = constraint_jacobian(cs, y);
  Matrix H = J * J.transpose();
  H.diagonal().array() += epsilon;
  Eigen::LLT<Matrix> llt(H);
  if (llt.info() != Eigen::Success) {
    // Only reachable through non-finite data.
    throw NumericalError("shifted Gram matrix failed to factor", 0);
  }
  return y - J.transpose() * llt.solve(r);
}

Vector lm_step(const ConstraintSet& cs, const Vector& y, double epsilon) {
  if (!(epsilon > 0.0)) {
    throw PreconditionError(fmt::format("LM step needs epsilon > 0, got {}", epsilon));
  }
  const Vector r = residual(cs, y);
  if (r.size() == 0) return y;
  const Matrix Jr = residual_jacobian(cs, y);
  Matrix N = Jr.transpose() * Jr;
  N.diagonal().array() += epsilon;
  Eigen::LLT<Matrix> llt(N);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("shifted normal matrix failed to factor", 0);
  }
  return y - llt.solve(Jr.transpose() * r);
}

ProjectionResult project(const ConstraintSet& cs, const Vector& y0, const ProjectionConfig& cfg) {
  cfg.validate();
  if (y0.size() != cs.dim()) {
    throw DimensionError(fmt::format("expected y0 of length {}, got {}", cs.dim(), y0.size()));
  }
  ProjectionResult out;
  out.y = y0;
  auto& trace = out.trace;
  trace.iterates.reserve(static_cast<std::size_t>(cfg.max_iters) + 1);
  trace.energies.reserve(static_cast<std::size_t>(cfg.max_iters) + 1);

  for (int k = 0;; ++k) {
    const Vector r = residual(cs, out.y);
    trace.iterates.push_back(out.y);
    trace.energies.push_back(0.5 * r.squaredNorm());
    if (cfg.tol > 0.0 && r.norm() <= cfg.tol) {
      trace.converged = true;
      break;
    }
    if (k == cfg.max_iters) break;

    Vector next;
    switch (cfg.method) {
      case Method::DampedHardNet:
        next = damped_step(cs, out.y, cfg.epsilon);
        break;
      case Method::VanillaHardNet:
        next = vanilla_step(cs, out.y);
        break;
      case Method::LevenbergMarquardt:
        next = lm_step(cs, out.y, cfg.epsilon);
        break;
    }
    if (!next.allFinite()) {
      throw NumericalError(fmt::format("non-finite iterate at iteration {}", k + 1), k + 1);
    }
    out.y = std::move(next);
    trace.iters_used = k + 1;
  }
  return out;
}

DecayBound decay_bound(double mu, double L, double G, double epsilon) {
  if (!(mu > 0.0) || !(L > 0.0) || !(G > 0.0)) {
    throw PreconditionError("decay bound needs mu, L, G > 0");
  }
  if (!(epsilon > 0.5 * L)) {
    throw PreconditionError(fmt::format(
        "decay bound only holds for regularization epsilon > L/2 (epsilon={}, L/2={})", epsilon,
        0.5 * L));
  }
  DecayBound b;
  b.mu = mu;
  b.L = L;
  b.G = G;
  b.epsilon = epsilon;
  // f(x) = x (1 - L x / 2) evaluated at both ends of x in [1/(eps+G^2), 1/eps].
  const auto f = [L](double x) { return x - 0.5 * L * x * x; };
  b.c_eps = std::min(f(1.0 / epsilon), f(1.0 / (epsilon + G * G)));
  b.factor = 1.0 - 2.0 * mu * b.c_eps;
  return b;
}

DecayReport verify_decay(const ConstraintSet& cs, const Vector& y0, const ProjectionConfig& cfg,
                         const DecayBound& bound) {
  DecayReport report;
  report.trace = project(cs, y0, cfg).trace;
  const auto& V = report.trace.energies;
  report.passed = true;
  report.monotone = true;
  double envelope = V.front();
  for (std::size_t k = 0; k < V.size(); ++k) {
    if (V[k] > envelope + kEnvelopeSlack && report.passed) {
      report.passed = false;
      report.first_violation = static_cast<int>(k);
    }
    envelope *= bound.factor;
    if (k + 1 < V.size()) {
      if (V[k + 1] > V[k]) report.monotone = false;
      if (V[k] > 0.0) report.worst_ratio = std::max(report.worst_ratio, V[k + 1] / V[k]);
    }
  }
  return report;
}

}  // namespace hardproj
