#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "hardproj/constraints.hpp"
#include "hardproj/mlp.hpp"
#include "hardproj/projector.hpp"
#include "hardproj/tape.hpp"
#include "hardproj/traced_projection.hpp"

namespace hardproj::mpc {

/**
 * Open-loop linear MPC with box-bounded controls and an ellipsoidal state
 * constraint applied at every step k = 1..N:
 *
 *   min  sum_{k=1..N} |x_k - x_target|^2 + sum_{k=0..N-1} |u_k|^2
 *   s.t. x_{k+1} = A x_k + B u_k,  |u_k|_inf <= u_b,  x_k^T Q x_k <= x_b,  x_0 = x_in
 *
 * x_0 is not a decision variable; the decision vector is
 * y = [x_1 .. x_N, u_0 .. u_{N-1}].
 */
struct MpcInstance {
  Index nx = 5;
  Index nu = 4;
  Index horizon = 10;
  Matrix A;
  Matrix B;
  Matrix Q;
  double u_bound = 1.0;
  double x_bound = 10.0;
  Vector x_target;
  Vector x_in;

  // The 5-state / 4-control benchmark with x_in = 0.
  static MpcInstance standard();

  Index num_vars() const { return horizon * (nx + nu); }
  Index state_offset(Index k) const { return (k - 1) * nx; }  // k = 1..N
  Index control_offset(Index k) const { return horizon * nx + k * nu; }  // k = 0..N-1

  // Throws PreconditionError on inconsistent shapes or a non-SPD Q.
  void validate() const;
  MpcInstance with_initial_state(const Vector& x) const;
};

struct Trajectory {
  Matrix states;    // nx x N, column k-1 holds x_k
  Matrix controls;  // nu x N, column k holds u_k

  static Trajectory unflatten(const MpcInstance& inst, const Vector& y);
  Vector flatten() const;
};

// Row layout of the residual of build_constraints.
struct ConstraintGroups {
  Index dynamics_begin = 0, dynamics_count = 0;
  Index box_begin = 0, box_count = 0;
  Index quad_begin = 0, quad_count = 0;
};

ConstraintGroups constraint_groups(const MpcInstance& inst);

// h = dynamics (N nx rows), g = [controls (N nu identity rows, +-u_b); x_k^T Q x_k (N rows)].
ConstraintSet build_constraints(const MpcInstance& inst);

// Same constraints as a tape program for the unrolled projection.
TracedConstraints traced_constraints(const MpcInstance& inst);

double objective(const MpcInstance& inst, const Vector& y);
double objective(const MpcInstance& inst, const Trajectory& traj);
ad::Value traced_objective(ad::Tape& tape, const MpcInstance& inst, const ad::Value& y);

// Acceptance test of the sampler: x^T Q x <= x_b.
bool is_feasible_initial(const MpcInstance& inst, const Vector& x);

// Rejection sampling of x with x^T Q x <= x_b from the box [-box, box]^nx.
Vector sample_feasible_initial(const MpcInstance& inst, std::mt19937_64& rng,
                               double box = 15.0, int max_tries = 1000000);

struct OracleOptions {
  double gap_tol = 1e-8;     // stop once (#inequalities) / t <= gap_tol
  double t0 = 1.0;
  double t_factor = 20.0;
  double newton_tol = 1e-14;  // Newton decrement^2 / 2 for centering
  int max_newton = 2000;
};

struct OracleSolution {
  Trajectory trajectory;
  Vector y;
  double objective = 0.0;
  double kkt_residual = 0.0;
  int newton_steps = 0;
  std::vector<double> multipliers;  // box rows then state rows, finite bounds only
};

/**
 * Log-barrier interior-point solve of the control-reduced problem: the
 * dynamics are eliminated so the decision variables are the N nu controls.
 * Throws SolverError if x_in is infeasible or the method fails to converge.
 */
OracleSolution oracle_solve(const MpcInstance& inst, const OracleOptions& options = {});

// Dense least-squares minimizer of the objective with all inequalities dropped.
Vector unconstrained_solution(const MpcInstance& inst);

// max(0, Z_model - Z_star) / Z_star. Returns nullopt when Z_star <= 0.
std::optional<double> suboptimality(double z_model, double z_star);

struct Violations {
  double dynamics = 0.0;
  double box = 0.0;
  double quadratic = 0.0;
};

// Largest |r_i| within each constraint group.
Violations group_violations(const MpcInstance& inst, const Vector& y);

struct SampleResult {
  int index = 0;
  std::uint64_t seed = 0;
  Vector x_in;
  Vector model_y;
  Vector oracle_y;
  double model_objective = 0.0;
  double oracle_objective = 0.0;
  std::optional<double> suboptimality;
  Violations violations;
  double oracle_kkt = 0.0;
  bool oracle_failed = false;
  bool projection_converged = false;
  int projection_iters = 0;
};

struct Stat {
  double average = 0.0;
  double maximum = 0.0;
};

struct EvalReport {
  Stat suboptimality;
  Stat dynamics;
  Stat box;
  Stat quadratic;
  int samples = 0;
  int excluded = 0;  // oracle failures or Z_star = 0
  std::vector<SampleResult> per_sample;

  nlohmann::json to_json() const;
};

// Raw network output for an initial state.
using Model = std::function<Vector(const Vector& x_in)>;

struct EvalOptions {
  int n_test = 100;
  std::uint64_t seed = 0;
  ProjectionConfig projection{0.3, 500, 1e-9, Method::DampedHardNet};
  bool oracle_as_model = false;
  double sample_box = 15.0;
};

// Seed of the i-th test sample derived from the evaluation seed.
std::uint64_t sample_seed(std::uint64_t seed, int index);

EvalReport evaluate(const Model& model, const MpcInstance& base, const EvalOptions& options);

// Per-sample loss for training: objective of the K-step projected output.
LossProgram make_training_loss(const MpcInstance& base, double epsilon, int num_iters);

// Instance fields from JSON; absent keys keep the standard values.
MpcInstance instance_from_json(const nlohmann::json& j);
nlohmann::json instance_to_json(const MpcInstance& inst);

}  // namespace hardproj::mpc
