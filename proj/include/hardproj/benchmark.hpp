#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "hardproj/mlp.hpp"
#include "hardproj/mpc.hpp"
#include "hardproj/projector.hpp"

// End-to-end learned-MPC experiment: data generation, training and evaluation
// from a single JSON-serializable configuration.
namespace hardproj::bench {

struct Thresholds {
  double average_suboptimality = 0.02;
  double maximum_suboptimality = 0.05;
  double average_violation = 1e-3;  // per constraint group
  double maximum_violation = 1e-2;

  bool met(const mpc::EvalReport& report) const;
};

struct BenchmarkConfig {
  mpc::MpcInstance instance = mpc::MpcInstance::standard();
  std::uint64_t seed = 0;
  int n_train = 800;
  int n_validation = 100;
  int n_test = 100;
  double sample_box = 15.0;
  // train.seed and train.projection.method are ignored: the network seed is
  // derived from `seed` and training always uses the damped unrolled projection.
  TrainConfig train;
  ProjectionConfig eval_projection{0.3, 500, 1e-9, Method::DampedHardNet};
  Thresholds thresholds;
};

// Missing keys keep the values of `defaults`. Throws nlohmann::json::exception
// or PreconditionError on malformed input.
BenchmarkConfig config_from_json(const nlohmann::json& j, const BenchmarkConfig& defaults = {});
nlohmann::json config_to_json(const BenchmarkConfig& cfg);

// Independent random streams derived from the master seed.
enum class Stream : std::uint64_t { TrainData = 1, ValidationData = 2, TestData = 3, Network = 4 };
std::uint64_t stream_seed(std::uint64_t seed, Stream stream);

// count feasible initial states, the i-th drawn from its own seed.
std::vector<Vector> initial_states(const mpc::MpcInstance& inst, int count,
                                   std::uint64_t stream, double box);

struct Datasets {
  std::vector<Vector> train;
  std::vector<Vector> validation;
};

Datasets make_datasets(const BenchmarkConfig& cfg);

TrainResult train_benchmark(const BenchmarkConfig& cfg, const EpochCallback& on_epoch = {});

// Evaluates a network on cfg.n_test fresh initial states. A null network runs
// the oracle-as-model self-check.
mpc::EvalReport evaluate_benchmark(const BenchmarkConfig& cfg, const MlpParams* network);

}  // namespace hardproj::bench
