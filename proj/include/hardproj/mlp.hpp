#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "hardproj/constraints.hpp"
#include "hardproj/projector.hpp"
#include "hardproj/tape.hpp"

namespace hardproj {

// Feed-forward network: ReLU on hidden layers, linear output.
struct MlpParams {
  std::vector<Matrix> weights;  // weights[l] is sizes[l+1] x sizes[l]
  std::vector<Vector> biases;

  std::vector<Index> layer_sizes() const;
  Index num_values() const;
  bool all_finite() const;
};

// Uniform He-style initialization, U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases.
MlpParams init_mlp(const std::vector<Index>& layer_sizes, std::uint64_t seed);

Vector forward(const MlpParams& params, const Vector& x);

// The network's parameters registered on a tape.
struct TracedMlp {
  std::vector<ad::Value> weights;
  std::vector<ad::Value> biases;
};

TracedMlp register_params(ad::Tape& tape, const MlpParams& params);
ad::Value forward_traced(ad::Tape& tape, const TracedMlp& net, const ad::Value& x);

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int epochs = 200;
  int batch_size = 32;
  std::uint64_t seed = 0;
  std::vector<Index> hidden = {200, 200};
  ProjectionConfig projection{0.3, 500, 0.0, Method::DampedHardNet};
};

// Per-sample loss built on the tape from the raw network output and the input.
using LossProgram =
    std::function<ad::Value(ad::Tape& tape, const ad::Value& output, const Vector& input)>;

struct EpochLoss {
  int epoch = 0;
  double train = 0.0;       // mean per-sample loss over the epoch's minibatches
  double validation = 0.0;  // mean per-sample loss after the epoch
};

struct TrainResult {
  MlpParams params;
  std::vector<EpochLoss> history;
};

using EpochCallback = std::function<void(const EpochLoss&)>;

/**
 * Minibatch Adam on the mean of `loss` over each batch. The sample order is
 * shuffled each epoch from `cfg.seed`, so a fixed dataset and config give a
 * bitwise-identical result. Throws NumericalError on a non-finite loss
 * (iteration() carries epoch * 1'000'000 + batch).
 */
TrainResult train(const std::vector<Vector>& train_inputs,
                  const std::vector<Vector>& validation_inputs, Index output_dim,
                  const LossProgram& loss, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

// Mean loss over a dataset without differentiation.
double mean_loss(const MlpParams& params, const std::vector<Vector>& inputs,
                 const LossProgram& loss);

// Checkpoint: JSON object with header fields and the flat parameter array.
struct CheckpointHeader {
  std::vector<Index> layer_sizes;
  std::uint64_t seed = 0;
  int epoch = 0;
};

void save_checkpoint(const std::filesystem::path& path, const MlpParams& params,
                     const CheckpointHeader& header);
MlpParams load_checkpoint(const std::filesystem::path& path, CheckpointHeader* header = nullptr);

}  // namespace hardproj
