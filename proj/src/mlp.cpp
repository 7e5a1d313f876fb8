#include "hardproj/mlp.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <random>

#include "hardproj/errors.hpp"

namespace hardproj {

namespace {

constexpr const char* kCheckpointFormat = "hardproj-mlp-v1";

// Adam moment buffers, laid out like MlpParams.
struct AdamState {
  std::vector<Matrix> mw, vw;
  std::vector<Vector> mb, vb;
  long step = 0;

  explicit AdamState(const MlpParams& p) {
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
      mw.push_back(Matrix::Zero(p.weights[l].rows(), p.weights[l].cols()));
      vw.push_back(mw.back());
      mb.push_back(Vector::Zero(p.biases[l].size()));
      vb.push_back(mb.back());
    }
  }
};

template <typename T>
void adam_update(T& param, const T& grad, T& m, T& v, const TrainConfig& cfg, double bc1,
                 double bc2) {
  m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
  v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseAbs2();
  param.array() -= cfg.learning_rate * (m.array() / bc1) /
                   ((v.array() / bc2).sqrt() + cfg.adam_epsilon);
}

}  // namespace

std::vector<Index> MlpParams::layer_sizes() const {
  std::vector<Index> sizes;
  if (weights.empty()) return sizes;
  sizes.push_back(weights.front().cols());
  for (const auto& W : weights) sizes.push_back(W.rows());
  return sizes;
}

Index MlpParams::num_values() const {
  Index n = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
  return n;
}

bool MlpParams::all_finite() const {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (!weights[l].allFinite() || !biases[l].allFinite()) return false;
  }
  return true;
}

MlpParams init_mlp(const std::vector<Index>& layer_sizes, std::uint64_t seed) {
  if (layer_sizes.size() < 2) throw PreconditionError("an MLP needs at least two layer sizes");
  std::mt19937_64 rng(seed);
  MlpParams p;
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
    const Index fan_in = layer_sizes[l];
    const Index fan_out = layer_sizes[l + 1];
    if (fan_in <= 0 || fan_out <= 0) throw PreconditionError("layer sizes must be positive");
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Matrix W(fan_out, fan_in);
    for (Index i = 0; i < W.rows(); ++i) {
      for (Index j = 0; j < W.cols(); ++j) W(i, j) = dist(rng);
    }
    p.weights.push_back(std::move(W));
    p.biases.push_back(Vector::Zero(fan_out));
  }
  return p;
}

Vector forward(const MlpParams& params, const Vector& x) {
  if (params.weights.empty()) throw PreconditionError("empty network");
  if (x.size() != params.weights.front().cols()) {
    throw DimensionError(fmt::format("network expects input of length {}, got {}",
                                     params.weights.front().cols(), x.size()));
  }
  Vector h = x;
  const std::size_t L = params.weights.size();
  for (std::size_t l = 0; l < L; ++l) {
    Vector z = params.weights[l] * h + params.biases[l];
    h = (l + 1 < L) ? Vector(z.cwiseMax(0.0)) : z;
  }
  return h;
}

TracedMlp register_params(ad::Tape& tape, const MlpParams& params) {
  TracedMlp net;
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    net.weights.push_back(tape.parameter(params.weights[l]));
    net.biases.push_back(tape.parameter(params.biases[l]));
  }
  return net;
}

ad::Value forward_traced(ad::Tape& tape, const TracedMlp& net, const ad::Value& x) {
  (void)tape;
  ad::Value h = x;
  const std::size_t L = net.weights.size();
  for (std::size_t l = 0; l < L; ++l) {
    ad::Value z = matvec(net.weights[l], h) + net.biases[l];
    h = (l + 1 < L) ? relu(z) : z;
  }
  return h;
}

double mean_loss(const MlpParams& params, const std::vector<Vector>& inputs,
                 const LossProgram& loss) {
  if (inputs.empty()) return 0.0;
  double total = 0.0;
  for (const Vector& x : inputs) {
    ad::Tape tape;
    const ad::Value out = tape.constant(forward(params, x));
    total += tape.scalar(loss(tape, out, x));
  }
  return total / static_cast<double>(inputs.size());
}

TrainResult train(const std::vector<Vector>& train_inputs,
                  const std::vector<Vector>& validation_inputs, Index output_dim,
                  const LossProgram& loss, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  if (!(cfg.learning_rate > 0.0)) throw PreconditionError("learning rate must be positive");
  if (cfg.batch_size <= 0 || cfg.epochs < 0) {
    throw PreconditionError("batch size must be positive and epochs non-negative");
  }
  if (train_inputs.empty()) throw PreconditionError("empty training set");

  std::vector<Index> sizes{train_inputs.front().size()};
  sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  sizes.push_back(output_dim);

  TrainResult result;
  result.params = init_mlp(sizes, cfg.seed);
  MlpParams& params = result.params;
  AdamState adam(params);
  // Shuffling uses its own stream so initialization and ordering are decoupled.
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  std::vector<std::size_t> order(train_inputs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_total = 0.0;
    int batch = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size), ++batch) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const double inv_count = 1.0 / static_cast<double>(stop - start);

      std::vector<Matrix> gw;
      std::vector<Vector> gb;
      for (const auto& W : params.weights) gw.push_back(Matrix::Zero(W.rows(), W.cols()));
      for (const auto& b : params.biases) gb.push_back(Vector::Zero(b.size()));

      for (std::size_t i = start; i < stop; ++i) {
        const Vector& x = train_inputs[order[i]];
        ad::Tape tape;
        const TracedMlp net = register_params(tape, params);
        const ad::Value out = forward_traced(tape, net, tape.constant(x));
        const ad::Value sample_loss = loss(tape, out, x);
        const double value = tape.scalar(sample_loss);
        if (!std::isfinite(value)) {
          throw NumericalError(
              fmt::format("non-finite loss at epoch {} batch {}", epoch, batch),
              static_cast<long>(epoch) * 1000000L + batch);
        }
        epoch_total += value;
        const ad::Gradients grads = tape.backward(sample_loss);
        for (std::size_t l = 0; l < gw.size(); ++l) {
          gw[l] += inv_count * grads[net.weights[l]];
          gb[l] += inv_count * grads[net.biases[l]].col(0);
        }
      }

      ++adam.step;
      const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam.step));
      const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam.step));
      for (std::size_t l = 0; l < gw.size(); ++l) {
        adam_update(params.weights[l], gw[l], adam.mw[l], adam.vw[l], cfg, bc1, bc2);
        adam_update(params.biases[l], gb[l], adam.mb[l], adam.vb[l], cfg, bc1, bc2);
      }
      if (!params.all_finite()) {
        throw NumericalError(
            fmt::format("non-finite parameters after epoch {} batch {}", epoch, batch),
            static_cast<long>(epoch) * 1000000L + batch);
      }
    }

    EpochLoss record;
    record.epoch = epoch + 1;
    record.train = epoch_total / static_cast<double>(train_inputs.size());
    record.validation = mean_loss(params, validation_inputs, loss);
    result.history.push_back(record);
    if (on_epoch) on_epoch(record);
  }
  return result;
}

void save_checkpoint(const std::filesystem::path& path, const MlpParams& params,
                     const CheckpointHeader& header) {
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["layer_sizes"] = header.layer_sizes;
  j["seed"] = header.seed;
  j["epoch"] = header.epoch;
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(params.num_values()));
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    const Matrix& W = params.weights[l];
    for (Index i = 0; i < W.rows(); ++i) {
      for (Index c = 0; c < W.cols(); ++c) flat.push_back(W(i, c));
    }
    for (Index i = 0; i < params.biases[l].size(); ++i) flat.push_back(params.biases[l][i]);
  }
  j["params"] = std::move(flat);
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write checkpoint {}", path.string()));
  out << j.dump() << '\n';
}

MlpParams load_checkpoint(const std::filesystem::path& path, CheckpointHeader* header) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot read checkpoint {}", path.string()));
  const nlohmann::json j = nlohmann::json::parse(in);
  if (j.value("format", std::string{}) != kCheckpointFormat) {
    throw std::runtime_error(fmt::format("{} is not a network checkpoint", path.string()));
  }
  const auto sizes = j.at("layer_sizes").get<std::vector<Index>>();
  const auto flat = j.at("params").get<std::vector<double>>();
  if (sizes.size() < 2) throw std::runtime_error("checkpoint needs at least two layer sizes");

  MlpParams p;
  std::size_t pos = 0;
  const auto take = [&]() {
    if (pos >= flat.size()) throw std::runtime_error("checkpoint parameter array is too short");
    return flat[pos++];
  };
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    Matrix W(sizes[l + 1], sizes[l]);
    for (Index i = 0; i < W.rows(); ++i) {
      for (Index c = 0; c < W.cols(); ++c) W(i, c) = take();
    }
    Vector b(sizes[l + 1]);
    for (Index i = 0; i < b.size(); ++i) b[i] = take();
    p.weights.push_back(std::move(W));
    p.biases.push_back(std::move(b));
  }
  if (pos != flat.size()) throw std::runtime_error("checkpoint parameter array is too long");
  if (header != nullptr) {
    header->layer_sizes = sizes;
    header->seed = j.value("seed", std::uint64_t{0});
    header->epoch = j.value("epoch", 0);
  }
  return p;
}

}  // namespace hardproj
