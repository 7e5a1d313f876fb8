#include "hardproj/benchmark.hpp"

#include <algorithm>
#include <random>

#include "hardproj/errors.hpp"

namespace hardproj::bench {

namespace {

// Offsets the stream index away from sample indices used with the same seed.
constexpr std::uint64_t kStreamTag = 0x5bd1e995ULL;

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

ProjectionConfig projection_from_json(const nlohmann::json& j, ProjectionConfig p) {
  read(j, "epsilon", p.epsilon);
  read(j, "iterations", p.max_iters);
  read(j, "tol", p.tol);
  return p;
}

}  // namespace

bool Thresholds::met(const mpc::EvalReport& r) const {
  if (r.samples == 0) return false;
  if (r.suboptimality.average > average_suboptimality) return false;
  if (r.suboptimality.maximum > maximum_suboptimality) return false;
  for (const mpc::Stat* s : {&r.dynamics, &r.box, &r.quadratic}) {
    if (s->average > average_violation || s->maximum > maximum_violation) return false;
  }
  return true;
}

BenchmarkConfig config_from_json(const nlohmann::json& j, const BenchmarkConfig& defaults) {
  BenchmarkConfig cfg = defaults;
  if (!j.is_object()) throw PreconditionError("config must be a JSON object");
  read(j, "seed", cfg.seed);
  if (j.contains("instance")) cfg.instance = mpc::instance_from_json(j.at("instance"));
  if (j.contains("data")) {
    const auto& d = j.at("data");
    read(d, "n_train", cfg.n_train);
    read(d, "n_validation", cfg.n_validation);
    read(d, "n_test", cfg.n_test);
    read(d, "sample_box", cfg.sample_box);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    read(t, "learning_rate", cfg.train.learning_rate);
    read(t, "beta1", cfg.train.beta1);
    read(t, "beta2", cfg.train.beta2);
    read(t, "adam_epsilon", cfg.train.adam_epsilon);
    read(t, "epochs", cfg.train.epochs);
    read(t, "batch_size", cfg.train.batch_size);
    read(t, "hidden", cfg.train.hidden);
    cfg.train.projection = projection_from_json(t, cfg.train.projection);
  }
  if (j.contains("eval")) cfg.eval_projection = projection_from_json(j.at("eval"), cfg.eval_projection);
  if (j.contains("thresholds")) {
    const auto& t = j.at("thresholds");
    read(t, "average_suboptimality", cfg.thresholds.average_suboptimality);
    read(t, "maximum_suboptimality", cfg.thresholds.maximum_suboptimality);
    read(t, "average_violation", cfg.thresholds.average_violation);
    read(t, "maximum_violation", cfg.thresholds.maximum_violation);
  }
  if (cfg.n_train <= 0 || cfg.n_validation < 0 || cfg.n_test <= 0) {
    throw PreconditionError("dataset sizes must be positive");
  }
  if (!(cfg.sample_box > 0.0)) throw PreconditionError("sample_box must be positive");
  if (cfg.train.projection.max_iters < 0) throw PreconditionError("iterations must be >= 0");
  cfg.eval_projection.validate();
  return cfg;
}

nlohmann::json config_to_json(const BenchmarkConfig& cfg) {
  return nlohmann::json{
      {"seed", cfg.seed},
      {"instance", mpc::instance_to_json(cfg.instance)},
      {"data",
       {{"n_train", cfg.n_train},
        {"n_validation", cfg.n_validation},
        {"n_test", cfg.n_test},
        {"sample_box", cfg.sample_box}}},
      {"train",
       {{"learning_rate", cfg.train.learning_rate},
        {"beta1", cfg.train.beta1},
        {"beta2", cfg.train.beta2},
        {"adam_epsilon", cfg.train.adam_epsilon},
        {"epochs", cfg.train.epochs},
        {"batch_size", cfg.train.batch_size},
        {"hidden", cfg.train.hidden},
        {"epsilon", cfg.train.projection.epsilon},
        {"iterations", cfg.train.projection.max_iters}}},
      {"eval",
       {{"epsilon", cfg.eval_projection.epsilon},
        {"iterations", cfg.eval_projection.max_iters},
        {"tol", cfg.eval_projection.tol}}},
      {"thresholds",
       {{"average_suboptimality", cfg.thresholds.average_suboptimality},
        {"maximum_suboptimality", cfg.thresholds.maximum_suboptimality},
        {"average_violation", cfg.thresholds.average_violation},
        {"maximum_violation", cfg.thresholds.maximum_violation}}}};
}

std::uint64_t stream_seed(std::uint64_t seed, Stream stream) {
  return mpc::sample_seed(seed ^ kStreamTag, -static_cast<int>(stream));
}

std::vector<Vector> initial_states(const mpc::MpcInstance& inst, int count, std::uint64_t stream,
                                   double box) {
  std::vector<Vector> out;
  out.reserve(static_cast<std::size_t>(std::max(count, 0)));
  for (int i = 0; i < count; ++i) {
    std::mt19937_64 rng(mpc::sample_seed(stream, i));
    out.push_back(mpc::sample_feasible_initial(inst, rng, box));
  }
  return out;
}

Datasets make_datasets(const BenchmarkConfig& cfg) {
  Datasets d;
  d.train = initial_states(cfg.instance, cfg.n_train, stream_seed(cfg.seed, Stream::TrainData),
                           cfg.sample_box);
  d.validation = initial_states(cfg.instance, cfg.n_validation,
                                stream_seed(cfg.seed, Stream::ValidationData), cfg.sample_box);
  return d;
}

TrainResult train_benchmark(const BenchmarkConfig& cfg, const EpochCallback& on_epoch) {
  const Datasets data = make_datasets(cfg);
  TrainConfig tc = cfg.train;
  tc.seed = stream_seed(cfg.seed, Stream::Network);
  const LossProgram loss = mpc::make_training_loss(cfg.instance, tc.projection.epsilon,
                                                   tc.projection.max_iters);
  return train(data.train, data.validation, cfg.instance.num_vars(), loss, tc, on_epoch);
}

mpc::EvalReport evaluate_benchmark(const BenchmarkConfig& cfg, const MlpParams* network) {
  mpc::EvalOptions opts;
  opts.n_test = cfg.n_test;
  opts.seed = stream_seed(cfg.seed, Stream::TestData);
  opts.projection = cfg.eval_projection;
  opts.sample_box = cfg.sample_box;
  opts.oracle_as_model = network == nullptr;
  mpc::Model model;
  if (network != nullptr) {
    model = [network](const Vector& x) { return forward(*network, x); };
  }
  return mpc::evaluate(model, cfg.instance, opts);
}

}  // namespace hardproj::bench
