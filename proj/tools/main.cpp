// hardproj: toy demonstrations, training and evaluation of the learned MPC benchmark.
//
// Exit codes: 0 success (criteria met), 1 numerical failure, 2 usage or config error.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/os.h>
#include <json.hpp>

#include "hardproj/benchmark.hpp"
#include "hardproj/constraints.hpp"
#include "hardproj/errors.hpp"
#include "hardproj/mlp.hpp"
#include "hardproj/mpc.hpp"
#include "hardproj/projector.hpp"
#include "hardproj/toys.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hardproj;

namespace {

constexpr int kOk = 0;
constexpr int kNumerical = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string num(double v) { return fmt::format("{:.16e}", v); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("cannot write " + path.string());
  out << text;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw UsageError(fmt::format("cannot create {}: {}", dir.string(), ec.message()));
}

// k, y_1..y_n, V
void write_trace_csv(const fs::path& path, const ProjectionTrace& trace) {
  std::string text = "k";
  const Index n = trace.iterates.empty() ? 0 : trace.iterates.front().size();
  for (Index i = 0; i < n; ++i) text += fmt::format(",y{}", i + 1);
  text += ",V\n";
  for (std::size_t k = 0; k < trace.iterates.size(); ++k) {
    text += std::to_string(k);
    for (Index i = 0; i < n; ++i) text += "," + num(trace.iterates[k](i));
    text += "," + num(trace.energies[k]) + "\n";
  }
  write_text(path, text);
}

// ---------------------------------------------------------------------------
// toy

struct ToyRun {
  std::optional<ProjectionResult> result;
  std::string failure;
};

ToyRun run_method(const ConstraintSet& cs, const Vector& y0, const ProjectionConfig& cfg) {
  ToyRun run;
  try {
    run.result = project(cs, y0, cfg);
  } catch (const RankDeficiencyError& e) {
    run.failure = e.what();
  } catch (const NumericalError& e) {
    run.failure = e.what();
  }
  return run;
}

void report_run(const char* label, const ToyRun& run, const ProjectionConfig& cfg) {
  if (!run.result) {
    fmt::print("{:<8} failed: {}\n", label, run.failure);
    return;
  }
  const ProjectionTrace& t = run.result->trace;
  fmt::print("{:<8} {} after {} iterations, V = {:.3e} (tol |r| <= {:.1e})\n", label,
             t.converged ? "converged" : "NOT converged", t.iters_used, t.energies.back(), cfg.tol);
}

int cmd_toy(const std::string& scenario, const fs::path& out_dir, std::uint64_t seed) {
  std::optional<ConstraintSet> problem;
  Vector y0;
  ProjectionConfig vanilla{0.0, 500, 1e-10, Method::VanillaHardNet};
  ProjectionConfig damped{0.3, 500, 1e-10, Method::DampedHardNet};
  std::optional<toys::AffineToy> affine;

  if (scenario == "circle") {
    problem = toys::circle();
    y0 = toys::circle_start();
  } else if (scenario == "fig2-stall") {
    problem = toys::two_constraint();
    y0 = toys::two_constraint_start();
    vanilla.max_iters = 10000;
    vanilla.tol = std::sqrt(2e-4);  // V <= 1e-4
    damped.tol = std::sqrt(2e-10);  // V <= 1e-10
  } else if (scenario == "affine-decay") {
    affine = toys::affine(4, 7, 0.3, 1.5, seed);
    problem = affine->constraints;
    y0 = affine->y0;
    damped.epsilon = affine->L;
    damped.max_iters = 2000;
  } else {
    throw UsageError("unknown scenario '" + scenario + "' (circle, fig2-stall, affine-decay)");
  }

  const ConstraintSet& cs = *problem;
  ensure_dir(out_dir);
  const ToyRun v = run_method(cs, y0, vanilla);
  const ToyRun d = run_method(cs, y0, damped);
  if (v.result) write_trace_csv(out_dir / (scenario + "_vanilla.csv"), v.result->trace);
  if (d.result) write_trace_csv(out_dir / (scenario + "_damped.csv"), d.result->trace);

  fmt::print("scenario {}\n", scenario);
  report_run("vanilla", v, vanilla);
  report_run("damped", d, damped);
  bool ok = d.result && d.result->trace.converged;

  if (affine) {
    const DecayBound bound = decay_bound(affine->mu, affine->L, affine->G, damped.epsilon);
    const DecayReport rep = verify_decay(cs, y0, damped, bound);
    fmt::print("mu = {:.6g}, L = {:.6g}, G = {:.6g}, eps = {:.6g}\n", bound.mu, bound.L, bound.G,
               bound.epsilon);
    fmt::print("theoretical factor {:.6f}, worst observed ratio {:.6f}, monotone {}, envelope {}\n",
               bound.factor, rep.worst_ratio, rep.monotone ? "yes" : "no",
               rep.passed ? "holds" : fmt::format("exceeded at k = {}", rep.first_violation));
    ok = ok && rep.passed;
  }
  return ok ? kOk : kNumerical;
}

// ---------------------------------------------------------------------------
// config plumbing shared by train and eval

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError(fmt::format("malformed config {}: {}", path.string(), e.what()));
  }
}

// "section.key=value"; the value is parsed as JSON, falling back to a string.
void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value: " + assignment);
  std::string pointer = "/" + assignment.substr(0, eq);
  for (char& c : pointer) {
    if (c == '.') c = '/';
  }
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  j[json::json_pointer(pointer)] = value;
}

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::string out = "out";
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "JSON config; absent keys keep their defaults");
  cmd->add_option("--seed", f.seed, "Master seed for data, initialization and test samples");
  cmd->add_option("--out", f.out, "Output directory")->capture_default_str();
  cmd->add_option("--set", f.overrides, "Override a config entry, e.g. train.learning_rate=5e-4");
}

bench::BenchmarkConfig resolve_config(const CommonFlags& f, json extra) {
  json j = f.config.empty() ? json::object() : read_json_file(f.config);
  if (!j.is_object()) throw UsageError("config must be a JSON object");
  for (const auto& o : f.overrides) apply_override(j, o);
  if (f.seed) j["seed"] = *f.seed;
  j.merge_patch(extra);
  try {
    return bench::config_from_json(j);
  } catch (const json::exception& e) {
    throw UsageError(std::string("invalid config: ") + e.what());
  } catch (const PreconditionError& e) {
    throw UsageError(std::string("invalid config: ") + e.what());
  } catch (const DimensionError& e) {
    throw UsageError(std::string("invalid config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// train

int cmd_train(const CommonFlags& f, std::optional<int> epochs) {
  json extra = json::object();
  if (epochs) extra["train"]["epochs"] = *epochs;
  const bench::BenchmarkConfig cfg = resolve_config(f, extra);
  const fs::path out(f.out);
  ensure_dir(out);
  write_text(out / "config.json", bench::config_to_json(cfg).dump(2) + "\n");

  auto losses = fmt::output_file((out / "losses.csv").string());
  losses.print("epoch,split,loss\n");
  const auto on_epoch = [&](const EpochLoss& e) {
    losses.print("{},train,{}\n{},validation,{}\n", e.epoch, num(e.train), e.epoch,
                 num(e.validation));
    losses.flush();
    fmt::print(stderr, "epoch {:>4}  train {:.6f}  validation {:.6f}\n", e.epoch, e.train,
               e.validation);
  };

  TrainResult result;
  try {
    result = bench::train_benchmark(cfg, on_epoch);
  } catch (const NumericalError& e) {
    const long it = e.iteration();
    fmt::print(stderr, "training failed at epoch {} batch {}: {}\n", it / 1'000'000,
               it % 1'000'000, e.what());
    return kNumerical;
  }
  losses.close();

  CheckpointHeader header;
  header.layer_sizes = result.params.layer_sizes();
  header.seed = cfg.seed;
  header.epoch = result.history.empty() ? 0 : result.history.back().epoch;
  save_checkpoint(out / "checkpoint.json", result.params, header);
  fmt::print("wrote {}\n", (out / "checkpoint.json").string());
  return kOk;
}

// ---------------------------------------------------------------------------
// eval

std::string optional_num(const std::optional<double>& v) { return v ? num(*v) : "nan"; }

// k, model x/u columns, oracle x/u columns; x_0 = x_in and u_N is left empty.
void write_trajectory_csv(const fs::path& path, const mpc::MpcInstance& inst,
                          const mpc::SampleResult& s) {
  std::string text = "k";
  for (const char* who : {"model", "oracle"}) {
    for (Index i = 0; i < inst.nx; ++i) text += fmt::format(",{}_x{}", who, i + 1);
    for (Index i = 0; i < inst.nu; ++i) text += fmt::format(",{}_u{}", who, i + 1);
  }
  text += "\n";
  std::vector<std::optional<mpc::Trajectory>> trajs;
  for (const Vector* y : {&s.model_y, &s.oracle_y}) {
    if (y->size() == inst.num_vars()) {
      trajs.push_back(mpc::Trajectory::unflatten(inst, *y));
    } else {
      trajs.emplace_back();
    }
  }
  for (Index k = 0; k <= inst.horizon; ++k) {
    text += std::to_string(k);
    for (const auto& t : trajs) {
      for (Index i = 0; i < inst.nx; ++i) {
        if (!t) {
          text += ",";
        } else {
          text += "," + num(k == 0 ? s.x_in(i) : t->states(i, k - 1));
        }
      }
      for (Index i = 0; i < inst.nu; ++i) {
        text += (t && k < inst.horizon) ? "," + num(t->controls(i, k)) : ",";
      }
    }
    text += "\n";
  }
  write_text(path, text);
}

int cmd_eval(const CommonFlags& f, const std::string& checkpoint, std::optional<int> n_test,
             bool oracle_as_model) {
  json extra = json::object();
  if (n_test) extra["data"]["n_test"] = *n_test;
  const bench::BenchmarkConfig cfg = resolve_config(f, extra);

  std::optional<MlpParams> net;
  if (!oracle_as_model) {
    if (checkpoint.empty()) throw UsageError("eval needs --checkpoint or --oracle-as-model");
    if (!fs::exists(checkpoint)) throw UsageError("missing checkpoint " + checkpoint);
    try {
      net = load_checkpoint(checkpoint);
    } catch (const std::exception& e) {
      throw UsageError(fmt::format("unreadable checkpoint {}: {}", checkpoint, e.what()));
    }
    const auto sizes = net->layer_sizes();
    if (sizes.front() != cfg.instance.nx || sizes.back() != cfg.instance.num_vars()) {
      throw UsageError("checkpoint dimensions do not match the instance");
    }
  }

  const fs::path out(f.out);
  ensure_dir(out / "trajectories");
  write_text(out / "config.json", bench::config_to_json(cfg).dump(2) + "\n");

  const mpc::EvalReport report = bench::evaluate_benchmark(cfg, net ? &*net : nullptr);
  const bool met = cfg.thresholds.met(report);

  json rj = report.to_json();
  rj["oracle_as_model"] = oracle_as_model;
  rj["thresholds_met"] = met;
  write_text(out / "report.json", rj.dump(2) + "\n");

  std::string csv =
      "index,seed,suboptimality,dynamics_violation,box_violation,quadratic_violation,"
      "oracle_kkt,model_objective,oracle_objective,oracle_failed,projection_converged,"
      "projection_iters\n";
  for (const auto& s : report.per_sample) {
    csv += fmt::format("{},{},{},{},{},{},{},{},{},{},{},{}\n", s.index, s.seed,
                       optional_num(s.suboptimality), num(s.violations.dynamics),
                       num(s.violations.box), num(s.violations.quadratic), num(s.oracle_kkt),
                       num(s.model_objective), num(s.oracle_objective), s.oracle_failed ? 1 : 0,
                       s.projection_converged ? 1 : 0, s.projection_iters);
    write_trajectory_csv(out / "trajectories" / fmt::format("sample_{:03d}.csv", s.index),
                         cfg.instance, s);
  }
  write_text(out / "samples.csv", csv);

  fmt::print("samples {} (excluded {})\n", report.samples, report.excluded);
  fmt::print("suboptimality        avg {:.3e}  max {:.3e}\n", report.suboptimality.average,
             report.suboptimality.maximum);
  fmt::print("dynamics violation   avg {:.3e}  max {:.3e}\n", report.dynamics.average,
             report.dynamics.maximum);
  fmt::print("box violation        avg {:.3e}  max {:.3e}\n", report.box.average,
             report.box.maximum);
  fmt::print("quadratic violation  avg {:.3e}  max {:.3e}\n", report.quadratic.average,
             report.quadratic.maximum);
  fmt::print("thresholds {}\n", met ? "met" : "NOT met");
  return met ? kOk : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Damped-linearization projection: toys, training and MPC evaluation"};
  app.require_subcommand(1);

  std::string scenario;
  std::string toy_out = "out";
  std::uint64_t toy_seed = 0;
  auto* toy = app.add_subcommand("toy", "Vanilla vs damped projection on a small problem");
  toy->add_option("scenario", scenario, "circle | fig2-stall | affine-decay")->required();
  toy->add_option("--out", toy_out, "Directory for the per-method trace CSVs")->capture_default_str();
  toy->add_option("--seed", toy_seed, "Seed of the affine instance")->capture_default_str();

  CommonFlags train_flags;
  std::optional<int> epochs;
  auto* train = app.add_subcommand("train", "Train the network through the unrolled projection");
  add_common(train, train_flags);
  train->add_option("--epochs", epochs, "Number of epochs");

  CommonFlags eval_flags;
  std::string checkpoint;
  std::optional<int> n_test;
  bool oracle_as_model = false;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint against the oracle");
  add_common(eval, eval_flags);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint written by train");
  eval->add_option("--n-test", n_test, "Number of test initial states");
  eval->add_flag("--oracle-as-model", oracle_as_model, "Feed oracle solutions through the pipeline");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (toy->parsed()) return cmd_toy(scenario, toy_out, toy_seed);
    if (train->parsed()) return cmd_train(train_flags, epochs);
    if (eval->parsed()) return cmd_eval(eval_flags, checkpoint, n_test, oracle_as_model);
  } catch (const UsageError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kUsage;
  } catch (const NumericalError& e) {
    fmt::print(stderr, "numerical failure at iteration {}: {}\n", e.iteration(), e.what());
    return kNumerical;
  } catch (const SolverError& e) {
    fmt::print(stderr, "solver failure: {}\n", e.what());
    return kNumerical;
  } catch (const EvaluationError& e) {
    fmt::print(stderr, "non-finite constraint value at row {}: {}\n", e.constraint_index(),
               e.what());
    return kNumerical;
  }
  return kUsage;
}
