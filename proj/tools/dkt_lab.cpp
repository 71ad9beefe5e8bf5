// dkt-lab: train and evaluate deep-kernel GP few-shot models, dump episodic
// task sets, run gradient checks and calibration, and reproduce the benchmark
// result grid. Every output file starts with a '#' provenance header echoing
// the full configuration; no timestamps, so identical configs give identical
// bytes.
//
// Exit codes: 0 success, 1 runtime failure (including training aborts),
// 2 usage/config errors.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dkt/baselines.hpp"
#include "dkt/checkpoint.hpp"
#include "dkt/experiments.hpp"
#include "dkt/gp.hpp"
#include "dkt/kernels.hpp"
#include "dkt/metrics.hpp"
#include "dkt/tasks.hpp"
#include "dkt/trainer.hpp"

namespace fs = std::filesystem;
using dkt::KernelFamily;
using dkt::KernelSpec;
using dkt::Tensor;

namespace {

constexpr const char* kVersion = "dkt-lab v1.0";

struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fmt(double v) { return dkt::detail::format_double(v); }

std::string join_u64(const std::vector<std::uint64_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

double mean_of(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x;
  return v.empty() ? 0.0 : acc / static_cast<double>(v.size());
}

// sample standard deviation (the per-run spread reported next to each mean)
double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double mu = mean_of(v);
  double acc = 0.0;
  for (double x : v) acc += (x - mu) * (x - mu);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);  // '\n' line endings everywhere
  if (!out) throw std::runtime_error("cannot open output file: " + path.string());
  return out;
}

// ---------------------------------------------------------------------------
// shared option bags
// ---------------------------------------------------------------------------

struct CommonOpts {
  std::string experiment = "sine-regression";
  std::string kernel;  // empty → experiment default
  std::uint64_t seed = 0;
  std::string out_dir = ".";
  int ways = 5;
  int shots = 1;
  int query_per_class = 16;
  std::uint64_t split_seed = 0;
  double noise_sigma = 0.1;

  bool is_classification() const { return experiment == "synth-classification"; }

  KernelFamily kernel_family() const {
    std::string name = kernel;
    if (name.empty()) name = is_classification() ? "bncossim" : "spectral";
    try {
      return dkt::kernel_family_from_name(name);
    } catch (const std::invalid_argument& e) {
      throw usage_error(e.what());
    }
  }

  dkt::SineTaskConfig sine_config(std::uint64_t task_seed) const {
    dkt::SineTaskConfig cfg;
    cfg.seed = task_seed;
    cfg.noise_sigma = noise_sigma;
    return cfg;
  }

  dkt::SyntheticFamilyConfig family_config(std::uint64_t task_seed) const {
    dkt::SyntheticFamilyConfig cfg;
    cfg.seed = task_seed;
    cfg.split_seed = split_seed;
    return cfg;
  }
};

void add_common(CLI::App* cmd, CommonOpts& o, bool with_kernel = true) {
  cmd->add_option("--experiment", o.experiment, "sine-regression | synth-classification")
      ->check(CLI::IsMember({"sine-regression", "synth-classification"}));
  if (with_kernel)
    cmd->add_option("--kernel", o.kernel,
                    "kernel family (" + dkt::valid_kernel_names() + ")");
  cmd->add_option("--seed", o.seed, "run seed")->envname("DKTLAB_SEED");
  cmd->add_option("--out", o.out_dir, "output directory");
  cmd->add_option("--ways", o.ways, "classification ways");
  cmd->add_option("--shots", o.shots, "support shots per class");
  cmd->add_option("--query-per-class", o.query_per_class, "query points per class");
  cmd->add_option("--split-seed", o.split_seed, "class library split seed");
  cmd->add_option("--noise-sigma", o.noise_sigma, "sine observation noise");
}

dkt::SineMode parse_mode(const std::string& mode) {
  if (mode == "in-range") return dkt::SineMode::TestIn;
  if (mode == "out-range") return dkt::SineMode::TestOut;
  throw usage_error("mode must be in-range or out-range");
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOpts {
  CommonOpts common;
  std::string method = "dkt";
  long iterations = 20000;
  double alpha = 1e-4;
  double beta = 1e-3;
  long eval_every = 0;
  bool trace = false;
};

std::vector<std::pair<std::string, std::string>> train_echo(const TrainOpts& o) {
  const CommonOpts& c = o.common;
  std::vector<std::pair<std::string, std::string>> echo{
      {"experiment", c.experiment},
      {"method", o.method},
      {"kernel", o.method == "feature-transfer" ? "none"
                                                : dkt::kernel_family_name(c.kernel_family())},
      {"iterations", std::to_string(o.iterations)},
      {"alpha", fmt(o.alpha)},
      {"beta", fmt(o.beta)},
      {"seed", std::to_string(c.seed)},
      {"noise_sigma", fmt(c.noise_sigma)},
  };
  if (c.is_classification()) {
    echo.emplace_back("ways", std::to_string(c.ways));
    echo.emplace_back("shots", std::to_string(c.shots));
    echo.emplace_back("query_per_class", std::to_string(c.query_per_class));
    echo.emplace_back("split_seed", std::to_string(c.split_seed));
  }
  return echo;
}

std::string provenance(const std::string& command,
                       const std::vector<std::pair<std::string, std::string>>& kv) {
  std::string line = std::string("# ") + kVersion + " | " + command;
  for (const auto& [k, v] : kv) line += " | " + k + "=" + v;
  return line;
}

int cmd_train(const TrainOpts& o) {
  const CommonOpts& c = o.common;
  if (o.method != "dkt" && o.method != "feature-transfer")
    throw usage_error("train supports --method dkt or feature-transfer "
                      "(dk-baseline fits at evaluation time and has nothing to train)");
  if (o.method == "feature-transfer" && c.is_classification())
    throw usage_error("feature-transfer training is regression-only");
  const KernelFamily family = c.kernel_family();  // validated even for ft

  dkt::TrainConfig cfg;
  cfg.iterations = o.iterations;
  cfg.alpha = o.alpha;
  cfg.beta = o.beta;
  cfg.seed = c.seed;
  cfg.eval_every = o.eval_every;

  const auto t0 = std::chrono::steady_clock::now();
  dkt::Checkpoint ckpt;
  std::vector<double> trace;
  std::string stem;

  if (o.method == "feature-transfer") {
    dkt::SineTaskConfig tasks = c.sine_config(c.seed);
    std::function<dkt::RegressionTask(long)> source = [tasks](long i) {
      return dkt::sample_sine_task(tasks, dkt::SineMode::Train, dkt::rng_stream::kTrainTasks, i);
    };
    dkt::FeatureTransferModel model = dkt::train_feature_transfer(source, cfg);
    dkt::Backbone net{model.config, model.params};
    ckpt = dkt::make_checkpoint(c.experiment, o.method, nullptr, &net, train_echo(o), c.seed);
    stem = "ckpt_" + c.experiment + "_feature-transfer_s" + std::to_string(c.seed);
  } else if (!c.is_classification()) {
    dkt::DktModel model = dkt::make_sine_dkt_model(family, c.seed);
    dkt::TrainOutcome out = dkt::train_sine_dkt(model, c.sine_config(c.seed), cfg);
    trace = std::move(out.loss_trace);
    ckpt = dkt::make_checkpoint(c.experiment, o.method, &model.kernel, &model.backbone,
                                train_echo(o), c.seed);
    stem = "ckpt_" + c.experiment + "_dkt_" + dkt::kernel_family_name(family) + "_s" +
           std::to_string(c.seed);
  } else {
    dkt::DktModel model = dkt::make_classification_dkt_model(family, c.seed);
    dkt::ClassificationProtocol proto{c.ways, c.shots, c.query_per_class, 50};
    dkt::TrainOutcome out =
        dkt::train_classification_dkt(model, c.family_config(c.seed), proto, cfg);
    trace = std::move(out.loss_trace);
    ckpt = dkt::make_checkpoint(c.experiment, o.method, &model.kernel, &model.backbone,
                                train_echo(o), c.seed);
    stem = "ckpt_" + c.experiment + "_dkt_" + dkt::kernel_family_name(family) + "_s" +
           std::to_string(c.seed);
  }
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const fs::path ckpt_path = fs::path(c.out_dir) / (stem + ".txt");
  {
    std::ofstream out = open_output(ckpt_path);
    dkt::save_checkpoint(out, ckpt);
  }
  if (o.trace) {
    const fs::path trace_path = fs::path(c.out_dir) / (stem + "_trace.csv");
    std::ofstream out = open_output(trace_path);
    out << provenance("train", train_echo(o)) << "\n";
    out << "iteration,loss\n";
    for (std::size_t i = 0; i < trace.size(); ++i) out << i << "," << fmt(trace[i]) << "\n";
    std::cout << "trace: " << trace_path.string() << "\n";
  }
  const double final_loss = trace.empty() ? std::nan("") : trace.back();
  std::cout << "checkpoint: " << ckpt_path.string() << "\n";
  std::cout << "final loss: " << final_loss << "\n";
  std::cout << "wall time: " << seconds << " s\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOpts {
  CommonOpts common;
  std::string method = "dkt";
  std::string mode = "in-range";
  std::vector<std::string> checkpoints;
  std::vector<std::uint64_t> seeds{1, 2, 3};  // dk-baseline run seeds
  long n_tasks = -1;                          // default depends on experiment
  std::uint64_t eval_seed = 0;
  std::string tasks_file;
  int steps = 1;      // feature-transfer fine-tune steps
  long budget = 100;  // dk-baseline optimization steps
  int workers = 1;
  std::string predictions_file;
  bool latent = false;  // dump latent rather than predictive variance
};

dkt::Checkpoint load_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  return dkt::load_checkpoint(in);
}

std::map<std::string, std::string> echo_map(const dkt::Checkpoint& ckpt) {
  std::map<std::string, std::string> m;
  for (const auto& [k, v] : ckpt.train_echo) m[k] = v;
  return m;
}

// tasks for one evaluation run: either parsed from a record file or sampled
std::function<dkt::RegressionTask(long)> regression_tasks(const EvalOpts& o,
                                                          dkt::SineMode mode,
                                                          long& n_tasks) {
  if (!o.tasks_file.empty()) {
    std::ifstream in(o.tasks_file, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open tasks file: " + o.tasks_file);
    auto tasks = std::make_shared<std::vector<dkt::RegressionTask>>();
    for (const dkt::TaskRecord& r : dkt::read_task_records(in))
      if (!r.is_classification) tasks->push_back(r.regression);
    if (tasks->empty()) throw usage_error("tasks file holds no regression tasks");
    n_tasks = static_cast<long>(tasks->size());
    return [tasks](long i) { return (*tasks)[i]; };
  }
  if (n_tasks <= 0) n_tasks = 1000;
  dkt::SineTaskConfig cfg = o.common.sine_config(o.eval_seed);
  return [cfg, mode](long i) {
    return dkt::sample_sine_task(cfg, mode, dkt::rng_stream::kEvalTasks, i);
  };
}

void dump_predictions(const EvalOpts& o, const KernelSpec& kernel, const dkt::Backbone* backbone,
                      const std::function<dkt::RegressionTask(long)>& tasks) {
  dkt::RegressionTask task = tasks(0);
  const int ns = static_cast<int>(task.support_x.size());
  const int nq = static_cast<int>(task.query_x.size());
  dkt::MeanVariance mv = dkt::predict_mean_variance(
      kernel, backbone, Tensor::from(ns, 1, task.support_x), Tensor::from(ns, 1, task.support_y),
      Tensor::from(nq, 1, task.query_x), !o.latent);
  std::ofstream out = open_output(o.predictions_file);
  out << provenance("eval-predictions",
                    {{"experiment", o.common.experiment},
                     {"mode", o.mode},
                     {"task_index", "0"},
                     {"variance", o.latent ? "latent" : "predictive"},
                     {"eval_seed", std::to_string(o.eval_seed)}})
      << "\n";
  out << "x,mean,variance,truth\n";
  for (int j = 0; j < nq; ++j)
    out << fmt(task.query_x[j]) << "," << fmt(mv.mean[j]) << "," << fmt(mv.variance[j]) << ","
        << fmt(task.query_y[j]) << "\n";
  std::cout << "predictions: " << o.predictions_file << "\n";
}

int cmd_eval(const EvalOpts& o) {
  const CommonOpts& c = o.common;
  const bool classification = c.is_classification();
  if (o.method == "dk-baseline" && classification)
    throw usage_error("dk-baseline evaluation is regression-only");
  if (o.method == "feature-transfer" && classification)
    throw usage_error("feature-transfer evaluation is regression-only");
  if (o.method != "dk-baseline" && o.checkpoints.empty())
    throw usage_error("eval needs --checkpoint (one per trained run)");
  if (o.method == "feature-transfer" && o.steps != 1 && o.steps != 100)
    throw usage_error("--steps must be 1 or 100");

  long n_tasks = o.n_tasks;
  if (n_tasks <= 0) n_tasks = classification ? 3000 : 1000;

  struct Run {
    std::uint64_t seed;
    double value;
  };
  std::vector<Run> runs;
  const std::string metric = classification ? "accuracy" : "mse";
  dkt::SineMode mode = classification ? dkt::SineMode::TestIn : parse_mode(o.mode);

  if (o.method == "dk-baseline") {
    const KernelFamily family = c.kernel_family();
    auto tasks = regression_tasks(o, mode, n_tasks);
    for (std::uint64_t seed : o.seeds) {
      dkt::TrainConfig cfg;
      cfg.seed = seed;
      std::vector<double> per_task(n_tasks);
      dkt::detail::parallel_for_index(n_tasks, o.workers, [&](int, long i) {
        per_task[i] = dkt::train_dk_baseline(tasks(i), family, o.budget, cfg).query_mse;
      });
      runs.push_back({seed, mean_of(per_task)});
    }
  } else {
    for (const std::string& path : o.checkpoints) {
      dkt::Checkpoint ckpt = load_checkpoint_file(path);
      if (ckpt.experiment != c.experiment)
        throw usage_error("checkpoint " + path + " was trained for experiment '" +
                          ckpt.experiment + "', not '" + c.experiment + "'");
      if (ckpt.method != o.method)
        throw usage_error("checkpoint " + path + " holds method '" + ckpt.method + "', not '" +
                          o.method + "'");
      if (o.method == "feature-transfer") {
        dkt::Backbone net = dkt::checkpoint_backbone(ckpt);
        dkt::FeatureTransferModel model{net.config, net.params};
        auto tasks = regression_tasks(o, mode, n_tasks);
        std::vector<double> per_task(n_tasks);
        dkt::detail::parallel_for_index(n_tasks, o.workers, [&](int, long i) {
          per_task[i] = dkt::finetune_and_eval(model, tasks(i), o.steps);
        });
        runs.push_back({ckpt.seed, mean_of(per_task)});
      } else if (!classification) {
        KernelSpec kernel = dkt::checkpoint_kernel(ckpt);
        dkt::Backbone backbone = dkt::checkpoint_backbone(ckpt);
        auto tasks = regression_tasks(o, mode, n_tasks);
        dkt::RegressionEval eval =
            dkt::evaluate_regression_tasks(kernel, &backbone, tasks, n_tasks, o.workers);
        runs.push_back({ckpt.seed, eval.mean_mse});
        if (!o.predictions_file.empty() && runs.size() == 1)
          dump_predictions(o, kernel, &backbone, tasks);
      } else {
        KernelSpec kernel = dkt::checkpoint_kernel(ckpt);
        dkt::Backbone backbone = dkt::checkpoint_backbone(ckpt);
        dkt::ClassificationEval eval;
        if (!o.tasks_file.empty()) {
          std::ifstream in(o.tasks_file, std::ios::binary);
          if (!in) throw std::runtime_error("cannot open tasks file: " + o.tasks_file);
          auto tasks = std::make_shared<std::vector<dkt::ClassificationTask>>();
          for (const dkt::TaskRecord& r : dkt::read_task_records(in))
            if (r.is_classification) tasks->push_back(r.classification);
          if (tasks->empty()) throw usage_error("tasks file holds no classification tasks");
          n_tasks = static_cast<long>(tasks->size());
          eval = dkt::evaluate_classification_tasks(
              kernel, &backbone, [tasks](long i) { return (*tasks)[i]; }, (*tasks)[0].ways,
              (*tasks)[0].query_per_class, n_tasks, o.workers);
        } else {
          auto echo = echo_map(ckpt);
          dkt::SyntheticFamilyConfig family = c.family_config(o.eval_seed);
          if (echo.count("split_seed"))
            family.split_seed = std::stoull(echo.at("split_seed"));
          eval = dkt::evaluate_classification(kernel, &backbone, family, c.ways, c.shots,
                                              c.query_per_class, dkt::ClassSplit::Test, n_tasks,
                                              o.workers);
        }
        runs.push_back({ckpt.seed, eval.mean_accuracy});
      }
    }
  }

  std::vector<double> values;
  for (const Run& r : runs) values.push_back(r.value);
  const double mu = mean_of(values);
  const double sd = std_of(values);

  const fs::path results_path = fs::path(c.out_dir) / "results.csv";
  std::ofstream out = open_output(results_path);
  out << provenance("eval", {{"experiment", c.experiment},
                             {"method", o.method},
                             {"kernel", o.method == "feature-transfer"
                                            ? "none"
                                            : dkt::kernel_family_name(c.kernel_family())},
                             {"mode", classification ? "test" : o.mode},
                             {"n_tasks", std::to_string(n_tasks)},
                             {"eval_seed", std::to_string(o.eval_seed)},
                             {"steps", std::to_string(o.steps)},
                             {"budget", std::to_string(o.budget)},
                             {"workers", std::to_string(o.workers)},
                             {"tasks_file", o.tasks_file.empty() ? "none" : o.tasks_file},
                             {"seeds", o.method == "dk-baseline" ? join_u64(o.seeds) : "from-checkpoints"},
                             {"runs", std::to_string(runs.size())}})
      << "\n";
  out << "row_type,seed,metric,value,n_tasks\n";
  for (const Run& r : runs)
    out << "run," << r.seed << "," << metric << "," << fmt(r.value) << "," << n_tasks << "\n";
  out << "aggregate,," << metric << "_mean," << fmt(mu) << "," << runs.size() << "\n";
  out << "aggregate,," << metric << "_std," << fmt(sd) << "," << runs.size() << "\n";

  std::cout << "results: " << results_path.string() << "\n";
  std::cout << metric << ": " << mu << " +/- " << sd << " over " << runs.size() << " run(s)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

int cmd_gradcheck(std::uint64_t seed) {
  struct Check {
    std::string name;
    double max_err;
  };
  std::vector<Check> checks;

  auto gram_check = [&](KernelFamily family) {
    dkt::Rng rng = dkt::Rng::keyed(seed, 17, static_cast<std::uint64_t>(family));
    dkt::MlpConfig cfg{2, {6}, 4, dkt::Activation::Tanh, seed + 1};
    dkt::Backbone bb = dkt::Backbone::make(cfg);
    KernelSpec spec = KernelSpec::make(family, 4, true);
    std::vector<double> xv(8), wv(16);
    for (double& v : xv) v = rng.uniform(-2.0, 2.0);
    for (double& v : wv) v = rng.uniform(-1.0, 1.0);
    Tensor x = Tensor::from(4, 2, xv);
    Tensor w = Tensor::from(4, 4, wv);
    std::vector<Tensor> params = spec.trainable();
    for (Tensor& t : bb.trainable()) params.push_back(t);
    auto f = [&] { return dkt::sum(dkt::mul(dkt::gram(spec, &bb, x, x).values, w)); };
    checks.push_back({"gram/" + dkt::kernel_family_name(family),
                      dkt::grad_check(f, params, 1e-5)});
  };
  for (const auto& [name, family] : dkt::kernel_name_table()) gram_check(family);

  {
    dkt::Rng rng = dkt::Rng::keyed(seed, 18, 0);
    dkt::MlpConfig cfg{1, {8, 8}, 4, dkt::Activation::ReLU, seed + 2};
    dkt::Backbone bb = dkt::Backbone::make(cfg);
    std::vector<double> xv(6);
    for (double& v : xv) v = rng.uniform(-3.0, 3.0);
    Tensor x = Tensor::from(6, 1, xv);
    std::vector<Tensor> params = bb.trainable();
    auto f = [&] {
      Tensor h = bb(x);
      return dkt::sum(dkt::mul(h, h));
    };
    checks.push_back({"backbone/forward", dkt::grad_check(f, params, 1e-5)});
  }

  for (KernelFamily family : {KernelFamily::RBF, KernelFamily::Spectral}) {
    dkt::SineTaskConfig tcfg;
    tcfg.seed = seed;
    tcfg.amplitude_hi = 1.0;  // keeps the finite-difference stencil accurate
    dkt::RegressionTask task = dkt::sample_sine_task(tcfg, dkt::SineMode::Train, 19, 0);
    dkt::MlpConfig cfg{1, {8, 8}, 4, dkt::Activation::Tanh, seed + 3};
    dkt::Backbone bb = dkt::Backbone::make(cfg);
    KernelSpec spec = KernelSpec::make(family, 4, true);
    spec.raw_noise = Tensor::scalar(dkt::softplus_inverse(0.25), true);
    std::vector<Tensor> params = spec.trainable();
    for (Tensor& t : bb.trainable()) params.push_back(t);
    auto f = [&] { return dkt_task_loss(spec, &bb, task); };
    checks.push_back({"loss/regression/" + dkt::kernel_family_name(family),
                      dkt::grad_check(f, params, 1e-5)});
  }

  {
    dkt::SyntheticFamilyConfig family;
    family.seed = seed;
    dkt::ClassificationTask task =
        dkt::sample_classification_task(family, 3, 1, 2, dkt::ClassSplit::Train, 20, 0);
    dkt::MlpConfig cfg{2, {6}, 4, dkt::Activation::Tanh, seed + 4};
    dkt::Backbone bb = dkt::Backbone::make(cfg);
    KernelSpec spec = KernelSpec::make(KernelFamily::BNCosSim, 4, true);
    std::vector<Tensor> params = spec.trainable();
    for (Tensor& t : bb.trainable()) params.push_back(t);
    auto f = [&] { return dkt_task_loss(spec, &bb, task); };
    checks.push_back({"loss/classification/bncossim", dkt::grad_check(f, params, 1e-5)});
  }

  bool all_pass = true;
  for (const Check& chk : checks) {
    const bool pass = chk.max_err < 1e-4;
    all_pass = all_pass && pass;
    std::cout << "check " << chk.name << " max_rel_err " << fmt(chk.max_err) << " "
              << (pass ? "PASS" : "FAIL") << "\n";
  }
  std::cout << (all_pass ? "gradcheck: all checks passed\n" : "gradcheck: FAILURES above\n");
  return all_pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

struct CalibrateOpts {
  CommonOpts common;
  std::string checkpoint;
  long n_tasks = 3000;
  std::uint64_t calib_seed = 100;
  std::uint64_t test_seed = 200;
  int bins = 15;
  int workers = 1;
  std::string out_file;
};

int cmd_calibrate(const CalibrateOpts& o) {
  if (o.calib_seed == o.test_seed)
    throw usage_error("--calib-seed and --test-seed must differ (episode sets must be disjoint)");
  dkt::Checkpoint ckpt = load_checkpoint_file(o.checkpoint);
  if (ckpt.experiment != "synth-classification")
    throw usage_error("calibrate needs a synth-classification checkpoint, got '" +
                      ckpt.experiment + "'");
  KernelSpec kernel = dkt::checkpoint_kernel(ckpt);
  dkt::Backbone backbone = dkt::checkpoint_backbone(ckpt);
  auto echo = echo_map(ckpt);
  const int ways = echo.count("ways") ? std::stoi(echo.at("ways")) : o.common.ways;
  const int shots = echo.count("shots") ? std::stoi(echo.at("shots")) : o.common.shots;
  const int qpc = echo.count("query_per_class") ? std::stoi(echo.at("query_per_class"))
                                                : o.common.query_per_class;

  auto collect = [&](std::uint64_t seed) {
    dkt::SyntheticFamilyConfig family = o.common.family_config(seed);
    if (echo.count("split_seed")) family.split_seed = std::stoull(echo.at("split_seed"));
    return dkt::evaluate_classification(kernel, &backbone, family, ways, shots, qpc,
                                        dkt::ClassSplit::Test, o.n_tasks, o.workers, true);
  };
  dkt::ClassificationEval calib = collect(o.calib_seed);
  dkt::ClassificationEval test = collect(o.test_seed);

  dkt::TemperatureFit fit =
      dkt::calibrate_temperature(calib.query_means, calib.query_labels, ways);
  auto report_for = [&](const dkt::ClassificationEval& eval, double temperature) {
    std::vector<double> probs = dkt::softmax_probs(eval.query_means, ways, temperature);
    return dkt::ece(probs, eval.query_labels, ways, o.bins);
  };
  dkt::CalibrationReport calib_before = report_for(calib, 1.0);
  dkt::CalibrationReport calib_after = report_for(calib, fit.temperature);
  dkt::CalibrationReport test_before = report_for(test, 1.0);
  dkt::CalibrationReport test_after = report_for(test, fit.temperature);

  nlohmann::ordered_json doc;
  doc["tool"] = kVersion;
  doc["command"] = "calibrate";
  doc["checkpoint"] = o.checkpoint;
  doc["ways"] = ways;
  doc["bin_count"] = o.bins;
  doc["n_tasks_per_split"] = o.n_tasks;
  doc["seeds_disjoint"] = true;
  doc["temperature"] = fit.temperature;
  doc["calibration_split"] = {
      {"seed", o.calib_seed},       {"accuracy", calib.mean_accuracy},
      {"nll_before", fit.nll_before}, {"nll_after", fit.nll_after},
      {"ece_before", calib_before.ece}, {"ece_after", calib_after.ece}};
  doc["test_split"] = {{"seed", o.test_seed},
                       {"accuracy", test.mean_accuracy},
                       {"ece_before", test_before.ece},
                       {"ece_after", test_after.ece}};
  nlohmann::ordered_json bins = nlohmann::ordered_json::array();
  for (const auto& b : test_after.per_bin)
    bins.push_back({{"confidence", b.confidence}, {"accuracy", b.accuracy}, {"weight", b.weight}});
  doc["test_split_bins_after"] = bins;

  const std::string text = doc.dump(2) + "\n";
  if (!o.out_file.empty()) {
    std::ofstream out = open_output(o.out_file);
    out << text;
    std::cout << "report: " << o.out_file << "\n";
  }
  std::cout << text;
  return 0;
}

// ---------------------------------------------------------------------------
// dump-tasks
// ---------------------------------------------------------------------------

struct DumpOpts {
  CommonOpts common;
  std::string mode = "in-range";
  std::string split = "test";
  long n_tasks = 100;
  std::string out_file = "tasks.txt";
};

int cmd_dump_tasks(const DumpOpts& o) {
  const CommonOpts& c = o.common;
  std::ofstream out = open_output(o.out_file);
  out << provenance("dump-tasks", {{"experiment", c.experiment},
                                   {"mode", c.is_classification() ? o.split : o.mode},
                                   {"n_tasks", std::to_string(o.n_tasks)},
                                   {"seed", std::to_string(c.seed)}})
      << "\n";
  if (!c.is_classification()) {
    dkt::SineMode mode = parse_mode(o.mode);
    dkt::SineTaskConfig cfg = c.sine_config(c.seed);
    for (long i = 0; i < o.n_tasks; ++i)
      out << dkt::task_to_record(
                 dkt::sample_sine_task(cfg, mode, dkt::rng_stream::kEvalTasks, i))
          << "\n";
  } else {
    if (o.split != "train" && o.split != "test")
      throw usage_error("--split must be train or test");
    dkt::ClassSplit split = o.split == "train" ? dkt::ClassSplit::Train : dkt::ClassSplit::Test;
    dkt::SyntheticFamilyConfig cfg = c.family_config(c.seed);
    for (long i = 0; i < o.n_tasks; ++i)
      out << dkt::task_to_record(dkt::sample_classification_task(
                 cfg, c.ways, c.shots, c.query_per_class, split, dkt::rng_stream::kEvalTasks, i))
          << "\n";
  }
  std::cout << "tasks: " << o.out_file << " (" << o.n_tasks << " tasks)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// benchmark
// ---------------------------------------------------------------------------

struct BenchmarkOpts {
  CommonOpts common;
  long iterations = 20000;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  long n_tasks = 1000;
  long budget = 100;
  int workers = 1;
};

int cmd_benchmark(const BenchmarkOpts& o) {
  const CommonOpts& c = o.common;
  dkt::TrainConfig base_cfg;
  base_cfg.iterations = o.iterations;

  struct Row {
    std::string method, kernel, mode;
    std::vector<double> values;
  };
  std::vector<Row> rows;
  auto row_values = [&rows](const std::string& method, const std::string& kernel,
                            const std::string& mode) -> std::vector<double>& {
    for (Row& r : rows)
      if (r.method == method && r.kernel == kernel && r.mode == mode) return r.values;
    rows.push_back({method, kernel, mode, {}});
    return rows.back().values;
  };
  const std::vector<std::pair<std::string, dkt::SineMode>> modes{
      {"in-range", dkt::SineMode::TestIn}, {"out-range", dkt::SineMode::TestOut}};

  for (std::uint64_t seed : o.seeds) {
    dkt::SineTaskConfig tasks = c.sine_config(seed);
    dkt::SineTaskConfig eval_tasks = c.sine_config(0);  // shared eval set
    dkt::TrainConfig cfg = base_cfg;
    cfg.seed = seed;

    for (KernelFamily family : {KernelFamily::Spectral, KernelFamily::RBF}) {
      dkt::DktModel model = dkt::make_sine_dkt_model(family, seed);
      dkt::train_sine_dkt(model, tasks, cfg);
      for (const auto& [mode_name, mode] : modes) {
        dkt::RegressionEval eval = dkt::evaluate_regression(
            model.kernel, &model.backbone, eval_tasks, mode, o.n_tasks, o.workers);
        row_values("dkt", dkt::kernel_family_name(family), mode_name).push_back(eval.mean_mse);
      }
      std::cout << "trained dkt/" << dkt::kernel_family_name(family) << " seed " << seed << "\n";
    }

    std::function<dkt::RegressionTask(long)> source = [tasks](long i) {
      return dkt::sample_sine_task(tasks, dkt::SineMode::Train, dkt::rng_stream::kTrainTasks, i);
    };
    dkt::FeatureTransferModel ft = dkt::train_feature_transfer(source, cfg);
    for (int steps : {1, 100}) {
      for (const auto& [mode_name, mode] : modes) {
        std::vector<double> per_task(o.n_tasks);
        dkt::detail::parallel_for_index(o.n_tasks, o.workers, [&](int, long i) {
          per_task[i] = dkt::finetune_and_eval(
              ft, dkt::sample_sine_task(eval_tasks, mode, dkt::rng_stream::kEvalTasks, i), steps);
        });
        row_values("feature-transfer/" + std::to_string(steps), "none", mode_name)
            .push_back(mean_of(per_task));
      }
    }
    std::cout << "trained feature-transfer seed " << seed << "\n";

    for (KernelFamily family : {KernelFamily::RBF, KernelFamily::Spectral}) {
      for (const auto& [mode_name, mode] : modes) {
        std::vector<double> per_task(o.n_tasks);
        dkt::detail::parallel_for_index(o.n_tasks, o.workers, [&](int, long i) {
          dkt::TrainConfig dkb_cfg;
          dkb_cfg.seed = seed;
          per_task[i] =
              dkt::train_dk_baseline(
                  dkt::sample_sine_task(eval_tasks, mode, dkt::rng_stream::kEvalTasks, i), family,
                  o.budget, dkb_cfg)
                  .query_mse;
        });
        row_values("dk-baseline", dkt::kernel_family_name(family), mode_name)
            .push_back(mean_of(per_task));
      }
      std::cout << "evaluated dk-baseline/" << dkt::kernel_family_name(family) << " seed " << seed
                << "\n";
    }
  }

  const fs::path path = fs::path(c.out_dir) / "benchmark.csv";
  std::ofstream out = open_output(path);
  out << provenance("benchmark", {{"experiment", c.experiment},
                                  {"iterations", std::to_string(o.iterations)},
                                  {"seeds", join_u64(o.seeds)},
                                  {"n_tasks", std::to_string(o.n_tasks)},
                                  {"budget", std::to_string(o.budget)},
                                  {"noise_sigma", fmt(c.noise_sigma)},
                                  {"workers", std::to_string(o.workers)}})
      << "\n";
  out << "method,kernel,mode,mse_mean,mse_std,runs\n";
  for (const Row& r : rows)
    out << r.method << "," << r.kernel << "," << r.mode << "," << fmt(mean_of(r.values)) << ","
        << fmt(std_of(r.values)) << "," << r.values.size() << "\n";
  std::cout << "benchmark: " << path.string() << "\n";
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------

int main(int argc, char** argv) {
  CLI::App app{std::string(kVersion) +
               " - deep-kernel GP few-shot regression and classification lab"};
  app.require_subcommand(1);

  TrainOpts train_opts;
  CLI::App* train = app.add_subcommand("train", "train a model and write a checkpoint");
  add_common(train, train_opts.common);
  train->add_option("--method", train_opts.method, "dkt | feature-transfer");
  train->add_option("--iterations", train_opts.iterations, "training iterations");
  train->add_option("--alpha", train_opts.alpha, "kernel hyperparameter step size");
  train->add_option("--beta", train_opts.beta, "backbone step size");
  train->add_option("--eval-every", train_opts.eval_every, "validation cadence (classification)");
  train->add_flag("--trace", train_opts.trace, "write per-iteration loss CSV");

  EvalOpts eval_opts;
  CLI::App* eval = app.add_subcommand("eval", "evaluate checkpoints over test tasks");
  add_common(eval, eval_opts.common);
  eval->add_option("--method", eval_opts.method, "dkt | feature-transfer | dk-baseline");
  eval->add_option("--mode", eval_opts.mode, "in-range | out-range");
  eval->add_option("--checkpoint", eval_opts.checkpoints, "trained checkpoint (repeatable)");
  eval->add_option("--seeds", eval_opts.seeds, "dk-baseline run seeds")->delimiter(',');
  eval->add_option("--n-tasks", eval_opts.n_tasks, "test tasks per run");
  eval->add_option("--eval-seed", eval_opts.eval_seed, "seed for the test task stream");
  eval->add_option("--tasks-file", eval_opts.tasks_file, "evaluate on dumped task records");
  eval->add_option("--steps", eval_opts.steps, "feature-transfer fine-tune steps (1 or 100)");
  eval->add_option("--budget", eval_opts.budget, "dk-baseline per-task optimization steps");
  eval->add_option("--workers", eval_opts.workers, "evaluation worker threads");
  eval->add_option("--predictions", eval_opts.predictions_file,
                   "dump x,mean,variance,truth for the first task");
  eval->add_flag("--latent", eval_opts.latent,
                 "dump latent (noise-free) instead of predictive variance");

  std::uint64_t gradcheck_seed = 0;
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  gradcheck->add_option("--seed", gradcheck_seed, "randomization seed")->envname("DKTLAB_SEED");

  CalibrateOpts cal_opts;
  CLI::App* calibrate =
      app.add_subcommand("calibrate", "temperature scaling + ECE on a classification model");
  add_common(calibrate, cal_opts.common, false);
  cal_opts.common.experiment = "synth-classification";
  calibrate->add_option("--checkpoint", cal_opts.checkpoint, "classification checkpoint")
      ->required();
  calibrate->add_option("--n-tasks", cal_opts.n_tasks, "episodes per split");
  calibrate->add_option("--calib-seed", cal_opts.calib_seed, "calibration episode seed");
  calibrate->add_option("--test-seed", cal_opts.test_seed, "test episode seed");
  calibrate->add_option("--bins", cal_opts.bins, "ECE bin count");
  calibrate->add_option("--workers", cal_opts.workers, "evaluation worker threads");
  calibrate->add_option("--report", cal_opts.out_file, "write the JSON report here");

  DumpOpts dump_opts;
  CLI::App* dump = app.add_subcommand("dump-tasks", "write episodic tasks as text records");
  add_common(dump, dump_opts.common, false);
  dump->add_option("--mode", dump_opts.mode, "in-range | out-range (regression)");
  dump->add_option("--split", dump_opts.split, "train | test (classification)");
  dump->add_option("--n-tasks", dump_opts.n_tasks, "task count");
  dump->add_option("--file", dump_opts.out_file, "output file");

  BenchmarkOpts bench_opts;
  CLI::App* bench = app.add_subcommand("benchmark", "run the full regression result grid");
  add_common(bench, bench_opts.common, false);
  bench->add_option("--iterations", bench_opts.iterations, "training iterations per method");
  bench->add_option("--seeds", bench_opts.seeds, "training seeds")->delimiter(',');
  bench->add_option("--n-tasks", bench_opts.n_tasks, "evaluation tasks per mode");
  bench->add_option("--budget", bench_opts.budget, "dk-baseline per-task steps");
  bench->add_option("--workers", bench_opts.workers, "evaluation worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) return cmd_train(train_opts);
    if (eval->parsed()) return cmd_eval(eval_opts);
    if (gradcheck->parsed()) return cmd_gradcheck(gradcheck_seed);
    if (calibrate->parsed()) return cmd_calibrate(cal_opts);
    if (dump->parsed()) return cmd_dump_tasks(dump_opts);
    if (bench->parsed()) return cmd_benchmark(bench_opts);
  } catch (const usage_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const dkt::training_aborted& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
