#pragma once

// Episodic training: one task per gradient step, kernel hyperparameters and
// backbone weights updated by separate Adam states with separate step sizes
// (the kernel rate one order of magnitude below the network rate).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "dkt/gp.hpp"
#include "dkt/kernels.hpp"
#include "dkt/tasks.hpp"
#include "dkt/tensor.hpp"

namespace dkt {

struct training_aborted : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  long iterations = 20000;  // desk-scale default; full-scale runs pass 5e5
  double alpha = 1e-4;      // kernel hyperparameter step size
  double beta = 1e-3;       // backbone step size
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  long eval_every = 0;  // validation cadence; 0 disables model selection
  std::vector<double> jitter_schedule{1e-6, 1e-4, 1e-2};
  double max_skip_fraction = 0.01;

  void validate() const {
    if (iterations < 0) throw std::invalid_argument("iterations must be >= 0");
    if (!(alpha > 0.0) || !(beta > 0.0))
      throw std::invalid_argument("step sizes must be positive");
  }
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<double> m, v;
  long step = 0;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

// Standard update with bias correction. A non-finite gradient skips the whole
// step (with a warning) and leaves the state untouched; returns whether the
// step was applied.
inline bool adam_step(AdamState& state, std::span<double> params, std::span<const double> grads,
                      double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw std::invalid_argument("adam_step: length mismatch");
  for (double g : grads)
    if (!std::isfinite(g)) {
      std::cerr << "[dkt] warning: non-finite gradient, skipping step\n";
      return false;
    }
  state.step += 1;
  const double c1 = 1.0 - std::pow(beta1, state.step);
  const double c2 = 1.0 - std::pow(beta2, state.step);
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grads[i];
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
  return true;
}

// ---------------------------------------------------------------------------
// Flat views over tensor groups
// ---------------------------------------------------------------------------

class ParamGroup {
 public:
  ParamGroup() = default;
  explicit ParamGroup(std::vector<Tensor> tensors) : tensors_(std::move(tensors)) {
    for (const Tensor& t : tensors_) total_ += t.size();
  }

  std::size_t size() const { return total_; }
  bool empty() const { return total_ == 0; }

  void zero_grads() {
    for (Tensor& t : tensors_) t.zero_grad();
  }

  std::vector<double> gather_values() const {
    std::vector<double> out;
    out.reserve(total_);
    for (const Tensor& t : tensors_) out.insert(out.end(), t.values().begin(), t.values().end());
    return out;
  }

  std::vector<double> gather_grads() const {
    std::vector<double> out;
    out.reserve(total_);
    for (const Tensor& t : tensors_) out.insert(out.end(), t.grad().begin(), t.grad().end());
    return out;
  }

  void scatter_values(std::span<const double> flat) {
    if (flat.size() != total_) throw std::invalid_argument("scatter_values: length mismatch");
    std::size_t pos = 0;
    for (Tensor& t : tensors_) {
      auto vals = t.mutable_values();
      for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = flat[pos + i];
      pos += vals.size();
    }
  }

 private:
  std::vector<Tensor> tensors_;
  std::size_t total_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainOutcome {
  std::vector<double> loss_trace;  // one entry per iteration; NaN for skipped steps
  long skipped = 0;
  long chol_failures = 0;
  double best_validation = 0.0;
  bool restored_best = false;
};

// Optimizes the kernel hyperparameters θ and backbone weights φ by sampling
// one task per step and descending the pooled negative log marginal
// likelihood. An optional validation callback (higher is better) selects the
// best checkpoint at eval_every cadence; otherwise the final iterate wins.
template <typename TaskT>
TrainOutcome train_dkt(const std::function<TaskT(long)>& task_source, KernelSpec& kernel,
                       Backbone* backbone, const TrainConfig& cfg,
                       const std::function<double()>& validate = {}) {
  cfg.validate();
  ParamGroup theta(kernel.trainable());
  ParamGroup phi(backbone ? backbone->trainable() : std::vector<Tensor>{});
  AdamState state_theta(theta.size());
  AdamState state_phi(phi.size());

  TrainOutcome out;
  out.loss_trace.reserve(cfg.iterations);
  std::vector<double> best_theta, best_phi;
  bool has_best = false;

  for (long it = 0; it < cfg.iterations; ++it) {
    TaskT task = task_source(it);
    double loss_value = std::numeric_limits<double>::quiet_NaN();
    bool applied = false;
    try {
      Tensor loss = dkt_task_loss(kernel, backbone, task, cfg.jitter_schedule);
      loss_value = loss.value();
      if (std::isfinite(loss_value)) {
        theta.zero_grads();
        phi.zero_grads();
        backward(loss);
        std::vector<double> theta_vals = theta.gather_values();
        std::vector<double> theta_grads = theta.gather_grads();
        std::vector<double> phi_vals = phi.gather_values();
        std::vector<double> phi_grads = phi.gather_grads();
        bool finite = true;
        for (double g : theta_grads)
          if (!std::isfinite(g)) finite = false;
        for (double g : phi_grads)
          if (!std::isfinite(g)) finite = false;
        if (finite) {
          adam_step(state_theta, theta_vals, theta_grads, cfg.alpha, cfg.adam_beta1,
                    cfg.adam_beta2, cfg.adam_eps);
          theta.scatter_values(theta_vals);
          if (!phi.empty()) {
            adam_step(state_phi, phi_vals, phi_grads, cfg.beta, cfg.adam_beta1, cfg.adam_beta2,
                      cfg.adam_eps);
            phi.scatter_values(phi_vals);
          }
          applied = true;
        }
      }
    } catch (const not_positive_definite&) {
      ++out.chol_failures;
    }
    out.loss_trace.push_back(loss_value);
    if (!applied) {
      ++out.skipped;
      const long done = it + 1;
      if (done >= 100 && out.skipped > cfg.max_skip_fraction * done)
        throw training_aborted("training aborted: " + std::to_string(out.skipped) + "/" +
                               std::to_string(done) + " steps skipped (" +
                               std::to_string(out.chol_failures) + " factorization failures)");
    }
    if (validate && cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0) {
      const double score = validate();
      if (!has_best || score > out.best_validation) {
        out.best_validation = score;
        best_theta = theta.gather_values();
        best_phi = phi.gather_values();
        has_best = true;
      }
    }
  }

  if (has_best) {
    // final validation probe so a late improvement is not thrown away
    const double final_score = validate ? validate() : 0.0;
    if (final_score <= out.best_validation) {
      theta.scatter_values(best_theta);
      phi.scatter_values(best_phi);
      out.restored_best = true;
    } else {
      out.best_validation = final_score;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace detail {

// Static block partition over [0, n); results must be written by index so the
// reduction is deterministic regardless of the worker count.
inline void parallel_for_index(long n, int workers, const std::function<void(int, long)>& fn) {
  if (workers <= 1) {
    for (long i = 0; i < n; ++i) fn(0, i);
    return;
  }
  std::vector<std::thread> pool;
  const long chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const long lo = w * chunk;
    const long hi = std::min<long>(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([w, lo, hi, &fn] {
      for (long i = lo; i < hi; ++i) fn(w, i);
    });
  }
  for (std::thread& t : pool) t.join();
}

}  // namespace detail

struct RegressionEval {
  std::vector<double> per_task_mse;
  double mean_mse = 0.0;
};

// Mean query MSE of the support-conditioned posterior mean over the given
// tasks. Prediction runs on detached parameter snapshots, one per worker.
inline RegressionEval evaluate_regression_tasks(const KernelSpec& kernel,
                                                const Backbone* backbone,
                                                const std::function<RegressionTask(long)>& tasks,
                                                long n_tasks, int workers = 1) {
  RegressionEval eval;
  eval.per_task_mse.assign(n_tasks, 0.0);
  std::vector<KernelSpec> kernels;
  std::vector<Backbone> backbones;
  const int w_count = std::max(workers, 1);
  kernels.reserve(w_count);
  for (int w = 0; w < w_count; ++w) {
    kernels.push_back(kernel.clone(false));
    if (backbone) backbones.push_back(backbone->clone(false));
  }
  detail::parallel_for_index(n_tasks, workers, [&](int w, long i) {
    RegressionTask task = tasks(i);
    const int ns = static_cast<int>(task.support_x.size());
    const int nq = static_cast<int>(task.query_x.size());
    MeanVariance mv = predict_mean_variance(
        kernels[w], backbone ? &backbones[w] : nullptr, Tensor::from(ns, 1, task.support_x),
        Tensor::from(ns, 1, task.support_y), Tensor::from(nq, 1, task.query_x), true);
    double acc = 0.0;
    for (int j = 0; j < nq; ++j) {
      const double d = mv.mean[j] - task.query_y[j];
      acc += d * d;
    }
    eval.per_task_mse[i] = acc / nq;
  });
  for (double v : eval.per_task_mse) eval.mean_mse += v;
  if (n_tasks > 0) eval.mean_mse /= static_cast<double>(n_tasks);
  return eval;
}

inline RegressionEval evaluate_regression(const KernelSpec& kernel, const Backbone* backbone,
                                          const SineTaskConfig& task_cfg, SineMode mode,
                                          long n_tasks, int workers = 1) {
  return evaluate_regression_tasks(
      kernel, backbone,
      [&task_cfg, mode](long i) {
        return sample_sine_task(task_cfg, mode, rng_stream::kEvalTasks, i);
      },
      n_tasks, workers);
}

struct ClassificationEval {
  std::vector<double> per_task_accuracy;
  double mean_accuracy = 0.0;
  int ways = 0;
  // retained per query point (task-major order) for calibration
  std::vector<double> query_means;  // row-major (Σ queries)×ways
  std::vector<int> query_labels;
};

inline ClassificationEval evaluate_classification_tasks(
    const KernelSpec& kernel, const Backbone* backbone,
    const std::function<ClassificationTask(long)>& tasks, int ways, int query_per_class,
    long n_tasks, int workers = 1, bool collect_outputs = false) {
  ClassificationEval eval;
  eval.ways = ways;
  eval.per_task_accuracy.assign(n_tasks, 0.0);
  const long queries_per_task = static_cast<long>(ways) * query_per_class;
  if (collect_outputs) {
    eval.query_means.assign(static_cast<std::size_t>(n_tasks) * queries_per_task * ways, 0.0);
    eval.query_labels.assign(static_cast<std::size_t>(n_tasks) * queries_per_task, 0);
  }
  std::vector<KernelSpec> kernels;
  std::vector<Backbone> backbones;
  const int w_count = std::max(workers, 1);
  for (int w = 0; w < w_count; ++w) {
    kernels.push_back(kernel.clone(false));
    if (backbone) backbones.push_back(backbone->clone(false));
  }
  detail::parallel_for_index(n_tasks, workers, [&](int w, long i) {
    ClassificationTask task = tasks(i);
    ClassificationResult res =
        classify(kernels[w], backbone ? &backbones[w] : nullptr, task);
    long correct = 0;
    for (int q = 0; q < res.query_count; ++q)
      if (res.predictions[q] == task.query_labels[q]) ++correct;
    eval.per_task_accuracy[i] = static_cast<double>(correct) / res.query_count;
    if (collect_outputs) {
      const std::size_t base = static_cast<std::size_t>(i) * queries_per_task;
      for (long q = 0; q < static_cast<long>(task.query_labels.size()) && q < queries_per_task;
           ++q) {
        eval.query_labels[base + q] = task.query_labels[q];
        for (int c = 0; c < ways; ++c)
          eval.query_means[(base + q) * ways + c] = res.mean_at(static_cast<int>(q), c);
      }
    }
  });
  for (double v : eval.per_task_accuracy) eval.mean_accuracy += v;
  if (n_tasks > 0) eval.mean_accuracy /= static_cast<double>(n_tasks);
  return eval;
}

inline ClassificationEval evaluate_classification(const KernelSpec& kernel,
                                                  const Backbone* backbone,
                                                  const SyntheticFamilyConfig& family, int ways,
                                                  int shots, int query_per_class, ClassSplit split,
                                                  long n_tasks, int workers = 1,
                                                  bool collect_outputs = false,
                                                  std::uint64_t stream = rng_stream::kEvalTasks) {
  return evaluate_classification_tasks(
      kernel, backbone,
      [&family, ways, shots, query_per_class, split, stream](long i) {
        return sample_classification_task(family, ways, shots, query_per_class, split, stream, i);
      },
      ways, query_per_class, n_tasks, workers, collect_outputs);
}

}  // namespace dkt
