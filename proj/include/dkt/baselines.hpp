#pragma once

// Comparison baselines for the regression benchmark: a feature-transfer MLP
// (pretrain across tasks, fine-tune on each new support set) and a deep-kernel
// GP fit from scratch on every task's support with no transfer.

#include <cmath>
#include <functional>
#include <vector>

#include "dkt/backbone.hpp"
#include "dkt/gp.hpp"
#include "dkt/metrics.hpp"
#include "dkt/tasks.hpp"
#include "dkt/trainer.hpp"

namespace dkt {

// ---------------------------------------------------------------------------
// Feature transfer
// ---------------------------------------------------------------------------

struct FeatureTransferModel {
  MlpConfig config;  // scalar output head
  ParamSet params;

  Tensor predict(const Tensor& x) const { return forward(config, params, x); }

  FeatureTransferModel clone() const {
    FeatureTransferModel m;
    m.config = config;
    for (const Layer& l : params)
      m.params.push_back({l.weight.clone(true), l.bias.clone(true)});
    return m;
  }
};

inline MlpConfig feature_transfer_config(std::uint64_t seed) {
  return MlpConfig{1, {40, 40}, 1, Activation::ReLU, seed};
}

namespace detail {

inline Tensor squared_error_loss(const FeatureTransferModel& model, const Tensor& x,
                                 const Tensor& y) {
  Tensor resid = sub(forward(model.config, model.params, x), y);
  return scale(sum(mul(resid, resid)), 1.0 / x.rows());
}

}  // namespace detail

// One network trained to predict the outputs over all tasks: each iteration
// takes a full-batch Adam step on one sampled task's pooled points, so the
// total sample budget matches an episodic run of equal iteration count.
inline FeatureTransferModel train_feature_transfer(
    const std::function<RegressionTask(long)>& task_source, const TrainConfig& cfg) {
  cfg.validate();
  FeatureTransferModel model{feature_transfer_config(cfg.seed),
                             init_mlp(feature_transfer_config(cfg.seed))};
  ParamGroup group(Backbone{model.config, model.params}.trainable());
  AdamState state(group.size());
  for (long it = 0; it < cfg.iterations; ++it) {
    RegressionTask task = task_source(it);
    std::vector<double> xs(task.support_x);
    xs.insert(xs.end(), task.query_x.begin(), task.query_x.end());
    std::vector<double> ys(task.support_y);
    ys.insert(ys.end(), task.query_y.begin(), task.query_y.end());
    const int n = static_cast<int>(xs.size());
    Tensor loss = detail::squared_error_loss(model, Tensor::from(n, 1, std::move(xs)),
                                             Tensor::from(n, 1, std::move(ys)));
    group.zero_grads();
    backward(loss);
    std::vector<double> vals = group.gather_values();
    adam_step(state, vals, group.gather_grads(), cfg.beta, cfg.adam_beta1, cfg.adam_beta2,
              cfg.adam_eps);
    group.scatter_values(vals);
  }
  return model;
}

// Clones the base model, runs `steps` full-batch Adam steps on the support
// points, and returns the query MSE. The base model is never touched.
inline double finetune_and_eval(const FeatureTransferModel& base, const RegressionTask& task,
                                int steps, double lr = 1e-3) {
  FeatureTransferModel model = base.clone();
  const int ns = static_cast<int>(task.support_x.size());
  const int nq = static_cast<int>(task.query_x.size());
  Tensor sx = Tensor::from(ns, 1, task.support_x);
  Tensor sy = Tensor::from(ns, 1, task.support_y);
  ParamGroup group(Backbone{model.config, model.params}.trainable());
  AdamState state(group.size());
  for (int it = 0; it < steps; ++it) {
    Tensor loss = detail::squared_error_loss(model, sx, sy);
    group.zero_grads();
    backward(loss);
    std::vector<double> vals = group.gather_values();
    adam_step(state, vals, group.gather_grads(), lr);
    group.scatter_values(vals);
  }
  Tensor pred = model.predict(Tensor::from(nq, 1, task.query_x));
  std::vector<double> pv(pred.values().begin(), pred.values().end());
  return mse(pv, task.query_y);
}

// ---------------------------------------------------------------------------
// Deep-kernel baseline (no transfer)
// ---------------------------------------------------------------------------

struct DkBaselineResult {
  double query_mse = 0.0;
  KernelSpec kernel;
  Backbone backbone;
};

// Fresh backbone and kernel per incoming task, optimized on the support
// points only; nothing carries across tasks. budget = 0 evaluates the
// untrained deep-kernel GP directly.
inline DkBaselineResult train_dk_baseline(const RegressionTask& task, KernelFamily family,
                                          long budget, const TrainConfig& cfg) {
  MlpConfig mlp_cfg{1, {40, 40}, 40, Activation::ReLU, cfg.seed};
  DkBaselineResult result;
  result.backbone = Backbone::make(mlp_cfg);
  result.kernel = KernelSpec::make(family, mlp_cfg.output_dim, true);

  RegressionTask support_only;
  support_only.mode = task.mode;
  support_only.support_x = task.support_x;
  support_only.support_y = task.support_y;

  TrainConfig run = cfg;
  run.iterations = budget;
  run.eval_every = 0;
  std::function<RegressionTask(long)> source = [&](long) { return support_only; };
  train_dkt<RegressionTask>(source, result.kernel, &result.backbone, run);

  const int ns = static_cast<int>(task.support_x.size());
  const int nq = static_cast<int>(task.query_x.size());
  MeanVariance mv = predict_mean_variance(result.kernel, &result.backbone,
                                          Tensor::from(ns, 1, task.support_x),
                                          Tensor::from(ns, 1, task.support_y),
                                          Tensor::from(nq, 1, task.query_x), true);
  result.query_mse = mse(mv.mean, task.query_y);
  return result;
}

}  // namespace dkt
