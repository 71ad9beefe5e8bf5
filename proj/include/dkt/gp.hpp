#pragma once

// Exact GP inference: posterior conditioning, the log marginal likelihood the
// trainer maximizes, and label-regression classification (one-versus-rest with
// ±1 targets, decisions by the largest sigmoid of the posterior mean).
//
// Training pools support ∪ query into one marginal likelihood; test-time
// prediction conditions on the support only. Both paths share the feature and
// Gram machinery so batch-normalized kernels see the same statistics.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "dkt/backbone.hpp"
#include "dkt/kernels.hpp"
#include "dkt/tasks.hpp"
#include "dkt/tensor.hpp"

namespace dkt {

inline constexpr double kLogTwoPi = 1.8378770664093454836;

// ---------------------------------------------------------------------------
// Posterior
// ---------------------------------------------------------------------------

struct Posterior {
  int m = 0;
  std::vector<double> mean;  // length m
  std::vector<double> cov;   // m×m row-major, symmetrized
  bool includes_noise = false;

  double variance(int i) const {
    const double v = cov[static_cast<std::size_t>(i) * m + i];
    return v < 0.0 ? 0.0 : v;  // clamp tiny negative round-off
  }

  void validate() const {
    for (double v : mean)
      if (!std::isfinite(v)) throw std::runtime_error("posterior mean not finite");
    for (double v : cov)
      if (!std::isfinite(v)) throw std::runtime_error("posterior covariance not finite");
    for (int i = 0; i < m; ++i)
      if (cov[static_cast<std::size_t>(i) * m + i] < -1e-10)
        throw std::runtime_error("posterior variance below -1e-10");
  }
};

// ---------------------------------------------------------------------------
// Marginal likelihood
// ---------------------------------------------------------------------------

// log p(y | K) = −½ yᵀK⁻¹y − ½ log|K| − (n/2) log 2π, given L with LLᵀ = K.
inline Tensor log_marginal_likelihood_from_chol(const Tensor& l, const Tensor& y) {
  const int n = l.rows();
  if (y.rows() != n || y.cols() != 1)
    throw shape_error("log_marginal_likelihood: y must be n×1");
  Tensor alpha = cholesky_solve(l, y);
  Tensor data_fit = scale(sum(mul(y, alpha)), -0.5);
  Tensor penalty = scale(logdet_from_chol(l), -0.5);
  return add(add(data_fit, penalty), Tensor::scalar(-0.5 * n * kLogTwoPi));
}

inline Tensor log_marginal_likelihood(const Tensor& k_noisy, const Tensor& y) {
  return log_marginal_likelihood_from_chol(cholesky(k_noisy), y);
}

// ---------------------------------------------------------------------------
// Posterior conditioning (Bayes' rule on the joint Gaussian)
// ---------------------------------------------------------------------------

// mean = k*ᵀ (K+σ²I)⁻¹ y, cov = k** − k*ᵀ (K+σ²I)⁻¹ k*; optionally adds the
// observation noise to the covariance (predictive rather than latent).
inline Posterior posterior(const Tensor& k_train_noisy, const Tensor& k_cross,
                           const Tensor& k_test, const Tensor& y, bool with_noise,
                           double noise_variance = 0.0) {
  const int n = k_train_noisy.rows();
  const int m = k_test.rows();
  if (k_test.cols() != m) throw shape_error("posterior: k_test must be square");
  Posterior post;
  post.m = m;
  post.includes_noise = with_noise;
  post.mean.assign(m, 0.0);
  post.cov.assign(static_cast<std::size_t>(m) * m, 0.0);

  if (n == 0) {
    // no conditioning: prior at the query points
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j)
        post.cov[static_cast<std::size_t>(i) * m + j] = k_test.at(i, j);
  } else {
    if (k_cross.rows() != n || k_cross.cols() != m)
      throw shape_error("posterior: k_cross must be n×m");
    if (y.rows() != n || y.cols() != 1) throw shape_error("posterior: y must be n×1");
    Tensor l = cholesky(k_train_noisy);
    Tensor alpha = cholesky_solve(l, y);
    Tensor mean = matmul(transpose(k_cross), alpha);
    Tensor w = cholesky_solve(l, k_cross);
    Tensor cov = sub(k_test, matmul(transpose(k_cross), w));
    for (int i = 0; i < m; ++i) post.mean[i] = mean.at(i, 0);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j)
        post.cov[static_cast<std::size_t>(i) * m + j] = 0.5 * (cov.at(i, j) + cov.at(j, i));
  }
  if (with_noise)
    for (int i = 0; i < m; ++i) post.cov[static_cast<std::size_t>(i) * m + i] += noise_variance;
  post.validate();
  return post;
}

// ---------------------------------------------------------------------------
// Label encoding (one-versus-rest, ±1 targets)
// ---------------------------------------------------------------------------

struct LabelEncoding {
  Tensor targets;  // n×C over {−1, +1}, one +1 per row
  int class_count = 0;
};

inline LabelEncoding encode_labels(const std::vector<int>& labels, int class_count) {
  if (class_count < 1) throw std::invalid_argument("encode_labels: C must be >= 1");
  const int n = static_cast<int>(labels.size());
  std::vector<double> t(static_cast<std::size_t>(n) * class_count, -1.0);
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= class_count)
      throw std::invalid_argument("encode_labels: label " + std::to_string(labels[i]) +
                                  " out of range [0," + std::to_string(class_count) + ")");
    t[static_cast<std::size_t>(i) * class_count + labels[i]] = 1.0;
  }
  return {Tensor::from(n, class_count, std::move(t)), class_count};
}

// ---------------------------------------------------------------------------
// Task losses (Algorithm: sample task, pool S ∪ Q, minimize −log marginal)
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor pooled_inputs_1d(const RegressionTask& task) {
  std::vector<double> x(task.support_x);
  x.insert(x.end(), task.query_x.begin(), task.query_x.end());
  const int n = static_cast<int>(x.size());
  return Tensor::from(n, 1, std::move(x));
}

inline Tensor pooled_targets_1d(const RegressionTask& task) {
  std::vector<double> y(task.support_y);
  y.insert(y.end(), task.query_y.begin(), task.query_y.end());
  const int n = static_cast<int>(y.size());
  return Tensor::from(n, 1, std::move(y));
}

inline Tensor rows_tensor(const std::vector<double>& flat, int dim) {
  if (dim < 1 || flat.size() % dim != 0) throw shape_error("bad flat row data");
  return Tensor::from(static_cast<int>(flat.size()) / dim, dim, flat);
}

}  // namespace detail

// Negative log marginal likelihood of the pooled task under the deep kernel.
inline Tensor dkt_task_loss(const KernelSpec& kernel, const Backbone* backbone,
                            const RegressionTask& task,
                            const std::vector<double>& jitter_schedule = default_jitter_schedule()) {
  if (task.support_x.empty() && task.query_x.empty())
    throw std::invalid_argument("dkt_task_loss: empty task");
  Tensor x = detail::pooled_inputs_1d(task);
  Tensor y = detail::pooled_targets_1d(task);
  GramMatrix g = gram(kernel, backbone, x, x);
  CholResult chol = cholesky_with_jitter(g, kernel, jitter_schedule);
  return neg(log_marginal_likelihood_from_chol(chol.l, y));
}

// Classification loss: sum of the C per-class label-regression marginals, all
// sharing one Gram and one factorization.
inline Tensor dkt_task_loss(const KernelSpec& kernel, const Backbone* backbone,
                            const ClassificationTask& task,
                            const std::vector<double>& jitter_schedule = default_jitter_schedule()) {
  const int n = task.support_count() + task.query_count();
  if (n == 0) throw std::invalid_argument("dkt_task_loss: empty task");
  std::vector<double> xflat(task.support_x);
  xflat.insert(xflat.end(), task.query_x.begin(), task.query_x.end());
  std::vector<int> labels(task.support_labels);
  labels.insert(labels.end(), task.query_labels.begin(), task.query_labels.end());
  Tensor x = detail::rows_tensor(xflat, task.dim);
  LabelEncoding enc = encode_labels(labels, task.ways);

  GramMatrix g = gram(kernel, backbone, x, x);
  CholResult chol = cholesky_with_jitter(g, kernel, jitter_schedule);
  Tensor alpha = cholesky_solve(chol.l, enc.targets);  // n×C, one solve per class
  Tensor data_fit = scale(sum(mul(enc.targets, alpha)), 0.5);
  Tensor penalty = scale(logdet_from_chol(chol.l), 0.5 * task.ways);
  const double constant = 0.5 * task.ways * n * kLogTwoPi;
  return add(add(data_fit, penalty), Tensor::scalar(constant));
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

namespace detail {

// Features for support and query computed from one stacked batch so that
// batch-statistics kernels stay consistent between the K_ss and K_sq blocks.
struct SplitFeatures {
  Tensor support;
  Tensor query;
};

inline SplitFeatures split_features(const KernelSpec& kernel, const Backbone* backbone,
                                    const Tensor& support_x, const Tensor& query_x) {
  Tensor stacked = vcat(support_x, query_x);
  Tensor f = prepared_features(kernel, backbone, stacked);
  return {block(f, 0, support_x.rows(), 0, f.cols()),
          block(f, support_x.rows(), stacked.rows(), 0, f.cols())};
}

}  // namespace detail

// Predictive posterior at query_x conditioned on the support only.
inline Posterior predict_regression(const KernelSpec& kernel, const Backbone* backbone,
                                    const std::vector<double>& support_x,
                                    const std::vector<double>& support_y,
                                    const std::vector<double>& query_x, bool with_noise = true,
                                    const std::vector<double>& jitter_schedule = default_jitter_schedule()) {
  const int n = static_cast<int>(support_x.size());
  const int m = static_cast<int>(query_x.size());
  if (n == 0) throw std::invalid_argument("predict_regression: empty support");
  if (m == 0) return Posterior{0, {}, {}, with_noise};
  Tensor xs = Tensor::from(n, 1, support_x);
  Tensor xq = Tensor::from(m, 1, query_x);
  detail::SplitFeatures f = detail::split_features(kernel, backbone, xs, xq);
  GramMatrix g{kernel_matrix(kernel, f.support, f.support), true};
  CholResult chol = cholesky_with_jitter(g, kernel, jitter_schedule);
  Tensor k_cross = kernel_matrix(kernel, f.support, f.query);
  Tensor k_test = kernel_matrix(kernel, f.query, f.query);
  Tensor y = Tensor::from(n, 1, support_y);
  return posterior(chol.k_noisy, k_cross, k_test, y, with_noise, kernel.noise_variance());
}

struct MeanVariance {
  std::vector<double> mean;
  std::vector<double> variance;
};

// Diagonal-only predictive path for evaluation loops; skips the m×m query
// covariance entirely.
inline MeanVariance predict_mean_variance(const KernelSpec& kernel, const Backbone* backbone,
                                          const Tensor& support_x, const Tensor& support_y,
                                          const Tensor& query_x, bool with_noise = true,
                                          const std::vector<double>& jitter_schedule = default_jitter_schedule()) {
  const int n = support_x.rows();
  const int m = query_x.rows();
  if (n == 0) throw std::invalid_argument("predict_mean_variance: empty support");
  MeanVariance out;
  if (m == 0) return out;
  detail::SplitFeatures f = detail::split_features(kernel, backbone, support_x, query_x);
  GramMatrix g{kernel_matrix(kernel, f.support, f.support), true};
  CholResult chol = cholesky_with_jitter(g, kernel, jitter_schedule);
  Tensor k_cross = kernel_matrix(kernel, f.support, f.query);  // n×m
  Tensor alpha = cholesky_solve(chol.l, support_y);
  Tensor mean = matmul(transpose(k_cross), alpha);  // m×1
  Tensor w = cholesky_solve(chol.l, k_cross);       // n×m
  Tensor reduction = matmul(Tensor::ones(1, n), mul(k_cross, w));  // 1×m
  Tensor prior_diag = kernel_diag(kernel, f.query);                // m×1
  const double noise = with_noise ? kernel.noise_variance() : 0.0;
  out.mean.resize(m);
  out.variance.resize(m);
  for (int j = 0; j < m; ++j) {
    out.mean[j] = mean.at(j, 0);
    out.variance[j] = std::max(prior_diag.at(j, 0) - reduction.at(0, j), 0.0) + noise;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

struct ClassificationResult {
  int ways = 0;
  int query_count = 0;
  std::vector<double> means;   // m×C posterior means (pre-sigmoid)
  std::vector<double> sigmas;  // σ(mean), raw per-class probabilities
  std::vector<double> probs;   // sigmas renormalized to sum to 1 per row
  std::vector<int> predictions;

  double mean_at(int i, int c) const { return means[static_cast<std::size_t>(i) * ways + c]; }
  double prob_at(int i, int c) const { return probs[static_cast<std::size_t>(i) * ways + c]; }
};

// One-versus-rest GP classification: condition each class's ±1 regression on
// the support, pick argmax_c σ(m_c(x*)).
inline ClassificationResult classify(const KernelSpec& kernel, const Backbone* backbone,
                                     const std::vector<double>& support_x_flat,
                                     const std::vector<int>& support_labels, int ways, int dim,
                                     const std::vector<double>& query_x_flat,
                                     const std::vector<double>& jitter_schedule = default_jitter_schedule()) {
  const int n = static_cast<int>(support_labels.size());
  if (n == 0) throw std::invalid_argument("classify: empty support");
  std::vector<int> seen(ways, 0);
  for (int l : support_labels) {
    if (l < 0 || l >= ways) throw std::invalid_argument("classify: label out of range");
    seen[l] = 1;
  }
  for (int c = 0; c < ways; ++c)
    if (!seen[c])
      throw std::invalid_argument("classify: class " + std::to_string(c) + " missing from support");

  Tensor xs = detail::rows_tensor(support_x_flat, dim);
  Tensor xq = detail::rows_tensor(query_x_flat, dim);
  const int m = xq.rows();
  detail::SplitFeatures f = detail::split_features(kernel, backbone, xs, xq);
  GramMatrix g{kernel_matrix(kernel, f.support, f.support), true};
  CholResult chol = cholesky_with_jitter(g, kernel, jitter_schedule);
  LabelEncoding enc = encode_labels(support_labels, ways);
  Tensor alpha = cholesky_solve(chol.l, enc.targets);            // n×C
  Tensor k_cross = kernel_matrix(kernel, f.support, f.query);    // n×m
  Tensor means = matmul(transpose(k_cross), alpha);              // m×C

  ClassificationResult res;
  res.ways = ways;
  res.query_count = m;
  res.means.resize(static_cast<std::size_t>(m) * ways);
  res.sigmas.resize(res.means.size());
  res.probs.resize(res.means.size());
  res.predictions.resize(m);
  for (int i = 0; i < m; ++i) {
    double norm = 0.0;
    int best = 0;
    for (int c = 0; c < ways; ++c) {
      const double mu = means.at(i, c);
      const double s = 1.0 / (1.0 + std::exp(-mu));
      res.means[static_cast<std::size_t>(i) * ways + c] = mu;
      res.sigmas[static_cast<std::size_t>(i) * ways + c] = s;
      norm += s;
      if (s > res.sigmas[static_cast<std::size_t>(i) * ways + best]) best = c;
    }
    for (int c = 0; c < ways; ++c)
      res.probs[static_cast<std::size_t>(i) * ways + c] =
          res.sigmas[static_cast<std::size_t>(i) * ways + c] / norm;
    res.predictions[i] = best;
  }
  return res;
}

inline ClassificationResult classify(const KernelSpec& kernel, const Backbone* backbone,
                                     const ClassificationTask& task,
                                     const std::vector<double>& jitter_schedule = default_jitter_schedule()) {
  return classify(kernel, backbone, task.support_x, task.support_labels, task.ways, task.dim,
                  task.query_x, jitter_schedule);
}

}  // namespace dkt
