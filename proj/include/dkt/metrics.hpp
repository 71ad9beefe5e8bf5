#pragma once

// Evaluation metrics: MSE, categorical NLL, post-hoc temperature scaling
// (golden-section on log T), and expected calibration error with equal-width
// confidence bins.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace dkt {

inline double mse(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size() || pred.empty())
    throw std::invalid_argument("mse: lengths must match and be nonzero");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size());
}

// Mean NLL of softmax(logits / T) at the true labels; logits are n×C row-major.
inline double categorical_nll(std::span<const double> logits, std::span<const int> labels,
                              int class_count, double temperature) {
  if (class_count < 2) throw std::invalid_argument("categorical_nll: need >= 2 classes");
  const std::size_t n = labels.size();
  if (logits.size() != n * static_cast<std::size_t>(class_count))
    throw std::invalid_argument("categorical_nll: logits shape mismatch");
  if (!(temperature > 0.0)) throw std::invalid_argument("categorical_nll: T must be positive");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = &logits[i * class_count];
    double hi = row[0] / temperature;
    for (int c = 1; c < class_count; ++c) hi = std::max(hi, row[c] / temperature);
    double z = 0.0;
    for (int c = 0; c < class_count; ++c) z += std::exp(row[c] / temperature - hi);
    const int y = labels[i];
    if (y < 0 || y >= class_count) throw std::invalid_argument("categorical_nll: bad label");
    acc -= row[y] / temperature - hi - std::log(z);
  }
  return acc / static_cast<double>(n);
}

struct TemperatureFit {
  double temperature = 1.0;
  double nll_before = 0.0;  // at T = 1
  double nll_after = 0.0;   // at the fitted T
};

// Minimizes NLL over log T ∈ [−3, 3] by golden-section search (tolerance 1e-4
// on log T). T = 1 is always a fallback, so the fit never increases the NLL.
inline TemperatureFit calibrate_temperature(std::span<const double> logits,
                                            std::span<const int> labels, int class_count) {
  if (labels.empty()) throw std::invalid_argument("calibrate_temperature: empty input");
  bool multi_class = false;
  for (std::size_t i = 1; i < labels.size(); ++i)
    if (labels[i] != labels[0]) multi_class = true;
  if (!multi_class)
    throw std::invalid_argument("calibrate_temperature: degenerate single-class input");

  auto nll_at_log_t = [&](double lt) {
    return categorical_nll(logits, labels, class_count, std::exp(lt));
  };
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = -3.0, b = 3.0;
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = nll_at_log_t(c), fd = nll_at_log_t(d);
  while (b - a > 1e-4) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = nll_at_log_t(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = nll_at_log_t(d);
    }
  }
  TemperatureFit fit;
  fit.nll_before = categorical_nll(logits, labels, class_count, 1.0);
  double t_star = std::exp(0.5 * (a + b));
  double nll_star = categorical_nll(logits, labels, class_count, t_star);
  if (fit.nll_before < nll_star) {  // T = 1 is feasible
    t_star = 1.0;
    nll_star = fit.nll_before;
  }
  fit.temperature = t_star;
  fit.nll_after = nll_star;
  return fit;
}

inline std::vector<double> softmax_probs(std::span<const double> logits, int class_count,
                                         double temperature) {
  const std::size_t n = logits.size() / class_count;
  std::vector<double> probs(logits.size());
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = &logits[i * class_count];
    double hi = row[0] / temperature;
    for (int c = 1; c < class_count; ++c) hi = std::max(hi, row[c] / temperature);
    double z = 0.0;
    for (int c = 0; c < class_count; ++c) {
      probs[i * class_count + c] = std::exp(row[c] / temperature - hi);
      z += probs[i * class_count + c];
    }
    for (int c = 0; c < class_count; ++c) probs[i * class_count + c] /= z;
  }
  return probs;
}

// ---------------------------------------------------------------------------
// Expected calibration error
// ---------------------------------------------------------------------------

struct CalibrationReport {
  double temperature = 1.0;
  double ece = 0.0;
  int bin_count = 15;
  struct Bin {
    double confidence = 0.0;  // mean max-probability in the bin
    double accuracy = 0.0;
    double weight = 0.0;  // fraction of samples
  };
  std::vector<Bin> per_bin;
  double nll_before = 0.0;
  double nll_after = 0.0;
};

// probs are n×C rows summing to 1; confidence is the max-class probability,
// binned into equal-width bins over [0, 1].
inline CalibrationReport ece(std::span<const double> probs, std::span<const int> labels,
                             int class_count, int bins = 15) {
  if (bins < 1) throw std::invalid_argument("ece: bins must be >= 1");
  const std::size_t n = labels.size();
  if (n == 0 || probs.size() != n * static_cast<std::size_t>(class_count))
    throw std::invalid_argument("ece: probs shape mismatch");
  CalibrationReport report;
  report.bin_count = bins;
  report.per_bin.assign(bins, {});
  std::vector<long> counts(bins, 0);
  std::vector<double> conf_sum(bins, 0.0), acc_sum(bins, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = &probs[i * class_count];
    double rowsum = 0.0;
    int best = 0;
    for (int c = 0; c < class_count; ++c) {
      if (row[c] < -1e-9 || row[c] > 1.0 + 1e-9)
        throw std::invalid_argument("ece: probability outside [0, 1]");
      rowsum += row[c];
      if (row[c] > row[best]) best = c;
    }
    if (std::abs(rowsum - 1.0) > 1e-6)
      throw std::invalid_argument("ece: probabilities must sum to 1");
    const double confidence = row[best];
    int bin = static_cast<int>(confidence * bins);
    if (bin >= bins) bin = bins - 1;
    if (bin < 0) bin = 0;
    counts[bin] += 1;
    conf_sum[bin] += confidence;
    acc_sum[bin] += labels[i] == best ? 1.0 : 0.0;
  }
  for (int b = 0; b < bins; ++b) {
    if (counts[b] == 0) continue;
    CalibrationReport::Bin& bin = report.per_bin[b];
    bin.weight = static_cast<double>(counts[b]) / static_cast<double>(n);
    bin.confidence = conf_sum[b] / counts[b];
    bin.accuracy = acc_sum[b] / counts[b];
    report.ece += bin.weight * std::abs(bin.confidence - bin.accuracy);
  }
  return report;
}

}  // namespace dkt
