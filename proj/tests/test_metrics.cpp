#include "dkt/metrics.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "dkt/rng.hpp"

namespace {

// self-consistent data: labels drawn from softmax(logits)
void sample_calibrated(dkt::Rng& rng, int n, int c, double spread,
                       std::vector<double>& logits, std::vector<int>& labels) {
  logits.assign(static_cast<std::size_t>(n) * c, 0.0);
  labels.assign(n, 0);
  for (int i = 0; i < n; ++i) {
    double z = 0.0;
    std::vector<double> p(c);
    for (int k = 0; k < c; ++k) {
      logits[static_cast<std::size_t>(i) * c + k] = rng.normal(0.0, spread);
      p[k] = std::exp(logits[static_cast<std::size_t>(i) * c + k]);
      z += p[k];
    }
    double u = rng.uniform() * z;
    int lbl = 0;
    for (int k = 0; k < c; ++k) {
      u -= p[k];
      if (u <= 0.0) {
        lbl = k;
        break;
      }
      lbl = k;
    }
    labels[i] = lbl;
  }
}

// independent brute-force binning loop used as the oracle for ece()
double ece_oracle(const std::vector<double>& probs, const std::vector<int>& labels, int c,
                  int bins) {
  const std::size_t n = labels.size();
  std::vector<double> conf(n);
  std::vector<int> hit(n);
  for (std::size_t i = 0; i < n; ++i) {
    int best = 0;
    for (int k = 1; k < c; ++k)
      if (probs[i * c + k] > probs[i * c + best]) best = k;
    conf[i] = probs[i * c + best];
    hit[i] = best == labels[i] ? 1 : 0;
  }
  double total = 0.0;
  for (int b = 0; b < bins; ++b) {
    const double lo = static_cast<double>(b) / bins;
    const double hi = static_cast<double>(b + 1) / bins;
    double csum = 0.0, asum = 0.0;
    long count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool in_bin = b + 1 == bins ? (conf[i] >= lo && conf[i] <= hi)
                                        : (conf[i] >= lo && conf[i] < hi);
      if (!in_bin) continue;
      csum += conf[i];
      asum += hit[i];
      ++count;
    }
    if (count == 0) continue;
    total += (static_cast<double>(count) / n) * std::abs(csum / count - asum / count);
  }
  return total;
}

}  // namespace

// ---------------------------------------------------------------------------
// mse
// ---------------------------------------------------------------------------

TEST(Mse, Examples) {
  std::vector<double> a{1.0, 2.0}, b{1.0, 2.0};
  EXPECT_DOUBLE_EQ(dkt::mse(a, b), 0.0);
  std::vector<double> zeros{0.0, 0.0}, t{1.0, 3.0};
  EXPECT_DOUBLE_EQ(dkt::mse(zeros, t), 5.0);
}

TEST(Mse, PermutationInvariantOverPairs) {
  std::vector<double> p{1.0, 4.0, -2.0}, t{0.0, 5.0, -1.0};
  std::vector<double> p2{4.0, -2.0, 1.0}, t2{5.0, -1.0, 0.0};
  EXPECT_DOUBLE_EQ(dkt::mse(p, t), dkt::mse(p2, t2));
}

TEST(Mse, LengthMismatchThrows) {
  std::vector<double> a{1.0}, b{1.0, 2.0};
  EXPECT_THROW(dkt::mse(a, b), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// temperature calibration
// ---------------------------------------------------------------------------

TEST(Temperature, SelfConsistentDataGivesUnitTemperature) {
  dkt::Rng rng(211);
  std::vector<double> logits;
  std::vector<int> labels;
  sample_calibrated(rng, 20000, 3, 1.5, logits, labels);
  dkt::TemperatureFit fit = dkt::calibrate_temperature(logits, labels, 3);
  EXPECT_NEAR(fit.temperature, 1.0, 0.1);
}

TEST(Temperature, ScaleEquivariance) {
  dkt::Rng rng(223);
  std::vector<double> logits;
  std::vector<int> labels;
  sample_calibrated(rng, 20000, 4, 1.2, logits, labels);
  dkt::TemperatureFit fit1 = dkt::calibrate_temperature(logits, labels, 4);
  std::vector<double> doubled(logits);
  for (double& v : doubled) v *= 2.0;
  dkt::TemperatureFit fit2 = dkt::calibrate_temperature(doubled, labels, 4);
  EXPECT_NEAR(fit2.temperature, 2.0 * fit1.temperature, 0.02 * fit2.temperature + 1e-3);
}

TEST(Temperature, NeverIncreasesNll) {
  dkt::Rng rng(227);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> logits;
    std::vector<int> labels;
    sample_calibrated(rng, 500, 5, 2.5, logits, labels);
    // miscalibrate by sharpening
    for (double& v : logits) v *= 3.0;
    dkt::TemperatureFit fit = dkt::calibrate_temperature(logits, labels, 5);
    EXPECT_LE(fit.nll_after, fit.nll_before + 1e-12);
  }
}

TEST(Temperature, LocalOptimalityProbe) {
  dkt::Rng rng(229);
  std::vector<double> logits;
  std::vector<int> labels;
  sample_calibrated(rng, 5000, 4, 1.0, logits, labels);
  for (double& v : logits) v *= 2.5;
  dkt::TemperatureFit fit = dkt::calibrate_temperature(logits, labels, 4);
  const double at_fit = dkt::categorical_nll(logits, labels, 4, fit.temperature);
  EXPECT_LE(at_fit, dkt::categorical_nll(logits, labels, 4, 0.5 * fit.temperature) + 1e-12);
  EXPECT_LE(at_fit, dkt::categorical_nll(logits, labels, 4, 2.0 * fit.temperature) + 1e-12);
}

TEST(Temperature, DegenerateSingleClassRejected) {
  std::vector<double> logits{1.0, 0.0, 1.0, 0.0};
  std::vector<int> labels{0, 0};
  EXPECT_THROW(dkt::calibrate_temperature(logits, labels, 2), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// ece
// ---------------------------------------------------------------------------

TEST(Ece, ConfidentAndCorrectIsZero) {
  std::vector<double> probs{1.0, 0.0, 0.0, 1.0};
  std::vector<int> labels{0, 1};
  dkt::CalibrationReport r = dkt::ece(probs, labels, 2);
  EXPECT_DOUBLE_EQ(r.ece, 0.0);
}

TEST(Ece, ConfidentHalfCorrectIsHalf) {
  std::vector<double> probs{1.0, 0.0, 1.0, 0.0};
  std::vector<int> labels{0, 1};
  dkt::CalibrationReport r = dkt::ece(probs, labels, 2);
  EXPECT_DOUBLE_EQ(r.ece, 0.5);
}

TEST(Ece, MatchesBruteForceLoopOnLargeRandomInput) {
  dkt::Rng rng(233);
  const int n = 100000, c = 5;
  std::vector<double> probs(static_cast<std::size_t>(n) * c);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    double z = 0.0;
    for (int k = 0; k < c; ++k) {
      probs[static_cast<std::size_t>(i) * c + k] = rng.uniform(1e-3, 1.0);
      z += probs[static_cast<std::size_t>(i) * c + k];
    }
    for (int k = 0; k < c; ++k) probs[static_cast<std::size_t>(i) * c + k] /= z;
    labels[i] = static_cast<int>(rng.uniform_int(c));
  }
  dkt::CalibrationReport r = dkt::ece(probs, labels, c, 15);
  EXPECT_NEAR(r.ece, ece_oracle(probs, labels, c, 15), 1e-12);
  EXPECT_GE(r.ece, 0.0);
  EXPECT_LE(r.ece, 1.0);
  double weight = 0.0;
  for (const auto& bin : r.per_bin) weight += bin.weight;
  EXPECT_NEAR(weight, 1.0, 1e-12);
}

TEST(Ece, InvariantToExampleOrder) {
  dkt::Rng rng(239);
  const int n = 500, c = 3;
  std::vector<double> probs(static_cast<std::size_t>(n) * c);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    double z = 0.0;
    for (int k = 0; k < c; ++k) {
      probs[static_cast<std::size_t>(i) * c + k] = rng.uniform(0.05, 1.0);
      z += probs[static_cast<std::size_t>(i) * c + k];
    }
    for (int k = 0; k < c; ++k) probs[static_cast<std::size_t>(i) * c + k] /= z;
    labels[i] = static_cast<int>(rng.uniform_int(c));
  }
  const double base = dkt::ece(probs, labels, c).ece;
  // reverse example order
  std::vector<double> rprobs(probs.size());
  std::vector<int> rlabels(n);
  for (int i = 0; i < n; ++i) {
    rlabels[i] = labels[n - 1 - i];
    for (int k = 0; k < c; ++k)
      rprobs[static_cast<std::size_t>(i) * c + k] =
          probs[static_cast<std::size_t>(n - 1 - i) * c + k];
  }
  EXPECT_NEAR(dkt::ece(rprobs, rlabels, c).ece, base, 1e-15);
}

TEST(Ece, MalformedProbabilitiesRejected) {
  std::vector<double> probs{0.7, 0.7};  // does not sum to 1
  std::vector<int> labels{0};
  EXPECT_THROW(dkt::ece(probs, labels, 2), std::invalid_argument);
}
