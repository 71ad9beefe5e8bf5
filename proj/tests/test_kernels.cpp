#include "dkt/kernels.hpp"

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "dkt/rng.hpp"

using dkt::KernelFamily;
using dkt::KernelSpec;
using dkt::Tensor;

namespace {

Tensor colvec(std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  return Tensor::from(n, 1, std::move(v));
}

Tensor random_matrix(int r, int c, dkt::Rng& rng, double lo = -1.5, double hi = 1.5) {
  std::vector<double> v(static_cast<std::size_t>(r) * c);
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(r, c, std::move(v));
}

double min_eigenvalue(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (int i = 0; i < t.rows(); ++i)
    for (int j = 0; j < t.cols(); ++j) m(i, j) = t.at(i, j);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  return es.eigenvalues().minCoeff();
}

// Evaluates one kernel entry through the scalar ops for the loop oracle.
Tensor scalar_kernel(const KernelSpec& spec, const Tensor& x, const Tensor& z) {
  switch (spec.family) {
    case KernelFamily::Linear:
      return dkt::linear_kernel(spec, x, z);
    case KernelFamily::RBF:
      return dkt::rbf_kernel(spec, x, z);
    case KernelFamily::Matern52:
      return dkt::matern52_kernel(spec, x, z);
    case KernelFamily::Poly1:
    case KernelFamily::Poly2:
      return dkt::polynomial_kernel(spec, x, z);
    case KernelFamily::Spectral:
      return dkt::spectral_mixture_kernel(spec, x, z);
    case KernelFamily::CosSim:
      return dkt::cossim_kernel(spec, x, z);
    default:
      throw std::logic_error("no scalar form");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// scalar kernels: spec examples
// ---------------------------------------------------------------------------

TEST(LinearKernel, Examples) {
  KernelSpec s = KernelSpec::make(KernelFamily::Linear, 2, false);
  EXPECT_NEAR(dkt::linear_kernel(s, colvec({1, 0}), colvec({1, 0})).value(), 1.0, 1e-12);
  s.raw_variance = Tensor::scalar(dkt::softplus_inverse(2.0), true);
  EXPECT_NEAR(dkt::linear_kernel(s, colvec({1, 2}), colvec({3, 4})).value(), 22.0, 1e-12);
  s.raw_variance = Tensor::scalar(dkt::softplus_inverse(1.0), true);
  EXPECT_NEAR(dkt::linear_kernel(s, colvec({1, 2}), colvec({0, 0})).value(), 0.0, 1e-12);
  EXPECT_THROW(dkt::linear_kernel(s, colvec({1, 2}), colvec({1, 2, 3})), dkt::shape_error);
}

TEST(RbfKernel, Examples) {
  KernelSpec s = KernelSpec::make(KernelFamily::RBF, 2, false);
  EXPECT_NEAR(dkt::rbf_kernel(s, colvec({0.3, -0.7}), colvec({0.3, -0.7})).value(), 1.0, 1e-12);
  // l=1, ‖x−z‖²=2 → e⁻¹
  EXPECT_NEAR(dkt::rbf_kernel(s, colvec({1, 1}), colvec({0, 0})).value(), std::exp(-1.0), 1e-12);
}

TEST(RbfKernel, MonotoneInLengthscale) {
  Tensor x = colvec({1.2, -0.4});
  Tensor z = colvec({-0.8, 0.9});
  double prev = -1.0;
  for (double l : {1.0, 10.0, 100.0}) {
    KernelSpec s = KernelSpec::make(KernelFamily::RBF, 2, false);
    s.raw_lengthscale = Tensor::scalar(dkt::softplus_inverse(l), true);
    double k = dkt::rbf_kernel(s, x, z).value();
    EXPECT_GT(k, prev);
    prev = k;
  }
  EXPECT_GT(prev, 0.999);
}

TEST(Matern52Kernel, Examples) {
  KernelSpec s = KernelSpec::make(KernelFamily::Matern52, 1, false);
  EXPECT_NEAR(dkt::matern52_kernel(s, colvec({0.4}), colvec({0.4})).value(), 1.0, 1e-12);
  // direct formula at r = 1
  const double sqrt5 = std::sqrt(5.0);
  const double expected = (1.0 + sqrt5 + 5.0 / 3.0) * std::exp(-sqrt5);
  EXPECT_NEAR(dkt::matern52_kernel(s, colvec({1.0}), colvec({0.0})).value(), expected, 1e-12);
}

TEST(Matern52Kernel, StrictlyDecreasingInDistance) {
  KernelSpec s = KernelSpec::make(KernelFamily::Matern52, 1, false);
  double prev = 2.0;
  for (double r = 0.1; r < 4.0; r += 0.13) {
    double k = dkt::matern52_kernel(s, colvec({r}), colvec({0.0})).value();
    EXPECT_LT(k, prev);
    prev = k;
  }
}

TEST(Matern52Kernel, ApproachesOneForLargeLengthscale) {
  Tensor x = colvec({1.0}), z = colvec({-1.0});
  double prev = -1.0;
  for (double l : {1.0, 10.0, 100.0}) {
    KernelSpec s = KernelSpec::make(KernelFamily::Matern52, 1, false);
    s.raw_lengthscale = Tensor::scalar(dkt::softplus_inverse(l), true);
    double k = dkt::matern52_kernel(s, x, z).value();
    EXPECT_GT(k, prev);
    prev = k;
  }
  EXPECT_GT(prev, 0.99);
}

TEST(PolynomialKernel, Examples) {
  KernelSpec p1 = KernelSpec::make(KernelFamily::Poly1, 2, false);
  // p=1, c=0 reduces to the inner product
  EXPECT_NEAR(dkt::polynomial_kernel(p1, colvec({1, 2}), colvec({3, 4})).value(), 11.0, 1e-12);
  KernelSpec p2 = KernelSpec::make(KernelFamily::Poly2, 2, false);
  p2.offset = Tensor::scalar(1.0, true);
  // ⟨x,z⟩=2, c=1, p=2 → 9
  EXPECT_NEAR(dkt::polynomial_kernel(p2, colvec({1, 1}), colvec({1, 1})).value(), 9.0, 1e-12);
  p2.offset = Tensor::scalar(0.0, true);
  EXPECT_NEAR(dkt::polynomial_kernel(p2, colvec({1, 1}), colvec({0, 0})).value(), 0.0, 1e-12);
}

TEST(SpectralKernel, ZeroLagSumsWeights) {
  KernelSpec s = KernelSpec::make(KernelFamily::Spectral, 3, false);
  Tensor x = colvec({0.5, -1.0, 2.0});
  double sum_w = 0.0;
  for (int q = 0; q < s.mixtures; ++q)
    sum_w += dkt::softplus_value(s.raw_weights.at(q, 0));
  EXPECT_NEAR(dkt::spectral_mixture_kernel(s, x, x).value(), sum_w, 1e-12);
}

TEST(SpectralKernel, SmallScaleLimitIsCosine) {
  // Q=1, w=1, v→0⁺, μ=1, τ=0.5 → cos(π) = −1
  KernelSpec s = KernelSpec::make(KernelFamily::Spectral, 1, false, 1);
  s.raw_weights = Tensor::scalar(dkt::softplus_inverse(1.0), true);
  s.raw_means = Tensor::scalar(1.0, true);
  s.raw_scales = Tensor::scalar(-30.0, true);  // softplus ≈ 1e-13
  double k = dkt::spectral_mixture_kernel(s, colvec({0.5}), colvec({0.0})).value();
  EXPECT_NEAR(k, -1.0, 1e-6);
}

TEST(SpectralKernel, SymmetricInArguments) {
  dkt::Rng rng(41);
  KernelSpec s = KernelSpec::make(KernelFamily::Spectral, 3, false);
  for (int t = 0; t < 10; ++t) {
    Tensor x = random_matrix(3, 1, rng);
    Tensor z = random_matrix(3, 1, rng);
    EXPECT_NEAR(dkt::spectral_mixture_kernel(s, x, z).value(),
                dkt::spectral_mixture_kernel(s, z, x).value(), 1e-12);
  }
}

TEST(CosSimKernel, Examples) {
  KernelSpec s = KernelSpec::make(KernelFamily::CosSim, 2, false);
  Tensor x = colvec({3, 4});
  EXPECT_NEAR(dkt::cossim_kernel(s, x, x).value(), 1.0, 1e-7);
  EXPECT_NEAR(dkt::cossim_kernel(s, x, colvec({-3, -4})).value(), -1.0, 1e-7);
  EXPECT_NEAR(dkt::cossim_kernel(s, colvec({1, 0}), colvec({0, 1})).value(), 0.0, 1e-12);
  // zero-norm input is stabilized, not a crash
  EXPECT_NEAR(dkt::cossim_kernel(s, colvec({0, 0}), x).value(), 0.0, 1e-12);
}

// ---------------------------------------------------------------------------
// BNCosSim
// ---------------------------------------------------------------------------

TEST(BnCosSim, OppositeAfterCentering) {
  // rows x and 2x center to ∓x/2 → off-diagonal ≈ −1
  KernelSpec s = KernelSpec::make(KernelFamily::BNCosSim, 3, false);
  Tensor batch = Tensor::from(2, 3, {1, 2, 3, 2, 4, 6});
  Tensor g = dkt::bn_cossim_kernel(s, batch, batch);
  EXPECT_NEAR(g.at(0, 1), -1.0, 1e-6);
  EXPECT_NEAR(g.at(1, 0), -1.0, 1e-6);
}

TEST(BnCosSim, IdenticalRowsStabilizeToZero) {
  KernelSpec s = KernelSpec::make(KernelFamily::BNCosSim, 2, false);
  Tensor batch = Tensor::from(3, 2, {1, 2, 1, 2, 1, 2});
  Tensor g = dkt::bn_cossim_kernel(s, batch, batch);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(g.at(i, j), 0.0, 1e-12);
}

TEST(BnCosSim, SelfGramIsSymmetricPsd) {
  dkt::Rng rng(43);
  KernelSpec s = KernelSpec::make(KernelFamily::BNCosSim, 4, false);
  Tensor batch = random_matrix(6, 4, rng);
  Tensor g = dkt::gram(s, nullptr, batch, batch).values;
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) EXPECT_NEAR(g.at(i, j), g.at(j, i), 1e-12);
  EXPECT_GE(min_eigenvalue(g), -1e-8);
}

TEST(BnCosSim, SingleRowBatchRejected) {
  KernelSpec s = KernelSpec::make(KernelFamily::BNCosSim, 2, false);
  Tensor one = Tensor::from(1, 2, {1, 2});
  EXPECT_THROW(dkt::gram(s, nullptr, one, one), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// gram: matrix path vs scalar loop, self-Gram properties
// ---------------------------------------------------------------------------

TEST(Gram, MatchesScalarLoopOracle) {
  dkt::Rng rng(47);
  const int n = 5, d = 3;
  Tensor x = random_matrix(n, d, rng);
  for (KernelFamily f : {KernelFamily::Linear, KernelFamily::RBF, KernelFamily::Matern52,
                         KernelFamily::Poly1, KernelFamily::Poly2, KernelFamily::Spectral,
                         KernelFamily::CosSim}) {
    KernelSpec s = KernelSpec::make(f, d, false);
    Tensor g = dkt::gram(s, nullptr, x, x).values;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        Tensor xi = transpose(dkt::block(x, i, i + 1, 0, d));
        Tensor xj = transpose(dkt::block(x, j, j + 1, 0, d));
        EXPECT_NEAR(g.at(i, j), scalar_kernel(s, xi, xj).value(), 1e-12)
            << dkt::kernel_family_name(f) << " at (" << i << "," << j << ")";
      }
  }
}

TEST(Gram, SelfGramSymmetricWithPsdMinEig) {
  dkt::Rng rng(53);
  const int n = 6, d = 3;
  Tensor x = random_matrix(n, d, rng);
  for (KernelFamily f : {KernelFamily::Linear, KernelFamily::RBF, KernelFamily::Matern52,
                         KernelFamily::Poly1, KernelFamily::Poly2, KernelFamily::Spectral,
                         KernelFamily::CosSim}) {
    KernelSpec s = KernelSpec::make(f, d, false);
    Tensor g = dkt::gram(s, nullptr, x, x).values;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        EXPECT_NEAR(g.at(i, j), g.at(j, i), 1e-12) << dkt::kernel_family_name(f);
    EXPECT_GE(min_eigenvalue(g), -1e-8) << dkt::kernel_family_name(f);
  }
}

TEST(Gram, StationaryKernelsAreTranslationInvariant) {
  dkt::Rng rng(59);
  const int d = 3;
  Tensor x = random_matrix(4, d, rng);
  std::vector<double> shift(d);
  for (double& v : shift) v = rng.uniform(-2.0, 2.0);
  std::vector<double> moved(x.values().begin(), x.values().end());
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < d; ++j) moved[static_cast<std::size_t>(i) * d + j] += shift[j];
  Tensor xs = Tensor::from(4, d, moved);
  for (KernelFamily f : {KernelFamily::RBF, KernelFamily::Matern52, KernelFamily::Spectral}) {
    KernelSpec s = KernelSpec::make(f, d, false);
    Tensor g0 = dkt::gram(s, nullptr, x, x).values;
    Tensor g1 = dkt::gram(s, nullptr, xs, xs).values;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        EXPECT_NEAR(g0.at(i, j), g1.at(i, j), 1e-9) << dkt::kernel_family_name(f);
  }
}

TEST(Gram, NoBackboneEqualsIdentityComposition) {
  dkt::Rng rng(61);
  Tensor x = random_matrix(4, 2, rng);
  KernelSpec s = KernelSpec::make(KernelFamily::Linear, 2, false);
  Tensor plain = mul_scalar(matmul(x, transpose(x)), softplus(s.raw_variance));
  Tensor g = dkt::gram(s, nullptr, x, x).values;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(g.at(i, j), plain.at(i, j), 1e-14);
}

TEST(Gram, DeepRbfSelfDiagonalIsOne) {
  dkt::Rng rng(67);
  dkt::MlpConfig cfg{1, {16, 16}, 8, dkt::Activation::ReLU, 5};
  dkt::Backbone bb = dkt::Backbone::make(cfg);
  KernelSpec s = KernelSpec::make(KernelFamily::RBF, 8, true);
  Tensor x = random_matrix(5, 1, rng, -5.0, 5.0);
  Tensor g = dkt::gram(s, &bb, x, x).values;
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(g.at(i, i), 1.0, 1e-12);
}

TEST(Gram, DeepKernelGradientsPassGradCheck) {
  dkt::Rng rng(71);
  dkt::MlpConfig cfg{2, {6}, 4, dkt::Activation::Tanh, 9};
  Tensor x = random_matrix(4, 2, rng);
  Tensor w = random_matrix(4, 4, rng);
  for (KernelFamily f : {KernelFamily::Linear, KernelFamily::RBF, KernelFamily::Matern52,
                         KernelFamily::Poly2, KernelFamily::Spectral, KernelFamily::CosSim,
                         KernelFamily::BNCosSim}) {
    dkt::Backbone bb = dkt::Backbone::make(cfg);
    KernelSpec s = KernelSpec::make(f, 4, true);
    std::vector<Tensor> params = s.trainable();
    for (Tensor& t : bb.trainable()) params.push_back(t);
    auto loss = [&] {
      Tensor g = dkt::gram(s, &bb, x, x).values;
      return dkt::sum(dkt::mul(g, w));
    };
    EXPECT_LT(dkt::grad_check(loss, params, 1e-5), 1e-4) << dkt::kernel_family_name(f);
  }
}

// ---------------------------------------------------------------------------
// noise and jitter
// ---------------------------------------------------------------------------

TEST(NoiseJitter, ZeroGramBecomesScaledIdentity) {
  KernelSpec s = KernelSpec::make(KernelFamily::RBF, 2, false);
  s.raw_noise = Tensor::scalar(dkt::softplus_inverse(1.0), true);
  dkt::GramMatrix g{Tensor::zeros(3, 3), true};
  Tensor k = dkt::add_noise_and_jitter(g, s, 1e-6);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      EXPECT_NEAR(k.at(i, j), i == j ? 1.0 + 1e-6 : 0.0, 1e-15);
}

TEST(NoiseJitter, CrossGramRejected) {
  KernelSpec s = KernelSpec::make(KernelFamily::RBF, 2, false);
  dkt::GramMatrix g{Tensor::zeros(3, 3), false};
  EXPECT_THROW(dkt::add_noise_and_jitter(g, s, 1e-6), std::invalid_argument);
}

TEST(NoiseJitter, PsdGramFactorizes) {
  dkt::Rng rng(73);
  KernelSpec s = KernelSpec::make(KernelFamily::RBF, 2, false);
  Tensor x = random_matrix(6, 2, rng);
  dkt::GramMatrix g = dkt::gram(s, nullptr, x, x);
  EXPECT_NO_THROW(dkt::cholesky(dkt::add_noise_and_jitter(g, s, 1e-6)));
}

TEST(NoiseJitter, EscalationRecoversRankDeficientGram) {
  // rank-1 Gram u uᵀ with its trailing pivots pushed 5e-4 below zero, standing
  // in for the rounding a genuinely deficient factorization produces. Only the
  // last rung of the schedule (1e-2) can make it positive definite.
  KernelSpec s = KernelSpec::make(KernelFamily::RBF, 2, false);
  s.raw_noise = Tensor::scalar(dkt::softplus_inverse(1e-9), true);
  std::vector<double> vals;
  std::vector<double> u{1.0, 2.0, 3.0, 4.0};
  for (double a : u)
    for (double b : u) vals.push_back(a * b);
  const double deficiency = 5e-4;
  for (int i = 0; i < 4; ++i) vals[static_cast<std::size_t>(i) * 4 + i] -= deficiency;
  dkt::GramMatrix g{Tensor::from(4, 4, vals), true};
  EXPECT_THROW(dkt::cholesky(dkt::add_noise_and_jitter(g, s, 1e-6)), dkt::not_positive_definite);
  EXPECT_THROW(dkt::cholesky(dkt::add_noise_and_jitter(g, s, 1e-4)), dkt::not_positive_definite);
  dkt::CholResult r = dkt::cholesky_with_jitter(g, s);
  EXPECT_DOUBLE_EQ(r.jitter, 1e-2);
  Tensor rec = dkt::matmul(r.l, dkt::transpose(r.l));
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      EXPECT_NEAR(rec.at(i, j), r.k_noisy.at(i, j), 1e-8);
}

TEST(KernelNames, RoundTripAndErrors) {
  for (const auto& [name, fam] : dkt::kernel_name_table()) {
    EXPECT_EQ(dkt::kernel_family_name(dkt::kernel_family_from_name(name)), name);
  }
  EXPECT_THROW(dkt::kernel_family_from_name("nosuch"), std::invalid_argument);
}
