#pragma once

// Kernel zoo with differentiable hyperparameters, plus the deep-kernel
// composition k(x, x') = k'(F(x), F(x')). Positive hyperparameters are stored
// as unconstrained reals and mapped through softplus on use.

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dkt/backbone.hpp"
#include "dkt/tensor.hpp"

namespace dkt {

enum class KernelFamily { Linear, RBF, Matern52, Poly1, Poly2, Spectral, CosSim, BNCosSim };

inline constexpr double kCosSimNormEps = 1e-8;  // added to feature norms
inline constexpr double kBnVarEps = 1e-5;       // added to batch variances
inline constexpr double kTwoPi = 6.283185307179586476925287;

inline const std::vector<std::pair<std::string, KernelFamily>>& kernel_name_table() {
  static const std::vector<std::pair<std::string, KernelFamily>> table = {
      {"linear", KernelFamily::Linear},     {"rbf", KernelFamily::RBF},
      {"matern", KernelFamily::Matern52},   {"poly1", KernelFamily::Poly1},
      {"poly2", KernelFamily::Poly2},       {"spectral", KernelFamily::Spectral},
      {"cossim", KernelFamily::CosSim},     {"bncossim", KernelFamily::BNCosSim},
  };
  return table;
}

inline std::string kernel_family_name(KernelFamily f) {
  for (const auto& [name, fam] : kernel_name_table())
    if (fam == f) return name;
  throw std::logic_error("unmapped kernel family");
}

inline std::string valid_kernel_names() {
  std::string out;
  for (const auto& [name, fam] : kernel_name_table()) {
    if (!out.empty()) out += ", ";
    out += name;
  }
  return out;
}

inline KernelFamily kernel_family_from_name(const std::string& s) {
  for (const auto& [name, fam] : kernel_name_table())
    if (name == s) return fam;
  throw std::invalid_argument("unknown kernel '" + s + "' (valid: " + valid_kernel_names() + ")");
}

// ---------------------------------------------------------------------------
// KernelSpec
// ---------------------------------------------------------------------------

struct KernelSpec {
  KernelFamily family = KernelFamily::RBF;
  int feature_dim = 1;  // dimension of the space the kernel sees
  int mixtures = 4;     // spectral Q

  // Unused slots stay empty (0×0) for families that do not need them.
  Tensor raw_variance;     // linear: v = softplus(raw)
  Tensor raw_lengthscale;  // rbf / matern: l = softplus(raw)
  Tensor offset;           // polynomial c, unconstrained
  Tensor raw_weights;      // spectral Q×1, w_q = softplus(raw)
  Tensor raw_means;        // spectral Q×P, unconstrained frequencies
  Tensor raw_scales;       // spectral Q×P, v_q = softplus(raw)
  Tensor raw_noise;        // shared observation noise, σ² = softplus(raw)

  // deep_features selects the lengthscale convention for kernels applied to
  // backbone outputs (l = √dim) rather than raw inputs (l = 1).
  static KernelSpec make(KernelFamily family, int feature_dim, bool deep_features,
                         int mixtures = 4) {
    if (feature_dim < 1) throw std::invalid_argument("feature_dim must be >= 1");
    if (mixtures < 1) throw std::invalid_argument("mixtures must be >= 1");
    KernelSpec s;
    s.family = family;
    s.feature_dim = feature_dim;
    s.mixtures = mixtures;
    s.raw_noise = Tensor::scalar(softplus_inverse(0.01), true);
    switch (family) {
      case KernelFamily::Linear:
        s.raw_variance = Tensor::scalar(softplus_inverse(1.0), true);
        break;
      case KernelFamily::RBF:
      case KernelFamily::Matern52: {
        const double l0 = deep_features ? std::sqrt(static_cast<double>(feature_dim)) : 1.0;
        s.raw_lengthscale = Tensor::scalar(softplus_inverse(l0), true);
        break;
      }
      case KernelFamily::Poly1:
      case KernelFamily::Poly2:
        s.offset = Tensor::scalar(0.0, true);
        break;
      case KernelFamily::Spectral: {
        const int q = mixtures, p = feature_dim;
        s.raw_weights = Tensor::constant(q, 1, softplus_inverse(1.0 / q)).clone(true);
        std::vector<double> means(static_cast<std::size_t>(q) * p);
        for (int qi = 0; qi < q; ++qi) {
          const double mu = q == 1 ? 1.25 : 2.5 * qi / (q - 1);  // spread over [0, 2.5]
          for (int pi = 0; pi < p; ++pi) means[static_cast<std::size_t>(qi) * p + pi] = mu;
        }
        s.raw_means = Tensor::from(q, p, std::move(means), true);
        s.raw_scales = Tensor::constant(q, p, softplus_inverse(1.0)).clone(true);
        break;
      }
      case KernelFamily::CosSim:
      case KernelFamily::BNCosSim:
        break;
    }
    return s;
  }

  int degree() const {
    if (family == KernelFamily::Poly1) return 1;
    if (family == KernelFamily::Poly2) return 2;
    throw std::logic_error("degree() on non-polynomial kernel");
  }

  double noise_variance() const { return softplus_value(raw_noise.value()); }
  Tensor noise_variance_node() const { return softplus(raw_noise); }

  std::vector<std::pair<std::string, Tensor>> named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto push = [&out](const char* name, const Tensor& t) {
      if (t.size() > 0) out.emplace_back(name, t);
    };
    push("raw_variance", raw_variance);
    push("raw_lengthscale", raw_lengthscale);
    push("offset", offset);
    push("raw_weights", raw_weights);
    push("raw_means", raw_means);
    push("raw_scales", raw_scales);
    push("raw_noise", raw_noise);
    return out;
  }

  std::vector<Tensor> trainable() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
  }

  KernelSpec clone(bool requires_grad) const {
    KernelSpec s = *this;
    auto cp = [requires_grad](const Tensor& t) {
      return t.size() > 0 ? t.clone(requires_grad) : Tensor();
    };
    s.raw_variance = cp(raw_variance);
    s.raw_lengthscale = cp(raw_lengthscale);
    s.offset = cp(offset);
    s.raw_weights = cp(raw_weights);
    s.raw_means = cp(raw_means);
    s.raw_scales = cp(raw_scales);
    s.raw_noise = cp(raw_noise);
    return s;
  }
};

// ---------------------------------------------------------------------------
// Scalar kernels (one pair of d-vectors at a time)
// ---------------------------------------------------------------------------

namespace detail {

inline void check_pair_dims(const Tensor& x, const Tensor& z) {
  if (x.cols() != 1 || z.cols() != 1 || x.rows() != z.rows())
    throw shape_error("kernel inputs must be column vectors of equal dimension");
}

}  // namespace detail

// v ⟨x, z⟩
inline Tensor linear_kernel(const KernelSpec& spec, const Tensor& x, const Tensor& z) {
  detail::check_pair_dims(x, z);
  return mul_scalar(matmul(transpose(x), z), softplus(spec.raw_variance));
}

// exp(−‖x−z‖² / 2l²)
inline Tensor rbf_kernel(const KernelSpec& spec, const Tensor& x, const Tensor& z) {
  detail::check_pair_dims(x, z);
  Tensor d = sub(x, z);
  Tensor ss = sum(mul(d, d));
  Tensor l = softplus(spec.raw_lengthscale);
  Tensor inv_2l2 = div(Tensor::scalar(1.0), scale(mul(l, l), 2.0));
  return exp(neg(mul_scalar(ss, inv_2l2)));
}

// (1 + √5 r + 5r²/3) exp(−√5 r) with r = ‖x−z‖ / l
inline Tensor matern52_kernel(const KernelSpec& spec, const Tensor& x, const Tensor& z) {
  detail::check_pair_dims(x, z);
  Tensor d = sub(x, z);
  Tensor r = mul_scalar(sqrt_clamped(sum(mul(d, d)), 1e-30),
                        div(Tensor::scalar(1.0), softplus(spec.raw_lengthscale)));
  const double sqrt5 = std::sqrt(5.0);
  Tensor s5r = scale(r, sqrt5);
  Tensor poly = add(add(Tensor::scalar(1.0), s5r), scale(mul(r, r), 5.0 / 3.0));
  return mul(poly, exp(neg(s5r)));
}

// (⟨x, z⟩ + c)^p, p ∈ {1, 2}
inline Tensor polynomial_kernel(const KernelSpec& spec, const Tensor& x, const Tensor& z) {
  detail::check_pair_dims(x, z);
  const int p = spec.degree();
  Tensor base = add_scalar(matmul(transpose(x), z), spec.offset);
  return p == 1 ? base : mul(base, base);
}

// Σ_q w_q Π_p exp(−2π² τ_p² v_q^(p)) cos(2π τ_p μ_q^(p)), τ = x − z
inline Tensor spectral_mixture_kernel(const KernelSpec& spec, const Tensor& x, const Tensor& z) {
  detail::check_pair_dims(x, z);
  if (x.rows() != spec.feature_dim)
    throw shape_error("spectral kernel: input dimension does not match spec");
  const int q = spec.mixtures, p = spec.feature_dim;
  Tensor w = softplus(spec.raw_weights);
  Tensor vs = softplus(spec.raw_scales);
  Tensor tau = sub(x, z);
  Tensor acc;
  for (int qi = 0; qi < q; ++qi) {
    Tensor term;
    for (int pi = 0; pi < p; ++pi) {
      Tensor tp = block(tau, pi, pi + 1, 0, 1);
      Tensor vqp = block(vs, qi, qi + 1, pi, pi + 1);
      Tensor mqp = block(spec.raw_means, qi, qi + 1, pi, pi + 1);
      Tensor e = exp(mul_scalar(mul(tp, tp), scale(vqp, -2.0 * M_PI * M_PI)));
      Tensor c = cos(mul_scalar(tp, scale(mqp, kTwoPi)));
      Tensor f = mul(e, c);
      term = term.size() == 0 ? f : mul(term, f);
    }
    Tensor weighted = mul(term, block(w, qi, qi + 1, 0, 1));
    acc = acc.size() == 0 ? weighted : add(acc, weighted);
  }
  return acc;
}

// ⟨x, z⟩ / ((‖x‖ + ε)(‖z‖ + ε))
inline Tensor cossim_kernel(const KernelSpec&, const Tensor& x, const Tensor& z) {
  detail::check_pair_dims(x, z);
  Tensor eps = Tensor::scalar(kCosSimNormEps);
  Tensor nx = add_scalar(sqrt_clamped(sum(mul(x, x)), 0.0), eps);
  Tensor nz = add_scalar(sqrt_clamped(sum(mul(z, z)), 0.0), eps);
  return div(matmul(transpose(x), z), mul(nx, nz));
}

// ---------------------------------------------------------------------------
// Feature preparation (matrix level)
// ---------------------------------------------------------------------------

// Rows divided by (‖row‖ + ε).
inline Tensor row_normalize(const Tensor& h) {
  Tensor sq = matmul(mul(h, h), Tensor::ones(h.cols(), 1));
  Tensor denom = add_scalar(sqrt_clamped(sq, 0.0), Tensor::scalar(kCosSimNormEps));
  return mul_colvec(h, div(Tensor::ones(h.rows(), 1), denom));
}

// Per-dimension centering and variance normalization over the batch rows.
inline Tensor bn_normalize(const Tensor& h) {
  const int n = h.rows();
  if (n < 2) throw std::invalid_argument("bn_normalize: batch statistics need >= 2 rows");
  Tensor onesrow = Tensor::ones(1, n);
  Tensor mean = scale(matmul(onesrow, h), 1.0 / n);
  Tensor centered = add_rowvec(h, scale(mean, -1.0));
  Tensor var = scale(matmul(onesrow, mul(centered, centered)), 1.0 / n);
  Tensor inv_std = div(Tensor::ones(1, h.cols()),
                       sqrt_clamped(add_scalar(var, Tensor::scalar(kBnVarEps)), 0.0));
  return mul_rowvec(centered, inv_std);
}

// Maps raw inputs through the backbone (when present) and applies the
// family's feature normalization. For BNCosSim the batch statistics come from
// exactly the rows passed in, so callers stack support ∪ query beforehand.
inline Tensor prepared_features(const KernelSpec& spec, const Backbone* backbone,
                                const Tensor& x) {
  Tensor h = backbone ? (*backbone)(x) : x;
  if (h.cols() != spec.feature_dim)
    throw shape_error("kernel expects feature dimension " + std::to_string(spec.feature_dim) +
                      ", got " + std::to_string(h.cols()));
  switch (spec.family) {
    case KernelFamily::CosSim:
      return row_normalize(h);
    case KernelFamily::BNCosSim:
      return row_normalize(bn_normalize(h));
    default:
      return h;
  }
}

// ---------------------------------------------------------------------------
// Pairwise kernel matrices on prepared features
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor pairwise_sqdist(const Tensor& a, const Tensor& b) {
  Tensor onescol = Tensor::ones(a.cols(), 1);
  Tensor sq_a = matmul(mul(a, a), onescol);
  Tensor sq_b = matmul(mul(b, b), onescol);
  Tensor cross = scale(matmul(a, transpose(b)), -2.0);
  return clamp_min(add_rowvec(add_colvec(cross, sq_a), transpose(sq_b)), 0.0);
}

}  // namespace detail

// k'(a_i, b_j) for every row pair of prepared features.
inline Tensor kernel_matrix(const KernelSpec& spec, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw shape_error("kernel_matrix: feature dims differ");
  switch (spec.family) {
    case KernelFamily::Linear:
      return mul_scalar(matmul(a, transpose(b)), softplus(spec.raw_variance));
    case KernelFamily::RBF: {
      Tensor l = softplus(spec.raw_lengthscale);
      Tensor inv_2l2 = div(Tensor::scalar(1.0), scale(mul(l, l), 2.0));
      return exp(neg(mul_scalar(detail::pairwise_sqdist(a, b), inv_2l2)));
    }
    case KernelFamily::Matern52: {
      Tensor inv_l = div(Tensor::scalar(1.0), softplus(spec.raw_lengthscale));
      Tensor r = mul_scalar(sqrt_clamped(detail::pairwise_sqdist(a, b), 1e-30), inv_l);
      const double sqrt5 = std::sqrt(5.0);
      Tensor s5r = scale(r, sqrt5);
      Tensor poly = add(add(Tensor::ones(r.rows(), r.cols()), s5r), scale(mul(r, r), 5.0 / 3.0));
      return mul(poly, exp(neg(s5r)));
    }
    case KernelFamily::Poly1:
      return add_scalar(matmul(a, transpose(b)), spec.offset);
    case KernelFamily::Poly2: {
      Tensor base = add_scalar(matmul(a, transpose(b)), spec.offset);
      return mul(base, base);
    }
    case KernelFamily::Spectral: {
      const int n = a.rows(), m = b.rows(), q = spec.mixtures, p = spec.feature_dim;
      Tensor w = softplus(spec.raw_weights);
      Tensor vs = softplus(spec.raw_scales);
      Tensor onesnm = Tensor::ones(n, m);
      std::vector<Tensor> tau(p), tau2(p);
      for (int pi = 0; pi < p; ++pi) {
        Tensor acol = block(a, 0, n, pi, pi + 1);
        Tensor bcol = block(b, 0, m, pi, pi + 1);
        tau[pi] = sub(mul_colvec(onesnm, acol), mul_rowvec(onesnm, transpose(bcol)));
        tau2[pi] = mul(tau[pi], tau[pi]);
      }
      Tensor acc;
      for (int qi = 0; qi < q; ++qi) {
        Tensor term;
        for (int pi = 0; pi < p; ++pi) {
          Tensor vqp = block(vs, qi, qi + 1, pi, pi + 1);
          Tensor mqp = block(spec.raw_means, qi, qi + 1, pi, pi + 1);
          Tensor e = exp(mul_scalar(tau2[pi], scale(vqp, -2.0 * M_PI * M_PI)));
          Tensor c = cos(mul_scalar(tau[pi], scale(mqp, kTwoPi)));
          Tensor f = mul(e, c);
          term = term.size() == 0 ? f : mul(term, f);
        }
        Tensor weighted = mul_scalar(term, block(w, qi, qi + 1, 0, 1));
        acc = acc.size() == 0 ? weighted : add(acc, weighted);
      }
      return acc;
    }
    case KernelFamily::CosSim:
    case KernelFamily::BNCosSim:
      // rows were unit-normalized by prepared_features
      return matmul(a, transpose(b));
  }
  throw std::logic_error("kernel_matrix: unhandled family");
}

// Diagonal k'(a_i, a_i) as an n×1 vector, without forming the full matrix.
inline Tensor kernel_diag(const KernelSpec& spec, const Tensor& a) {
  const int n = a.rows();
  Tensor rowsq = matmul(mul(a, a), Tensor::ones(a.cols(), 1));
  switch (spec.family) {
    case KernelFamily::Linear:
      return mul_scalar(rowsq, softplus(spec.raw_variance));
    case KernelFamily::RBF:
    case KernelFamily::Matern52:
      return Tensor::ones(n, 1);
    case KernelFamily::Poly1:
      return add_scalar(rowsq, spec.offset);
    case KernelFamily::Poly2: {
      Tensor base = add_scalar(rowsq, spec.offset);
      return mul(base, base);
    }
    case KernelFamily::Spectral:
      return mul_scalar(Tensor::ones(n, 1), sum(softplus(spec.raw_weights)));
    case KernelFamily::CosSim:
    case KernelFamily::BNCosSim:
      return rowsq;
  }
  throw std::logic_error("kernel_diag: unhandled family");
}

// ---------------------------------------------------------------------------
// Gram assembly
// ---------------------------------------------------------------------------

struct GramMatrix {
  Tensor values;
  bool is_self = false;
};

// Full deep-kernel Gram between X and Z. When Z is the same tensor as X the
// result is a self-Gram; otherwise BN statistics (if any) are taken over the
// combined X ∪ Z batch.
inline GramMatrix gram(const KernelSpec& spec, const Backbone* backbone, const Tensor& x,
                       const Tensor& z) {
  const bool self = x.same_node(z);
  if (self) {
    Tensor f = prepared_features(spec, backbone, x);
    return {kernel_matrix(spec, f, f), true};
  }
  if (x.cols() != z.cols()) throw shape_error("gram: input dims differ");
  Tensor stacked = vcat(x, z);
  Tensor f = prepared_features(spec, backbone, stacked);
  Tensor fa = block(f, 0, x.rows(), 0, f.cols());
  Tensor fb = block(f, x.rows(), stacked.rows(), 0, f.cols());
  return {kernel_matrix(spec, fa, fb), false};
}

// Cosine similarity Gram with centering statistics taken over both batches.
inline Tensor bn_cossim_kernel(const KernelSpec& spec, const Tensor& batch_x,
                               const Tensor& batch_z) {
  if (spec.family != KernelFamily::BNCosSim)
    throw std::invalid_argument("bn_cossim_kernel: spec family mismatch");
  return gram(spec, nullptr, batch_x, batch_z).values;
}

// K + (σ² + jitter)·I on a self-Gram.
inline Tensor add_noise_and_jitter(const GramMatrix& g, const KernelSpec& spec,
                                   double jitter = 1e-6) {
  if (!g.is_self) throw std::invalid_argument("add_noise_and_jitter: gram must be a self-Gram");
  return add_diag(g.values, spec.noise_variance_node(), jitter);
}

inline const std::vector<double>& default_jitter_schedule() {
  static const std::vector<double> schedule{1e-6, 1e-4, 1e-2};
  return schedule;
}

struct CholResult {
  Tensor l;
  Tensor k_noisy;
  double jitter;
};

// Factorizes K + (σ² + jitter)·I, escalating jitter through the schedule on
// failure; rethrows not_positive_definite if the whole schedule is exhausted.
inline CholResult cholesky_with_jitter(const GramMatrix& g, const KernelSpec& spec,
                                       const std::vector<double>& schedule = default_jitter_schedule()) {
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    Tensor k_noisy = add_noise_and_jitter(g, spec, schedule[i]);
    try {
      return {cholesky(k_noisy), k_noisy, schedule[i]};
    } catch (const not_positive_definite&) {
      if (i + 1 == schedule.size()) throw;
    }
  }
  throw std::logic_error("cholesky_with_jitter: empty schedule");
}

}  // namespace dkt
