#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <unordered_map>

#include "ououreg/errors.hpp"
#include "ououreg/newick_tree.hpp"
#include "ououreg/ou_kernel.hpp"

namespace ououreg {

/// How the between-species trait covariance treats the ancestral (y, theta)
/// covariance at the split.
enum class CovarianceForm {
  /// Var[e^{-a d/2} y_a + (a d/2) e^{-a d/2} theta_a], including the
  /// 2 * (a d/2) e^{-a d} Cov[y_a, theta_a] cross term. Matches simulation.
  kExact,
  /// Drops the cross term; kept for comparison against published tables.
  kWithoutCrossTerm,
};

struct CovarianceBundle {
  Eigen::MatrixXd predictor_cov;
  Eigen::MatrixXd trait_cov;
  Eigen::MatrixXd residual_cov;  // jitter already added to the diagonal
  double jitter = 0.0;
};

struct JitteredCholesky {
  Eigen::LLT<Eigen::MatrixXd> llt;
  double jitter = 0.0;
};

/// Cholesky factorization, retrying with 1e-10 * mean(diag) added to the
/// diagonal and escalating by 10x up to 1e-6 * mean(diag).
inline JitteredCholesky cholesky_with_jitter(const Eigen::MatrixXd& m) {
  JitteredCholesky out;
  if (m.rows() == 0 || m.rows() != m.cols()) throw NumericalError("covariance must be square and non-empty");
  if (!m.allFinite()) throw NumericalError("covariance has non-finite entries");
  out.llt.compute(m);
  if (out.llt.info() == Eigen::Success) return out;

  const double scale = m.diagonal().mean();
  if (scale > 0.0) {
    for (double rel = 1e-10; rel <= 1.0001e-6; rel *= 10.0) {
      const double jitter = rel * scale;
      Eigen::MatrixXd shifted = m;
      shifted.diagonal().array() += jitter;
      out.llt.compute(shifted);
      if (out.llt.info() == Eigen::Success) {
        out.jitter = jitter;
        return out;
      }
    }
  }
  throw NumericalError("covariance is not positive definite even after maximum jitter");
}

namespace detail {

inline double require_ultrametric_depth(const PhyloTree& tree) {
  return validate_ultrametric(tree);
}

// Ancestral-state quantities depend on the pair only through the shared time,
// which takes at most (internal nodes) distinct values.
class SharedTimeCache {
 public:
  explicit SharedTimeCache(const OUOUParams& p) : params_(p) {}

  const VarCov& at(double shared_time) {
    auto it = cache_.find(shared_time);
    if (it != cache_.end()) return it->second;
    return cache_.emplace(shared_time, var_cov(params_, shared_time)).first->second;
  }

 private:
  const OUOUParams& params_;
  std::unordered_map<double, VarCov> cache_;
};

}  // namespace detail

/// OU covariance of the predictor across tips:
/// sigma_x^2 e^{-alpha d_ij} (1 - e^{-2 alpha t_a}) / (2 alpha).
inline Eigen::MatrixXd predictor_cov(const PhyloTree& tree, double alpha, double sigma_x) {
  if (!std::isfinite(alpha) || alpha <= 0.0) throw InputError("alpha must be positive");
  if (!std::isfinite(sigma_x) || sigma_x < 0.0) throw InputError("sigma_x must be non-negative");
  detail::require_ultrametric_depth(tree);
  const auto& shared = tree.shared_times();
  const auto& div = tree.divergence_times();
  const auto n = shared.rows();
  const double s2 = sigma_x * sigma_x;
  Eigen::MatrixXd out(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      const double v = s2 * std::exp(-alpha * div(i, j)) * -std::expm1(-2.0 * alpha * shared(i, j)) /
                       (2.0 * alpha);
      out(i, j) = v;
      out(j, i) = v;
    }
  }
  return out;
}

/// Covariance of the trait between species. Diagonal entries reduce to
/// Var[y_T] at the tip depth.
inline Eigen::MatrixXd trait_cov(const PhyloTree& tree, const OUOUParams& params,
                                 CovarianceForm form = CovarianceForm::kExact) {
  detail::require_ultrametric_depth(tree);
  const auto& shared = tree.shared_times();
  const auto& div = tree.divergence_times();
  const auto n = shared.rows();
  const double a = params.alpha();
  const double cross_weight = form == CovarianceForm::kExact ? 1.0 : 0.0;
  detail::SharedTimeCache cache(params);
  Eigen::MatrixXd out(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      const VarCov& anc = cache.at(shared(i, j));
      const double d = div(i, j);
      const double half = 0.5 * a * d;  // alpha times per-lineage time
      const double v = std::exp(-a * d) * (anc.var_y + cross_weight * 2.0 * half * anc.cov_y_theta +
                                           half * half * anc.var_theta);
      out(i, j) = v;
      out(j, i) = v;
    }
  }
  return out;
}

/// Residual covariance of the regression on the optimum:
/// V_ij = Cov[y_i, y_j] - 2 p(alpha t_a) Cov[y_a, theta_a] + p(alpha t_a) Var[theta_a].
/// No jitter is applied here.
inline Eigen::MatrixXd residual_cov(const PhyloTree& tree, const OUOUParams& params,
                                    CovarianceForm form = CovarianceForm::kExact) {
  Eigen::MatrixXd v = trait_cov(tree, params, form);
  const auto& shared = tree.shared_times();
  const auto n = shared.rows();
  const double a = params.alpha();
  detail::SharedTimeCache cache(params);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      const double ta = shared(i, j);
      const VarCov& anc = cache.at(ta);
      const double p = slope_factor_p(a * ta);
      const double adj = -2.0 * p * anc.cov_y_theta + p * anc.var_theta;
      v(i, j) += adj;
      if (i != j) v(j, i) += adj;
    }
  }
  return v;
}

/// All three matrices for one parameter set, with V made factorizable.
inline CovarianceBundle build_covariance(const PhyloTree& tree, const OUOUParams& params,
                                         CovarianceForm form = CovarianceForm::kExact) {
  CovarianceBundle b;
  b.predictor_cov = predictor_cov(tree, params.alpha(), params.sigma_x());
  b.trait_cov = trait_cov(tree, params, form);
  b.residual_cov = residual_cov(tree, params, form);
  const auto chol = cholesky_with_jitter(b.residual_cov);
  b.jitter = chol.jitter;
  b.residual_cov.diagonal().array() += chol.jitter;
  return b;
}

}  // namespace ououreg
