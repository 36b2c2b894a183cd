#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/QR>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "ououreg/errors.hpp"
#include "ououreg/newick_tree.hpp"
#include "ououreg/optimizer.hpp"
#include "ououreg/ou_kernel.hpp"
#include "ououreg/phylo_cov.hpp"
#include "ououreg/traits.hpp"

namespace ououreg {

// ---------------------------------------------------------------------------
// Linear-model building blocks

/// n x 2 design: a column of ones and slope_scale * (x - x_a).
inline Eigen::MatrixXd design_matrix(const Eigen::VectorXd& x, double x_a, double slope_scale) {
  Eigen::MatrixXd X(x.size(), 2);
  X.col(0).setOnes();
  X.col(1) = slope_scale * (x.array() - x_a).matrix();
  return X;
}

struct PredictorEstimate {
  double mean;    // GLS ancestral/mean predictor value
  double sigma2;  // diffusion variance of the predictor
};

/// Predictor mean and rate under the OU covariance with unit diffusion:
/// mean = (1' T^-1 1)^-1 1' T^-1 x, sigma2 = (x - mean)' T^-1 (x - mean) / (n - 1).
inline PredictorEstimate x_mle(const PhyloTree& tree, const Eigen::VectorXd& x, double alpha) {
  const auto n = x.size();
  if (n < 2) throw InputError("predictor estimates need at least two species");
  if (static_cast<std::size_t>(n) != tree.tip_count()) throw InputError("predictor length != tip count");
  const Eigen::MatrixXd t_alpha = predictor_cov(tree, alpha, 1.0);
  const auto chol = cholesky_with_jitter(t_alpha);
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(n);
  const Eigen::VectorXd tinv_one = chol.llt.solve(ones);
  const double mean = tinv_one.dot(x) / tinv_one.sum();
  const Eigen::VectorXd centered = (x.array() - mean).matrix();
  const Eigen::VectorXd half = chol.llt.matrixL().solve(centered);
  return {mean, half.squaredNorm() / static_cast<double>(n - 1)};
}

/// b = (X' V^-1 X)^-1 X' V^-1 y via the Cholesky factor of V: both sides are
/// whitened with L^-1 and the resulting least-squares problem is solved by QR.
inline Eigen::VectorXd gls_solve(const Eigen::MatrixXd& X, const Eigen::LLT<Eigen::MatrixXd>& v_chol,
                                 const Eigen::VectorXd& y) {
  if (X.rows() != y.size() || v_chol.rows() != y.size()) throw InputError("GLS dimension mismatch");
  const Eigen::MatrixXd wx = v_chol.matrixL().solve(X);
  const Eigen::VectorXd wy = v_chol.matrixL().solve(y);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(wx);
  qr.setThreshold(1e-12);
  if (qr.rank() < X.cols()) {
    throw InputError("design matrix is rank deficient (is the predictor constant?)");
  }
  return qr.solve(wy);
}

inline Eigen::VectorXd gls_solve(const Eigen::MatrixXd& X, const Eigen::MatrixXd& V, const Eigen::VectorXd& y) {
  Eigen::LLT<Eigen::MatrixXd> llt(V);
  if (llt.info() != Eigen::Success) throw NumericalError("residual covariance is not positive definite");
  return gls_solve(X, llt, y);
}

/// Gaussian log-density of y ~ N(Xb, V) from the Cholesky factor of V.
inline double log_likelihood(const Eigen::VectorXd& y, const Eigen::MatrixXd& X, const Eigen::VectorXd& b,
                             const Eigen::LLT<Eigen::MatrixXd>& v_chol) {
  const auto n = static_cast<double>(y.size());
  const Eigen::VectorXd resid = y - X * b;
  const Eigen::VectorXd z = v_chol.matrixL().solve(resid);
  const double log_det = 2.0 * v_chol.matrixLLT().diagonal().array().log().sum();
  return -0.5 * n * std::log(2.0 * std::numbers::pi) - 0.5 * log_det - 0.5 * z.squaredNorm();
}

inline double log_likelihood(const Eigen::VectorXd& y, const Eigen::MatrixXd& X, const Eigen::VectorXd& b,
                             const Eigen::MatrixXd& V) {
  Eigen::LLT<Eigen::MatrixXd> llt(V);
  if (llt.info() != Eigen::Success) throw NumericalError("residual covariance is not positive definite");
  return log_likelihood(y, X, b, llt);
}

/// Squared Pearson correlation between observed and fitted values.
inline double r_squared(const Eigen::VectorXd& y, const Eigen::VectorXd& fitted) {
  if (y.size() < 2 || y.size() != fitted.size()) throw InputError("r_squared needs n >= 2 matched values");
  const Eigen::ArrayXd dy = y.array() - y.mean();
  const Eigen::ArrayXd df = fitted.array() - fitted.mean();
  const double syy = dy.square().sum();
  if (syy == 0.0) throw InputError("r_squared undefined: observed values have zero variance");
  const double sff = df.square().sum();
  if (sff == 0.0) return 0.0;
  const double sfy = (dy * df).sum();
  return sfy * sfy / (syy * sff);
}

/// Small-sample corrected AIC: -2 ll + 2k + 2k(k+1)/(n-k-1).
inline double aicc(double log_lik, int k, int n) {
  if (k < 0) throw InputError("parameter count must be non-negative");
  if (n <= k + 1) throw InputError("AICc needs n > k + 1");
  return -2.0 * log_lik + 2.0 * k + 2.0 * k * (k + 1.0) / (n - k - 1.0);
}

// ---------------------------------------------------------------------------
// Models and fitting

/// A regression model variant: how the slope is attenuated at scaled time
/// u = alpha * T, and how the residual covariance is built.
struct ModelHook {
  std::string name;
  std::function<double(double)> slope_scale;
  std::function<Eigen::MatrixXd(const PhyloTree&, const OUOUParams&)> residual_cov;
};

inline ModelHook ouou_hook() {
  return {"ouou", [](double u) { return slope_factor_p(u); },
          [](const PhyloTree& tree, const OUOUParams& p) { return residual_cov(tree, p); }};
}

/// Same residual structure as OUOU but without slope attenuation.
inline ModelHook unscaled_hook() {
  return {"unscaled", [](double) { return 1.0; },
          [](const PhyloTree& tree, const OUOUParams& p) { return residual_cov(tree, p); }};
}

struct FitConfig {
  /// Outer loop stops once ||b_new - b_old|| < delta.
  double delta = 1e-5;
  int max_outer = 100;
  /// Defaults to 50 / T.
  std::optional<double> alpha_max;
  /// Lower alpha bound as a fraction of 1 / T.
  double alpha_min_factor = 1e-4;
  PowellOptions powell{};
  /// Initial (alpha, sigma_y^2); defaults to (1 / T, 2 var(y) / T) pulled inside the box.
  std::optional<std::array<double, 2>> start;
  /// Skip the likelihood search and use these (alpha, sigma_y^2) throughout.
  std::optional<std::array<double, 2>> fixed;
  /// Number of estimated parameters entering AICc.
  int parameter_count = 4;
  double ultrametric_tol = 1e-6;
};

struct FitReport {
  std::string model;
  double b0 = 0.0;
  double b1 = 0.0;
  double alpha_hat = 0.0;
  double sigma_y2_hat = 0.0;
  double sigma_x2_hat = 0.0;
  double x_mean_hat = 0.0;
  double log_likelihood = 0.0;
  double r_squared = 0.0;
  double aicc = 0.0;
  int iterations = 0;
  std::vector<double> delta_trace;
  bool converged = false;
  std::size_t n = 0;
  double tree_depth = 0.0;
  double jitter = 0.0;
};

/// Everything the likelihood needs at one (alpha, sigma_y^2, b).
struct FitPoint {
  PredictorEstimate predictor;
  OUOUParams params;
  Eigen::MatrixXd X;
  Eigen::LLT<Eigen::MatrixXd> v_chol;
  double jitter;
  double log_likelihood;
};

/// Builds design and residual covariance at (alpha, sigma_y^2) with the
/// optimum diffusion derived from |b1| * sigma_x and evaluates the likelihood.
inline FitPoint evaluate_at(const PhyloTree& tree, const AlignedTraits& data, const ModelHook& hook,
                            double depth, double alpha, double sigma_y2, const Eigen::Vector2d& b,
                            const std::optional<PredictorEstimate>& predictor = std::nullopt) {
  const PredictorEstimate pe = predictor ? *predictor : x_mle(tree, data.x, alpha);
  const auto params = OUOUParams::make(alpha, std::sqrt(std::max(sigma_y2, 0.0)), std::sqrt(pe.sigma2), b[0],
                                       b[1], pe.mean, b[0]);
  Eigen::MatrixXd X = design_matrix(data.x, pe.mean, hook.slope_scale(alpha * depth));
  auto chol = cholesky_with_jitter(hook.residual_cov(tree, params));
  const double ll = log_likelihood(data.y, X, b, chol.llt);
  return {pe, params, std::move(X), std::move(chol.llt), chol.jitter, ll};
}

namespace detail {

inline void ols_slope_seed(const AlignedTraits& data, Eigen::Vector2d& b) {
  const Eigen::MatrixXd X = design_matrix(data.x, data.x.mean(), 1.0);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  qr.setThreshold(1e-12);
  if (qr.rank() < 2) throw InputError("predictor is constant; the slope is not identifiable");
  b = qr.solve(data.y);
}

}  // namespace detail

/// Iterative GLS / maximum-likelihood fit.
///
/// 1. OLS seed on the unscaled design (x - mean x).
/// 2. Powell search of (alpha, sigma_y^2) maximizing the likelihood at the current b.
/// 3. GLS update of b at the new (alpha, sigma_y^2).
/// 4. Repeat 2-3 until ||b_new - b_old|| < delta or max_outer iterations.
inline FitReport fit_ouou(const PhyloTree& tree, const TraitTable& traits, const FitConfig& cfg = {},
                          const ModelHook& hook = ouou_hook()) {
  const double depth = validate_ultrametric(tree, cfg.ultrametric_tol);
  if (!(depth > 0.0)) throw TreeError("tree depth must be positive");
  const AlignedTraits data = align_traits(tree, traits);
  const auto n = data.y.size();
  if (n < 3) throw InputError("fitting needs at least three species");
  if (n <= cfg.parameter_count + 1) throw InputError("too few species for AICc with this parameter count");
  if (!(cfg.delta > 0.0)) throw InputError("delta must be positive");

  Eigen::Vector2d b;
  detail::ols_slope_seed(data, b);

  const double alpha_hi = cfg.alpha_max.value_or(50.0 / depth);
  const double alpha_lo = cfg.alpha_min_factor / depth;
  if (!(alpha_hi > alpha_lo)) throw InputError("alpha_max must exceed the minimum alpha " + std::to_string(alpha_lo));
  const double y_range = data.y.maxCoeff() - data.y.minCoeff();
  const double s2_hi = y_range > 0.0 ? y_range : 1.0;
  const BoxDomain box({alpha_lo, 0.0}, {alpha_hi, s2_hi});

  auto inside = [&](std::array<double, 2> p) {
    std::vector<double> v{p[0], p[1]};
    for (std::size_t i = 0; i < 2; ++i) {
      const double w = box.upper()[i] - box.lower()[i];
      v[i] = std::clamp(v[i], box.lower()[i] + 1e-6 * w, box.upper()[i] - 1e-6 * w);
    }
    return v;
  };

  std::vector<double> current;
  if (cfg.fixed) {
    current = {(*cfg.fixed)[0], (*cfg.fixed)[1]};
  } else if (cfg.start) {
    current = inside(*cfg.start);
  } else {
    const double a0 = 1.0 / depth;
    const double var_y = (data.y.array() - data.y.mean()).square().sum() / static_cast<double>(n - 1);
    current = inside({a0, 2.0 * a0 * var_y});
  }

  FitReport report;
  report.model = hook.name;
  report.n = static_cast<std::size_t>(n);
  report.tree_depth = depth;

  // The predictor estimates depend on alpha only; line searches along the
  // sigma_y^2 axis reuse them.
  double cached_alpha = std::numeric_limits<double>::quiet_NaN();
  PredictorEstimate cached_pe{};
  auto predictor_at = [&](double alpha) {
    if (alpha != cached_alpha) {
      cached_pe = x_mle(tree, data.x, alpha);
      cached_alpha = alpha;
    }
    return cached_pe;
  };

  // Infeasible points (V not factorizable) get a large finite penalty so the
  // line searches can move away from them.
  constexpr double kPenalty = 1e100;

  for (int iter = 1; iter <= cfg.max_outer; ++iter) {
    if (!cfg.fixed) {
      auto neg_ll = [&](const std::vector<double>& p) {
        try {
          const double ll = evaluate_at(tree, data, hook, depth, p[0], p[1], b, predictor_at(p[0])).log_likelihood;
          return std::isfinite(ll) ? -ll : kPenalty;
        } catch (const NumericalError&) {
          return kPenalty;
        }
      };
      const OptimResult opt = minimize_powell(neg_ll, current, box, cfg.powell);
      current = opt.x;
    }

    const FitPoint fp = evaluate_at(tree, data, hook, depth, current[0], current[1], b, predictor_at(current[0]));
    const Eigen::Vector2d b_new = gls_solve(fp.X, fp.v_chol, data.y);
    const double delta = (b_new - b).norm();
    report.delta_trace.push_back(delta);
    report.iterations = iter;
    b = b_new;
    if (delta < cfg.delta) {
      report.converged = true;
      break;
    }
    if (!cfg.fixed) current = inside({current[0], current[1]});
  }

  const FitPoint final_point = evaluate_at(tree, data, hook, depth, current[0], current[1], b, predictor_at(current[0]));
  report.b0 = b[0];
  report.b1 = b[1];
  report.alpha_hat = current[0];
  report.sigma_y2_hat = current[1];
  report.sigma_x2_hat = final_point.predictor.sigma2;
  report.x_mean_hat = final_point.predictor.mean;
  report.log_likelihood = final_point.log_likelihood;
  report.jitter = final_point.jitter;
  const Eigen::VectorXd fitted = final_point.X * b;
  // r^2 is undefined for a constant trait; the fit itself is still valid.
  const bool y_varies = data.y.maxCoeff() > data.y.minCoeff();
  report.r_squared = y_varies ? r_squared(data.y, fitted) : std::numeric_limits<double>::quiet_NaN();
  report.aicc = aicc(report.log_likelihood, cfg.parameter_count, static_cast<int>(n));
  return report;
}

/// Fitted evolutionary regression line at the tip depth.
inline double fitted_curve(const FitReport& r, const ModelHook& hook, double x) {
  return r.b0 + hook.slope_scale(r.alpha_hat * r.tree_depth) * r.b1 * (x - r.x_mean_hat);
}

struct ComparisonRow {
  std::string model;
  std::optional<FitReport> fit;
  std::string error;  // set when the fit failed
  double delta_aicc = std::numeric_limits<double>::quiet_NaN();
  bool co_supported = false;
};

/// Fits every model; AICc differences are taken relative to the best model
/// and models within 2 units of it are flagged co-supported. A failing model
/// is reported in its row and does not stop the others.
inline std::vector<ComparisonRow> compare_models(const PhyloTree& tree, const TraitTable& traits,
                                                 const std::vector<ModelHook>& hooks, const FitConfig& cfg = {}) {
  if (hooks.empty()) throw InputError("model comparison needs at least one model");
  std::vector<ComparisonRow> rows;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& hook : hooks) {
    ComparisonRow row;
    row.model = hook.name;
    try {
      row.fit = fit_ouou(tree, traits, cfg, hook);
      best = std::min(best, row.fit->aicc);
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  for (auto& row : rows) {
    if (!row.fit) continue;
    row.delta_aicc = row.fit->aicc - best;
    row.co_supported = row.delta_aicc <= 2.0;
  }
  return rows;
}

}  // namespace ououreg
