#pragma once

#include <cmath>
#include <string>

#include "ououreg/errors.hpp"

namespace ououreg {

/// Parameters of the coupled trait/optimum OU model. The optimum's diffusion
/// (|b1| * sigma_x) and the ancestral optimum (b0 + b1 * x_a) are derived, so
/// they cannot drift out of sync with the regression coefficients.
class OUOUParams {
 public:
  static OUOUParams make(double alpha, double sigma_y, double sigma_x, double b0, double b1,
                         double x_a, double y_a) {
    OUOUParams p;
    p.alpha_ = alpha;
    p.sigma_y_ = sigma_y;
    p.sigma_x_ = sigma_x;
    p.b0_ = b0;
    p.b1_ = b1;
    p.x_a_ = x_a;
    p.y_a_ = y_a;
    p.check();
    return p;
  }

  double alpha() const noexcept { return alpha_; }
  double sigma_y() const noexcept { return sigma_y_; }
  double sigma_x() const noexcept { return sigma_x_; }
  double b0() const noexcept { return b0_; }
  double b1() const noexcept { return b1_; }
  double x_a() const noexcept { return x_a_; }
  double y_a() const noexcept { return y_a_; }
  double sigma_theta() const noexcept { return std::abs(b1_) * sigma_x_; }
  double theta_a() const noexcept { return b0_ + b1_ * x_a_; }

  OUOUParams with_alpha(double alpha) const { return make(alpha, sigma_y_, sigma_x_, b0_, b1_, x_a_, y_a_); }
  OUOUParams with_sigma_y(double s) const { return make(alpha_, s, sigma_x_, b0_, b1_, x_a_, y_a_); }
  OUOUParams with_sigma_x(double s) const { return make(alpha_, sigma_y_, s, b0_, b1_, x_a_, y_a_); }
  OUOUParams with_regression(double b0, double b1) const {
    return make(alpha_, sigma_y_, sigma_x_, b0, b1, x_a_, y_a_);
  }
  OUOUParams with_ancestral(double x_a, double y_a) const {
    return make(alpha_, sigma_y_, sigma_x_, b0_, b1_, x_a, y_a);
  }

 private:
  OUOUParams() = default;

  void check() const {
    auto finite = [](double v) { return std::isfinite(v); };
    if (!finite(alpha_) || alpha_ <= 0.0) throw InputError("alpha must be positive and finite");
    if (!finite(sigma_y_) || sigma_y_ < 0.0) throw InputError("sigma_y must be non-negative");
    if (!finite(sigma_x_) || sigma_x_ < 0.0) throw InputError("sigma_x must be non-negative");
    if (!finite(b0_) || !finite(b1_) || !finite(x_a_) || !finite(y_a_)) {
      throw InputError("regression coefficients and ancestral values must be finite");
    }
  }

  double alpha_ = 1.0;
  double sigma_y_ = 0.0;
  double sigma_x_ = 0.0;
  double b0_ = 0.0;
  double b1_ = 0.0;
  double x_a_ = 0.0;
  double y_a_ = 0.0;
};

struct Moments {
  double mean;
  double second;  // raw second moment E[z^2]
};

struct VarCov {
  double var_theta;
  double cov_y_theta;
  double var_y;
};

namespace detail {

inline void require_time(double t) {
  if (!std::isfinite(t) || t < 0.0) throw InputError("time must be finite and >= 0");
}

/// e^{-x} * sum_{k >= m} x^k / k!, i.e. the regularized lower incomplete gamma
/// P(m, x). Gives 1 - e^{-x}, 1 - e^{-x}(1 + x), ... without cancellation.
inline double exp_tail(double x, int m) {
  if (x <= 0.0) return 0.0;
  if (x < 2.0) {
    double term = 1.0;
    for (int k = 1; k <= m; ++k) term *= x / k;
    double sum = 0.0;
    for (int k = m; k < m + 60; ++k) {
      sum += term;
      if (term < 1e-18 * sum) break;
      term *= x / (k + 1);
    }
    return std::exp(-x) * sum;
  }
  double head = 0.0;
  double term = 1.0;
  for (int k = 0; k < m; ++k) {
    head += term;
    term *= x / (k + 1);
  }
  return -std::expm1(-x) - (head - 1.0) * std::exp(-x);
}

}  // namespace detail

/// Attenuation of the optimal slope after elapsed scaled time u = alpha * t:
/// (1 - e^{-2u} - u e^{-2u}) / (2 (1 - e^{-2u})). Rises from 1/4 to 1/2.
inline double slope_factor_p(double u) {
  if (!std::isfinite(u) || u < 0.0) throw InputError("slope factor needs finite u >= 0");
  if (u < 1e-4) return 0.25 + u / 4.0 - u * u / 12.0;
  const double one_minus = -std::expm1(-2.0 * u);
  return (one_minus - u * std::exp(-2.0 * u)) / (2.0 * one_minus);
}

/// Intercept part of the evolutionary regression: the ancestral trait decays
/// toward the optimum at the ancestral predictor.
inline double intercept_q(double u, double b0, double b1, double x_a, double y_a) {
  if (!std::isfinite(u) || u < 0.0) throw InputError("intercept needs finite u >= 0");
  if (!std::isfinite(b0) || !std::isfinite(b1) || !std::isfinite(x_a) || !std::isfinite(y_a)) {
    throw InputError("intercept inputs must be finite");
  }
  return (b0 + b1 * x_a) * -std::expm1(-u) + y_a * std::exp(-u);
}

/// E[y_t | x_t] = q(alpha t) + p(alpha t) b1 (x - x_a).
inline double evolutionary_regression(const OUOUParams& p, double t, double x) {
  detail::require_time(t);
  const double u = p.alpha() * t;
  return intercept_q(u, p.b0(), p.b1(), p.x_a(), p.y_a()) +
         slope_factor_p(u) * p.b1() * (x - p.x_a());
}

struct OptimumRegression {
  double beta0;
  double beta1;
};

/// Regression of the trait on its optimum, E[y_t | theta_t] = beta0 + beta1 theta_t,
/// with the ancestral (theta_a, y_a) as initial conditions.
inline OptimumRegression regression_on_optimum(const OUOUParams& p, double t) {
  detail::require_time(t);
  const double a = p.alpha();
  const double theta0 = p.theta_a();
  const double decay = std::exp(-a * t);
  const double beta1 = slope_factor_p(a * t);
  return {a * theta0 * t * decay + p.y_a() * decay - beta1 * theta0, beta1};
}

/// Mean and raw second moment of the optimum.
inline Moments theta_moments(const OUOUParams& p, double t) {
  detail::require_time(t);
  const double a = p.alpha();
  const double s2 = p.sigma_theta() * p.sigma_theta();
  const double theta0 = p.theta_a();
  const double e2 = std::exp(-2.0 * a * t);
  return {theta0 * std::exp(-a * t), s2 / (2.0 * a) * -std::expm1(-2.0 * a * t) + theta0 * theta0 * e2};
}

/// E[y_t theta_t].
inline double cross_moment_y_theta(const OUOUParams& p, double t) {
  detail::require_time(t);
  const double a = p.alpha();
  const double s2 = p.sigma_theta() * p.sigma_theta();
  const double theta0 = p.theta_a();
  const double e2 = std::exp(-2.0 * a * t);
  return s2 / (4.0 * a) * -std::expm1(-2.0 * a * t) + p.y_a() * theta0 * e2 +
         (theta0 * theta0 * a - s2 / 2.0) * t * e2;
}

/// Mean and raw second moment of the trait.
///
/// The t^2 e^{-2 alpha t} coefficient is alpha^2 theta0^2 - alpha sigma_theta^2 / 2;
/// this is what integrating dE[y^2]/dt = sigma_y^2 - 2 alpha E[y^2] + 2 alpha E[y theta]
/// gives (the squared diffusion keeps the term dimensionally consistent).
inline Moments y_moments(const OUOUParams& p, double t) {
  detail::require_time(t);
  const double a = p.alpha();
  const double sy2 = p.sigma_y() * p.sigma_y();
  const double st2 = p.sigma_theta() * p.sigma_theta();
  const double theta0 = p.theta_a();
  const double y0 = p.y_a();
  const double e1 = std::exp(-a * t);
  const double e2 = std::exp(-2.0 * a * t);
  const double mean = a * theta0 * t * e1 + y0 * e1;
  const double stationary = sy2 / (2.0 * a) + st2 / (4.0 * a);
  const double second = stationary * -std::expm1(-2.0 * a * t) +
                        (a * a * theta0 * theta0 - a * st2 / 2.0) * t * t * e2 +
                        (2.0 * a * y0 * theta0 - st2 / 2.0) * t * e2 + y0 * y0 * e2;
  return {mean, second};
}

/// Var[theta_t], Cov[y_t, theta_t], Var[y_t] from a deterministic start.
/// Evaluated through incomplete-gamma tails so that small alpha*t keeps full
/// relative precision.
inline VarCov var_cov(const OUOUParams& p, double t) {
  detail::require_time(t);
  const double a = p.alpha();
  const double sy2 = p.sigma_y() * p.sigma_y();
  const double st2 = p.sigma_theta() * p.sigma_theta();
  const double x = 2.0 * a * t;
  return {st2 / (2.0 * a) * detail::exp_tail(x, 1),
          st2 / (4.0 * a) * detail::exp_tail(x, 2),
          sy2 / (2.0 * a) * detail::exp_tail(x, 1) + st2 / (4.0 * a) * detail::exp_tail(x, 3)};
}

}  // namespace ououreg
