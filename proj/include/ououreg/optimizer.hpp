#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ououreg/errors.hpp"

namespace ououreg {

/// Axis-aligned search box. Every coordinate must have finite lower < upper.
class BoxDomain {
 public:
  BoxDomain(std::vector<double> lower, std::vector<double> upper)
      : lower_(std::move(lower)), upper_(std::move(upper)) {
    if (lower_.size() != upper_.size() || lower_.empty()) {
      throw InputError("box bounds must be non-empty and of equal dimension");
    }
    for (std::size_t i = 0; i < lower_.size(); ++i) {
      if (!std::isfinite(lower_[i]) || !std::isfinite(upper_[i]) || !(lower_[i] < upper_[i])) {
        throw InputError("box bounds need finite lower < upper in coordinate " + std::to_string(i));
      }
    }
  }

  std::size_t dimension() const noexcept { return lower_.size(); }
  const std::vector<double>& lower() const noexcept { return lower_; }
  const std::vector<double>& upper() const noexcept { return upper_; }

  bool contains(const std::vector<double>& x) const {
    if (x.size() != dimension()) return false;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (!(x[i] >= lower_[i] && x[i] <= upper_[i])) return false;
    }
    return true;
  }

  bool strictly_contains(const std::vector<double>& x) const {
    if (x.size() != dimension()) return false;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (!(x[i] > lower_[i] && x[i] < upper_[i])) return false;
    }
    return true;
  }

  void clamp(std::vector<double>& x) const {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i], lower_[i], upper_[i]);
  }

 private:
  std::vector<double> lower_;
  std::vector<double> upper_;
};

struct LineResult {
  double x;
  double value;
  std::size_t evaluations;
};

struct OptimResult {
  std::vector<double> x;
  double value = 0.0;
  std::size_t evaluations = 0;
  std::size_t cycles = 0;
  bool converged = false;
  /// Objective at the end of every direction-set cycle.
  std::vector<double> cycle_values;
};

struct PowellOptions {
  /// Stop when one full cycle lowers the objective by less than tol * (|f| + tol).
  double tol = 1e-10;
  int max_iter = 200;
  /// Absolute tolerance for each line search, as a fraction of the feasible chord.
  double line_tol = 1e-10;
};

namespace detail {

template <class F>
double checked_eval(F& f, double x) {
  const double v = f(x);
  if (std::isnan(v) || v == std::numeric_limits<double>::infinity() ||
      v == -std::numeric_limits<double>::infinity()) {
    std::ostringstream msg;
    msg.precision(17);
    msg << "objective is not finite at " << x;
    throw NumericalError(msg.str());
  }
  return v;
}

// Brent's localmin on [a, b]: golden-section steps with parabolic
// interpolation when it is safe. Stops once the bracket is narrower than
// 4 * (rel * |x| + abs_tol).
template <class F>
LineResult brent(F& f, double a, double b, double abs_tol, double rel) {
  constexpr double kGolden = 0.3819660112501051;  // (3 - sqrt 5) / 2
  std::size_t evals = 0;
  double x = a + kGolden * (b - a);
  double w = x, v = x;
  double fx = checked_eval(f, x);
  ++evals;
  double fw = fx, fv = fx;
  double d = 0.0, e = 0.0;
  for (int iter = 0; iter < 500; ++iter) {
    const double m = 0.5 * (a + b);
    const double tol = rel * std::abs(x) + abs_tol;
    const double t2 = 2.0 * tol;
    if (std::abs(x - m) <= t2 - 0.5 * (b - a)) break;
    bool golden = true;
    if (std::abs(e) > tol) {
      double r = (x - w) * (fx - fv);
      double q = (x - v) * (fx - fw);
      double p = (x - v) * q - (x - w) * r;
      q = 2.0 * (q - r);
      if (q > 0.0) p = -p;
      q = std::abs(q);
      r = e;
      e = d;
      if (std::abs(p) < std::abs(0.5 * q * r) && p > q * (a - x) && p < q * (b - x)) {
        d = p / q;
        const double u = x + d;
        if (u - a < t2 || b - u < t2) d = x < m ? tol : -tol;
        golden = false;
      }
    }
    if (golden) {
      e = (x < m ? b : a) - x;
      d = kGolden * e;
    }
    const double u = std::abs(d) >= tol ? x + d : x + (d > 0.0 ? tol : -tol);
    const double fu = checked_eval(f, u);
    ++evals;
    if (fu <= fx) {
      (u < x ? b : a) = x;
      v = w; fv = fw;
      w = x; fw = fx;
      x = u; fx = fu;
    } else {
      (u < x ? a : b) = u;
      if (fu <= fw || w == x) {
        v = w; fv = fw;
        w = u; fw = fu;
      } else if (fu <= fv || v == x || v == w) {
        v = u; fv = fu;
      }
    }
  }
  return {x, fx, evals};
}

}  // namespace detail

/// One-dimensional minimization of `f` on [lo, hi]. The interior search is
/// Brent's method; both endpoints are also evaluated so that boundary minima
/// are returned exactly.
template <class F>
LineResult line_minimize(F&& f, double lo, double hi, double tol = 1e-8) {
  if (!(tol > 0.0)) throw InputError("line search tolerance must be positive");
  if (!std::isfinite(lo) || !std::isfinite(hi) || !(lo < hi)) {
    throw InputError("line search needs a finite interval lo < hi");
  }
  LineResult best = detail::brent(f, lo, hi, tol / 4.0, 1e-10);
  for (double end : {lo, hi}) {
    const double fe = detail::checked_eval(f, end);
    ++best.evaluations;
    if (fe < best.value) {
      best.x = end;
      best.value = fe;
    }
  }
  return best;
}

namespace detail {

struct DirectionalSearch {
  std::vector<double> point;
  double value;
};

// Minimizes f along p + t * dir within the box. Brackets the minimum by
// golden-ratio expansion starting from 10% of the feasible chord.
template <class F>
DirectionalSearch search_direction(F& f, const BoxDomain& box, const std::vector<double>& p,
                                   double fp, const std::vector<double>& dir, double line_tol) {
  constexpr double kRatio = 1.618033988749895;
  const std::size_t d = p.size();
  double tlo = -std::numeric_limits<double>::infinity();
  double thi = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < d; ++i) {
    if (dir[i] == 0.0) continue;
    double a = (box.lower()[i] - p[i]) / dir[i];
    double b = (box.upper()[i] - p[i]) / dir[i];
    if (a > b) std::swap(a, b);
    tlo = std::max(tlo, a);
    thi = std::min(thi, b);
  }
  if (!std::isfinite(tlo) || !std::isfinite(thi)) return {p, fp};
  tlo = std::min(tlo, 0.0);
  thi = std::max(thi, 0.0);
  const double chord = thi - tlo;
  if (!(chord > 0.0)) return {p, fp};

  auto at = [&](double t) {
    std::vector<double> x(d);
    for (std::size_t i = 0; i < d; ++i) x[i] = p[i] + t * dir[i];
    box.clamp(x);
    return x;
  };
  auto g = [&](double t) { return f(at(t)); };

  const double step = 0.1 * chord;
  double a = 0.0, fa = fp;
  double b = std::min(step, thi), fb = b > 0.0 ? checked_eval(g, b) : fa;
  if (!(fb < fa)) {
    const double back = std::max(-step, tlo);
    if (back < 0.0) {
      const double fback = checked_eval(g, back);
      if (fback < fa) {
        b = back;
        fb = fback;
      }
    }
  }

  double lo, hi;
  if (!(fb < fa)) {
    // Neither probe improved: the minimum is within one step of the origin.
    lo = std::max(-step, tlo);
    hi = std::min(step, thi);
  } else {
    const double sign = b > 0.0 ? 1.0 : -1.0;
    const double limit = sign > 0.0 ? thi : tlo;
    double c = b + kRatio * (b - a);
    c = sign > 0.0 ? std::min(c, limit) : std::max(c, limit);
    double fc = checked_eval(g, c);
    while (fc < fb && c != limit) {
      a = b;
      fa = fb;
      b = c;
      fb = fc;
      c = b + kRatio * (b - a);
      c = sign > 0.0 ? std::min(c, limit) : std::max(c, limit);
      fc = checked_eval(g, c);
    }
    lo = std::min(a, c);
    hi = std::max(a, c);
  }
  if (!(lo < hi)) return {p, fp};
  LineResult r = line_minimize(g, lo, hi, line_tol * chord);
  // Brent's answer is only good to about sqrt(eps) relative to the line
  // minimum value. A parabola through widely spaced points recovers the
  // minimizer of a locally quadratic f far more precisely.
  const double h = 1e-3 * (hi - lo);
  if (r.x - h >= lo && r.x + h <= hi) {
    const double fl = checked_eval(g, r.x - h);
    const double fr = checked_eval(g, r.x + h);
    const double curv = fl - 2.0 * r.value + fr;
    if (curv > 0.0) {
      const double t = r.x + 0.5 * h * (fl - fr) / curv;
      if (std::abs(t - r.x) < h && t != r.x) {
        const double ft = checked_eval(g, t);
        // Values this close to the minimum tie up to rounding; trust the fit.
        if (ft <= r.value + 8.0 * std::numeric_limits<double>::epsilon() * std::abs(r.value)) {
          r.x = t;
          r.value = ft;
        }
      }
    }
  }
  if (r.value < fp) return {at(r.x), r.value};
  return {p, fp};
}

}  // namespace detail

/// Powell's conjugate-direction method restricted to a box.
///
/// Starts from the coordinate axes. After each cycle it searches along the
/// net displacement, then drops the remaining coordinate axis of largest
/// decrease and appends the displacement, so built directions stay
/// conjugate. Resets to the axes every `dimension` cycles. Every evaluated
/// point lies inside `box`.
template <class F>
OptimResult minimize_powell(F&& objective, std::vector<double> start, const BoxDomain& box,
                            const PowellOptions& opts = {}) {
  const std::size_t d = box.dimension();
  if (start.size() != d) throw InputError("start point has wrong dimension");
  if (!box.strictly_contains(start)) throw InputError("start point must lie strictly inside the box");
  if (opts.max_iter <= 0) throw InputError("max_iter must be positive");

  OptimResult result;
  auto f = [&](const std::vector<double>& x) {
    ++result.evaluations;
    const double v = objective(x);
    if (!std::isfinite(v)) {
      std::ostringstream msg;
      msg.precision(17);
      msg << "objective is not finite at (";
      for (std::size_t i = 0; i < x.size(); ++i) msg << (i ? ", " : "") << x[i];
      msg << ")";
      throw NumericalError(msg.str());
    }
    return v;
  };

  auto axes = [d] {
    std::vector<std::vector<double>> dirs(d, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < d; ++i) dirs[i][i] = 1.0;
    return dirs;
  };

  std::vector<double> p = std::move(start);
  double fp = f(p);
  auto dirs = axes();
  // Which entries of `dirs` are still coordinate axes rather than directions
  // built from earlier cycles.
  std::vector<char> is_axis(d, 1);

  for (int iter = 1; iter <= opts.max_iter; ++iter) {
    const std::vector<double> p0 = p;
    const double f0 = fp;
    std::size_t biggest = static_cast<std::size_t>(std::find(is_axis.begin(), is_axis.end(), 1) - is_axis.begin());
    double biggest_drop = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double before = fp;
      auto s = detail::search_direction(f, box, p, fp, dirs[i], opts.line_tol);
      p = std::move(s.point);
      fp = s.value;
      if (is_axis[i] && before - fp > biggest_drop) {
        biggest_drop = before - fp;
        biggest = i;
      }
    }
    result.cycles = static_cast<std::size_t>(iter);
    result.cycle_values.push_back(fp);

    if (f0 - fp < opts.tol * (std::abs(fp) + opts.tol)) {
      result.converged = true;
      break;
    }
    std::vector<double> shift(d);
    double norm = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      shift[i] = p[i] - p0[i];
      norm += shift[i] * shift[i];
    }
    if (norm > 0.0) {
      auto s = detail::search_direction(f, box, p, fp, shift, opts.line_tol);
      p = std::move(s.point);
      fp = s.value;
      result.cycle_values.back() = fp;  // the extra line search belongs to this cycle
    }
    if (iter % static_cast<int>(d) == 0) {
      dirs = axes();
      std::fill(is_axis.begin(), is_axis.end(), 1);
    } else if (norm > 0.0) {
      // Drop the axis of largest decrease. Built directions are kept in order,
      // so on a quadratic they stay mutually conjugate; a reset comes before
      // the axes run out.
      dirs.erase(dirs.begin() + static_cast<std::ptrdiff_t>(biggest));
      is_axis.erase(is_axis.begin() + static_cast<std::ptrdiff_t>(biggest));
      dirs.push_back(std::move(shift));
      is_axis.push_back(0);
    }
  }

  result.x = std::move(p);
  result.value = fp;
  return result;
}

}  // namespace ououreg
