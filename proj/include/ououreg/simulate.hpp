#pragma once

#include <Eigen/Dense>
#include <boost/random/mersenne_twister.hpp>
#include <boost/random/normal_distribution.hpp>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "ououreg/errors.hpp"
#include "ououreg/newick_tree.hpp"
#include "ououreg/ou_kernel.hpp"

namespace ououreg {

using SimEngine = boost::random::mt19937_64;

/// Seed for the noise stream of one (path, node) pair. Streams never depend
/// on the order in which branches or paths are visited.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t path, std::uint64_t node) {
  auto mix = [](std::uint64_t z) {  // splitmix64 finalizer
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  };
  return mix(seed ^ mix(path ^ mix(node + 0x632BE59BD9B4E019ULL)));
}

struct YThetaState {
  double y;
  double theta;
};

/// Euler-Maruyama update of the trait/optimum pair for a fixed step size,
/// with independent noises:
/// theta' = theta - alpha theta dt + sigma_theta sqrt(dt) z_theta,
/// y'     = y - alpha (y - theta) dt + sigma_y sqrt(dt) z_y.
class PairStepper {
 public:
  PairStepper(const OUOUParams& p, double dt)
      : decay_(p.alpha() * dt),
        noise_y_(p.sigma_y() * std::sqrt(dt)),
        noise_theta_(p.sigma_theta() * std::sqrt(dt)) {}

  YThetaState operator()(YThetaState s, double z_theta, double z_y) const {
    return {s.y - decay_ * (s.y - s.theta) + noise_y_ * z_y, s.theta - decay_ * s.theta + noise_theta_ * z_theta};
  }

 private:
  double decay_;
  double noise_y_;
  double noise_theta_;
};

inline YThetaState step_pair(YThetaState s, double dt, const OUOUParams& p, double z_theta, double z_y) {
  if (!(dt > 0.0)) throw InputError("step must be positive");
  return PairStepper(p, dt)(s, z_theta, z_y);
}

struct Estimate {
  double value;
  double se;
};

/// Monte Carlo estimates at a fixed time, each with its standard error.
struct MomentEstimates {
  Estimate mean_theta;
  Estimate second_theta;
  Estimate mean_y;
  Estimate second_y;
  Estimate cross_y_theta;
  Estimate var_theta;
  Estimate cov_y_theta;
  Estimate var_y;
  std::size_t paths;
  std::size_t steps;
};

namespace detail {

inline Estimate mean_estimate(const Eigen::ArrayXd& v) {
  const double n = static_cast<double>(v.size());
  const double m = v.mean();
  const double var = v.size() > 1 ? (v - m).square().sum() / (n - 1.0) : 0.0;
  return {m, std::sqrt(var / n)};
}

// Sample covariance of (a, b) and its delta-method standard error.
inline Estimate cov_estimate(const Eigen::ArrayXd& a, const Eigen::ArrayXd& b) {
  const double n = static_cast<double>(a.size());
  const Eigen::ArrayXd prod = (a - a.mean()) * (b - b.mean());
  const double c = prod.sum() / (n - 1.0);
  const double spread = (prod - prod.mean()).square().sum() / (n - 1.0);
  return {c, std::sqrt(spread / n)};
}

}  // namespace detail

/// Simulates `paths` independent (y, theta) trajectories from the ancestral
/// state (y_a, theta_a) to time t with step close to h.
inline MomentEstimates mc_moments(const OUOUParams& params, double t, std::size_t paths, double h,
                                  std::uint64_t seed) {
  if (!(t > 0.0) || !std::isfinite(t)) throw InputError("simulation time must be positive");
  if (!(h > 0.0)) throw InputError("step must be positive");
  if (paths < 2) throw InputError("need at least two paths for standard errors");
  const auto steps = static_cast<std::size_t>(std::max(1.0, std::round(t / h)));
  const double dt = t / static_cast<double>(steps);

  Eigen::ArrayXd y(static_cast<Eigen::Index>(paths));
  Eigen::ArrayXd theta(static_cast<Eigen::Index>(paths));
  boost::random::normal_distribution<double> normal;
  const PairStepper step(params, dt);
  for (std::size_t k = 0; k < paths; ++k) {
    SimEngine rng(stream_seed(seed, k, 0));
    YThetaState s{params.y_a(), params.theta_a()};
    for (std::size_t i = 0; i < steps; ++i) {
      const double z_theta = normal(rng);
      const double z_y = normal(rng);
      s = step(s, z_theta, z_y);
    }
    y[static_cast<Eigen::Index>(k)] = s.y;
    theta[static_cast<Eigen::Index>(k)] = s.theta;
  }

  MomentEstimates out;
  out.paths = paths;
  out.steps = steps;
  out.mean_theta = detail::mean_estimate(theta);
  out.second_theta = detail::mean_estimate(theta.square());
  out.mean_y = detail::mean_estimate(y);
  out.second_y = detail::mean_estimate(y.square());
  out.cross_y_theta = detail::mean_estimate(y * theta);
  out.var_theta = detail::cov_estimate(theta, theta);
  out.cov_y_theta = detail::cov_estimate(y, theta);
  out.var_y = detail::cov_estimate(y, y);
  return out;
}

// ---------------------------------------------------------------------------
// Simulation along a phylogeny

struct SimConfig {
  OUOUParams params;
  PhyloTree tree;
  /// Integrator step; 0 picks min(positive branch) / 100.
  double step = 0.0;
  std::size_t paths = 1;
  std::uint64_t seed = 0;
  /// Keep every node's (x, y) state, not just the tips.
  bool record_nodes = false;
};

/// Rows are paths; tip columns follow the tree's tip order and node columns
/// the tree's node indices.
struct SimOutput {
  Eigen::MatrixXd tip_x;
  Eigen::MatrixXd tip_y;
  Eigen::MatrixXd node_x;
  Eigen::MatrixXd node_y;
  double step = 0.0;
};

inline double resolve_step(const SimConfig& cfg) {
  const double min_branch = cfg.tree.min_branch_length(true);
  if (!std::isfinite(min_branch)) return cfg.step > 0.0 ? cfg.step : 1.0;  // no positive branches
  const double h = cfg.step > 0.0 ? cfg.step : min_branch / 100.0;
  if (h > min_branch / 10.0 * (1.0 + 1e-12)) {
    throw InputError("step must not exceed a tenth of the shortest branch (" + std::to_string(min_branch / 10.0) +
                     ")");
  }
  return h;
}

/// Integrates (x, y) down every branch; theta = b0 + b1 x is derived from the
/// predictor at each step, x reverts to 0 at rate alpha and y reverts to theta.
/// Children start from a copy of their parent's state and draw from their own
/// noise stream.
inline SimOutput simulate_tree(const SimConfig& cfg) {
  if (cfg.paths < 1) throw InputError("paths must be at least 1");
  if (cfg.step < 0.0 || !std::isfinite(cfg.step)) throw InputError("step must be non-negative");
  const double h = resolve_step(cfg);
  const auto& tree = cfg.tree;
  const auto& nodes = tree.nodes();
  const auto order = tree.preorder();
  const auto& p = cfg.params;
  const double a = p.alpha();
  const auto n_tips = static_cast<Eigen::Index>(tree.tip_count());
  const auto n_nodes = static_cast<Eigen::Index>(nodes.size());
  const auto paths = static_cast<Eigen::Index>(cfg.paths);

  SimOutput out;
  out.step = h;
  out.tip_x.resize(paths, n_tips);
  out.tip_y.resize(paths, n_tips);
  if (cfg.record_nodes) {
    out.node_x.resize(paths, n_nodes);
    out.node_y.resize(paths, n_nodes);
  }

  std::vector<Eigen::Index> tip_column(nodes.size(), -1);
  for (Eigen::Index i = 0; i < n_tips; ++i) tip_column[tree.tip_nodes()[static_cast<std::size_t>(i)]] = i;

  std::vector<double> xs(nodes.size()), ys(nodes.size());
  boost::random::normal_distribution<double> normal;
  for (Eigen::Index k = 0; k < paths; ++k) {
    for (int v : order) {
      double x, y;
      if (v == tree.root()) {
        x = p.x_a();
        y = p.y_a();
      } else {
        x = xs[nodes[v].parent];
        y = ys[nodes[v].parent];
        const double len = nodes[v].length;
        if (len > 0.0) {
          SimEngine rng(stream_seed(cfg.seed, static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(v)));
          const auto steps = static_cast<std::size_t>(std::ceil(len / h - 1e-9));
          const double dt = len / static_cast<double>(steps);
          const double root_dt = std::sqrt(dt);
          for (std::size_t s = 0; s < steps; ++s) {
            const double zx = normal(rng);
            const double zy = normal(rng);
            const double theta = p.b0() + p.b1() * x;
            const double x_next = x - a * x * dt + p.sigma_x() * root_dt * zx;
            y = y - a * (y - theta) * dt + p.sigma_y() * root_dt * zy;
            x = x_next;
          }
        }
      }
      xs[v] = x;
      ys[v] = y;
      if (cfg.record_nodes) {
        out.node_x(k, v) = x;
        out.node_y(k, v) = y;
      }
      if (tip_column[v] >= 0) {
        out.tip_x(k, tip_column[v]) = x;
        out.tip_y(k, tip_column[v]) = y;
      }
    }
  }
  return out;
}

struct CovarianceEstimate {
  Eigen::MatrixXd cov;
  Eigen::MatrixXd se;
};

/// Column covariance of `samples` (rows are draws) with entrywise standard errors.
inline CovarianceEstimate sample_covariance(const Eigen::MatrixXd& samples) {
  const auto m = samples.cols();
  CovarianceEstimate out{Eigen::MatrixXd(m, m), Eigen::MatrixXd(m, m)};
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      const Estimate e = detail::cov_estimate(samples.col(i).array(), samples.col(j).array());
      out.cov(i, j) = out.cov(j, i) = e.value;
      out.se(i, j) = out.se(j, i) = e.se;
    }
  }
  return out;
}

}  // namespace ououreg
