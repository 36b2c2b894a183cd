#pragma once

#include <CLI11.hpp>
#include <boost/random/uniform_real_distribution.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ououreg/estimation.hpp"
#include "ououreg/phylo_cov.hpp"
#include "ououreg/simulate.hpp"

namespace ououreg::cli {

// Stable exit-code contract.
constexpr int kExitOk = 0;
constexpr int kExitInput = 1;
constexpr int kExitNumerical = 2;

/// Closed forms checked by `validate`. Tests swap one out for a wrong formula
/// to make sure the corresponding check fails.
struct ValidateFormulas {
  std::function<Moments(const OUOUParams&, double)> theta = theta_moments;
  std::function<Moments(const OUOUParams&, double)> y = y_moments;
  std::function<double(const OUOUParams&, double)> cross = cross_moment_y_theta;
  std::function<VarCov(const OUOUParams&, double)> var_cov = ououreg::var_cov;
  std::function<Eigen::MatrixXd(const PhyloTree&, const OUOUParams&)> trait_cov =
      [](const PhyloTree& t, const OUOUParams& p) { return ououreg::trait_cov(t, p); };
};

namespace detail {

using Json = nlohmann::ordered_json;

inline std::string num(double v, int digits = 10) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
  return buf;
}

inline std::string fixed(double v, int decimals) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  std::string s = buf;
  if (s.find_first_not_of("-0.") == std::string::npos && s.front() == '-') s.erase(0, 1);  // no "-0.00"
  return s;
}

inline std::string pad(std::string s, std::size_t width) {
  if (s.size() < width) s.append(width - s.size(), ' ');
  return s;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline PhyloTree load_tree(const std::string& path) {
  try {
    return parse_newick(read_file(path));
  } catch (const ParseError& e) {
    throw InputError(path + ": " + e.what());
  }
}

inline TraitTable load_traits(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path + "'");
  try {
    return read_trait_csv(in);
  } catch (const InputError& e) {
    throw InputError(path + ": " + e.what());
  }
}

// Writes to --out, or to the caller's stream when --out is empty or "-".
inline void emit(const std::string& path, const std::string& text, std::ostream& fallback) {
  if (path.empty() || path == "-") {
    fallback << text;
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot write '" + path + "'");
  f << text;
  if (!f) throw InputError("failed writing '" + path + "'");
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) {
    const auto a = cur.find_first_not_of(" \t");
    const auto b = cur.find_last_not_of(" \t\r");
    out.push_back(a == std::string::npos ? "" : cur.substr(a, b - a + 1));
  }
  return out;
}

inline std::optional<ModelHook> hook_by_name(const std::string& name) {
  if (name == "ouou") return ouou_hook();
  if (name == "unscaled") return unscaled_hook();
  if (name == "ouou-nocross") {
    return ModelHook{"ouou-nocross", [](double u) { return slope_factor_p(u); },
                     [](const PhyloTree& t, const OUOUParams& p) {
                       return residual_cov(t, p, CovarianceForm::kWithoutCrossTerm);
                     }};
  }
  return std::nullopt;
}

inline const char* kHookList = "ouou, unscaled, ouou-nocross";

// `key=value` lines; '#' starts a comment. Keys are long flag names without
// the leading dashes. Flags given on the command line win.
inline std::vector<std::string> merge_config(const std::vector<std::string>& args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  auto given = [&](const std::string& key) {
    const std::string flag = "--" + key;
    return std::any_of(args.begin(), args.end(),
                       [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
  };
  std::vector<std::string> merged = args;
  std::istringstream in(read_file(path));
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw InputError(path + ":" + std::to_string(line_no) + ": expected key=value");
    }
    const auto kv = split(line.substr(0, eq) + "\x1f" + line.substr(eq + 1), '\x1f');
    const std::string& key = kv[0];
    const std::string value = kv.size() > 1 ? kv[1] : "";
    if (key.empty() || key == "config") {
      throw InputError(path + ":" + std::to_string(line_no) + ": invalid key");
    }
    if (given(key)) continue;
    if (value == "true") {
      merged.push_back("--" + key);
    } else if (value != "false") {
      merged.push_back("--" + key);
      merged.push_back(value);
    }
  }
  return merged;
}

struct CommonOptions {
  std::string tree;
  std::string traits;
  std::string out;
  std::string format = "text";
  std::uint64_t seed = 1;
  std::string config;
};

inline void add_format(CLI::App* sub, CommonOptions& o) {
  sub->add_option("--format", o.format, "output format")
      ->check(CLI::IsMember({"json", "csv", "text"}))
      ->capture_default_str();
}

inline void add_out(CLI::App* sub, CommonOptions& o) {
  sub->add_option("--out", o.out, "output file path; '-' or omitted writes to stdout");
}

inline void add_config(CLI::App* sub, CommonOptions& o) {
  sub->add_option("--config", o.config, "file of key=value defaults (keys are flag names)");
}

struct ParamFlags {
  double alpha, sigma_y, sigma_x, b0, b1, x_anc;
  std::optional<double> y_anc;

  OUOUParams params() const {
    return OUOUParams::make(alpha, sigma_y, sigma_x, b0, b1, x_anc, y_anc.value_or(b0 + b1 * x_anc));
  }
};

inline void add_params(CLI::App* sub, ParamFlags& p) {
  sub->add_option("--alpha", p.alpha, "rate of adaptation [1/time]")->capture_default_str();
  sub->add_option("--sigma-y", p.sigma_y, "trait diffusion [trait/sqrt(time)]")->capture_default_str();
  sub->add_option("--sigma-x", p.sigma_x, "predictor diffusion [predictor/sqrt(time)]")->capture_default_str();
  sub->add_option("--b0", p.b0, "optimum intercept [trait]")->capture_default_str();
  sub->add_option("--b1", p.b1, "optimum slope [trait/predictor]")->capture_default_str();
  sub->add_option("--x-anc", p.x_anc, "ancestral predictor value [predictor]")->capture_default_str();
  sub->add_option("--y-anc", p.y_anc, "ancestral trait value [trait]; default b0 + b1 * x-anc");
}

struct FitFlags {
  std::optional<double> alpha_max;
  double delta = 1e-5;
  int max_outer = 100;
  double tol = 1e-10;
  int multistart = 1;
  bool normalize = false;
  std::string plot;
};

inline void add_fit_flags(CLI::App* sub, FitFlags& f) {
  sub->add_option("--alpha-max", f.alpha_max, "upper bound of the alpha search [1/time]; default 50 / tree depth");
  sub->add_option("--delta", f.delta, "outer-loop threshold on ||b_new - b_old|| [regression units]")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->add_option("--max-outer", f.max_outer, "maximum outer iterations [count]")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->add_option("--tol", f.tol, "Powell per-cycle relative decrease threshold [dimensionless]")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->add_option("--multistart", f.multistart, "number of fits from random starts; best likelihood kept [count]")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->add_flag("--normalize-depths", f.normalize,
                "stretch terminal branches so every tip sits at the mean depth instead of rejecting "
                "non-ultrametric trees");
}

inline FitConfig fit_config(const FitFlags& f) {
  FitConfig cfg;
  cfg.alpha_max = f.alpha_max;
  cfg.delta = f.delta;
  cfg.max_outer = f.max_outer;
  cfg.powell.tol = f.tol;
  return cfg;
}

inline PhyloTree prepared_tree(const std::string& path, bool normalize) {
  PhyloTree tree = load_tree(path);
  return normalize ? normalize_tip_depths(tree) : tree;
}

// Fits from the default start and from k - 1 random starts drawn inside the
// search box; keeps the highest likelihood.
inline FitReport fit_multistart(const PhyloTree& tree, const TraitTable& traits, FitConfig cfg, const ModelHook& hook,
                         int starts, std::uint64_t seed) {
  FitReport best = fit_ouou(tree, traits, cfg, hook);
  if (starts <= 1) return best;
  const double depth = best.tree_depth;
  const double lo = cfg.alpha_min_factor / depth;
  const double hi = cfg.alpha_max.value_or(50.0 / depth);
  const auto [ymin, ymax] = std::minmax_element(traits.y.begin(), traits.y.end());
  const double s2_hi = *ymax > *ymin ? *ymax - *ymin : 1.0;
  SimEngine rng(stream_seed(seed, 0, 0x5EED));
  boost::random::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int k = 1; k < starts; ++k) {
    const double a = lo * std::pow(hi / lo, unit(rng));
    const double s2 = s2_hi * unit(rng);
    cfg.start = std::array<double, 2>{a, s2};
    try {
      FitReport r = fit_ouou(tree, traits, cfg, hook);
      if (r.log_likelihood > best.log_likelihood || (r.converged && !best.converged)) best = std::move(r);
    } catch (const NumericalError&) {
    }
  }
  return best;
}

struct Line {
  double intercept;
  double slope;
};

inline Line regression_line(const FitReport& r, const ModelHook& hook) {
  const double slope = hook.slope_scale(r.alpha_hat * r.tree_depth) * r.b1;
  return {r.b0 - slope * r.x_mean_hat, slope};
}

inline std::string line_text(const Line& l) {
  return "y = " + fixed(l.intercept, 4) + (l.slope < 0 ? " - " : " + ") + fixed(std::abs(l.slope), 4) + " x";
}

inline Json report_json(const FitReport& r, const ModelHook& hook) {
  const Line l = regression_line(r, hook);
  Json j;
  j["model"] = r.model;
  j["n"] = r.n;
  j["tree_depth"] = r.tree_depth;
  j["b0"] = r.b0;
  j["b1"] = r.b1;
  j["alpha_hat"] = r.alpha_hat;
  j["sigma_y2_hat"] = r.sigma_y2_hat;
  j["sigma_x2_hat"] = r.sigma_x2_hat;
  j["x_mean_hat"] = r.x_mean_hat;
  j["log_likelihood"] = r.log_likelihood;
  j["r_squared"] = r.r_squared;
  j["aicc"] = r.aicc;
  j["iterations"] = r.iterations;
  j["delta_trace"] = r.delta_trace;
  j["converged"] = r.converged;
  j["jitter"] = r.jitter;
  j["line_intercept"] = l.intercept;
  j["line_slope"] = l.slope;
  return j;
}

inline std::string report_csv(const FitReport& r, const ModelHook& hook) {
  const Line l = regression_line(r, hook);
  std::string trace;
  for (std::size_t i = 0; i < r.delta_trace.size(); ++i) trace += (i ? ";" : "") + num(r.delta_trace[i], 17);
  std::ostringstream s;
  s << "model,n,tree_depth,b0,b1,alpha_hat,sigma_y2_hat,sigma_x2_hat,x_mean_hat,log_likelihood,r_squared,aicc,"
       "iterations,delta_trace,converged,jitter,line_intercept,line_slope\n";
  s << r.model << ',' << r.n << ',' << num(r.tree_depth, 17) << ',' << num(r.b0, 17) << ',' << num(r.b1, 17) << ','
    << num(r.alpha_hat, 17) << ',' << num(r.sigma_y2_hat, 17) << ',' << num(r.sigma_x2_hat, 17) << ','
    << num(r.x_mean_hat, 17) << ',' << num(r.log_likelihood, 17) << ',' << num(r.r_squared, 17) << ','
    << num(r.aicc, 17) << ',' << r.iterations << ',' << trace << ',' << (r.converged ? "true" : "false") << ','
    << num(r.jitter, 17) << ',' << num(l.intercept, 17) << ',' << num(l.slope, 17) << '\n';
  return s.str();
}

inline std::string report_text(const FitReport& r, const ModelHook& hook) {
  const Line l = regression_line(r, hook);
  std::ostringstream s;
  auto row = [&](const char* k, const std::string& v) { s << pad(k, 18) << v << '\n'; };
  row("model", r.model);
  row("species", std::to_string(r.n));
  row("tree depth", num(r.tree_depth));
  row("regression line", line_text(l));
  row("b0", num(r.b0));
  row("b1", num(r.b1));
  row("alpha", num(r.alpha_hat) + "  [1/time]");
  row("sigma_y^2", num(r.sigma_y2_hat) + "  [trait^2/time]");
  row("sigma_x^2", num(r.sigma_x2_hat) + "  [predictor^2/time]");
  row("x mean", num(r.x_mean_hat));
  row("log-likelihood", num(r.log_likelihood));
  row("r^2", num(r.r_squared));
  row("AICc", num(r.aicc));
  row("iterations", std::to_string(r.iterations));
  row("final delta", r.delta_trace.empty() ? "n/a" : num(r.delta_trace.back(), 4));
  row("converged", r.converged ? "yes" : "no");
  if (r.jitter > 0.0) row("jitter", num(r.jitter, 4));
  return s.str();
}

inline std::string plot_csv(const FitReport& r, const ModelHook& hook, const PhyloTree& tree, const TraitTable& traits) {
  const auto data = align_traits(tree, traits);
  const double lo = data.x.minCoeff(), hi = data.x.maxCoeff();
  std::string s = "series,species,x,y\n";
  for (int i = 0; i < 200; ++i) {
    const double x = lo + (hi - lo) * i / 199.0;
    s += "curve,," + num(x, 17) + "," + num(fitted_curve(r, hook, x), 17) + "\n";
  }
  for (std::size_t i = 0; i < tree.tip_count(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    s += "data," + tree.tip_label(i) + "," + num(data.x[k], 17) + "," + num(data.y[k], 17) + "\n";
  }
  return s;
}

inline std::string default_plot_path(const std::string& out) {
  return out.empty() || out == "-" ? "" : out + ".plot.csv";
}

}  // namespace detail

/// Runs one command line (without the program name). Never throws; returns
/// the process exit code.
inline int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err,
               const ValidateFormulas& formulas = {}) {
  using namespace detail;
  CLI::App app{"Trait regression on an adaptive optimum along a phylogeny (OU trait tracking an OU optimum)",
               "ououreg"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  CommonOptions common;
  FitFlags fit_flags;
  std::string model = "ouou";
  std::string hooks = "ouou,unscaled";
  ParamFlags sim_params{1.0, 0.3, 1.0, 1.0, 0.5, 0.0, std::nullopt};
  ParamFlags val_params{1.0, 1.0, 1.0, 0.0, 1.0, 1.0, std::nullopt};
  std::size_t paths = 1;
  std::size_t val_paths = 20000;
  double step = 0.0;
  std::string times = "0.1,0.5,1,2,5";
  double sigma_level = 3.0;

  auto* fit = app.add_subcommand("fit", "fit the regression by iterative GLS / maximum likelihood");
  fit->add_option("--tree", common.tree, "Newick tree file [branch lengths in time]")->required();
  fit->add_option("--traits", common.traits, "CSV with header species,x,y [predictor, trait units]")->required();
  add_out(fit, common);
  add_format(fit, common);
  fit->add_option("--model", model, std::string("slope model: ") + kHookList)->capture_default_str();
  add_fit_flags(fit, fit_flags);
  fit->add_option("--plot", fit_flags.plot,
                  "plot-data CSV (200 curve points over [min x, max x] plus the data); default <out>.plot.csv");
  fit->add_option("--seed", common.seed, "seed for --multistart starts [integer]")->capture_default_str();
  add_config(fit, common);

  auto* simulate = app.add_subcommand("simulate", "simulate predictor and trait values at the tips");
  simulate->add_option("--tree", common.tree, "Newick tree file [branch lengths in time]")->required();
  add_out(simulate, common);
  simulate->add_option("--format", common.format,
                       "csv/text: species,x,y of the first path; json: per-tip moment summary over all paths")
      ->check(CLI::IsMember({"json", "csv", "text"}))
      ->capture_default_str();
  add_params(simulate, sim_params);
  simulate->add_option("--paths", paths, "independent replicate paths [count]")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  simulate->add_option("--step", step, "integrator step [time]; 0 = shortest positive branch / 100")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  simulate->add_option("--seed", common.seed, "random seed [integer]")->capture_default_str();
  add_config(simulate, common);

  auto* compare = app.add_subcommand("compare", "fit several slope models and rank them by AICc");
  compare->add_option("--tree", common.tree, "Newick tree file [branch lengths in time]")->required();
  compare->add_option("--traits", common.traits, "CSV with header species,x,y [predictor, trait units]")->required();
  add_out(compare, common);
  add_format(compare, common);
  compare->add_option("--hooks", hooks, std::string("comma-separated models: ") + kHookList)->capture_default_str();
  add_fit_flags(compare, fit_flags);
  compare->add_option("--seed", common.seed, "seed for --multistart starts [integer]")->capture_default_str();
  add_config(compare, common);

  auto* validate = app.add_subcommand("validate", "Monte Carlo check of the closed-form moments and covariances");
  validate->add_option("--tree", common.tree,
                       "Newick tree for the covariance check [time]; default a fixed 5-tip tree");
  add_out(validate, common);
  add_format(validate, common);
  add_params(validate, val_params);
  validate->add_option("--times", times, "comma-separated check times [multiples of 1/alpha]")->capture_default_str();
  validate->add_option("--paths", val_paths, "Monte Carlo paths per check [count]")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  validate->add_option("--step", step, "tree integrator step [time]; 0 = shortest positive branch / 100")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  validate->add_option("--sigmas", sigma_level, "pass band in standard errors [count]")->capture_default_str();
  validate->add_option("--seed", common.seed, "random seed [integer]")->capture_default_str();
  add_config(validate, common);

  try {
    std::vector<std::string> args = merge_config(raw_args);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    // Help requested on a subcommand surfaces here too.
    if (e.get_exit_code() == 0) {
      for (auto* sub : {fit, simulate, compare, validate}) {
        if (sub->parsed()) {
          out << sub->help();
          return kExitOk;
        }
      }
      out << app.help();
      return kExitOk;
    }
    err << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  }

  try {
    if (fit->parsed()) {
      const auto hook = hook_by_name(model);
      if (!hook) throw InputError("unknown model '" + model + "' (known: " + kHookList + ")");
      const PhyloTree tree = prepared_tree(common.tree, fit_flags.normalize);
      const TraitTable traits = load_traits(common.traits);
      const FitReport r = fit_multistart(tree, traits, fit_config(fit_flags), *hook, fit_flags.multistart, common.seed);
      std::string text;
      if (common.format == "json") text = report_json(r, *hook).dump(2) + "\n";
      else if (common.format == "csv") text = report_csv(r, *hook);
      else text = report_text(r, *hook);
      emit(common.out, text, out);
      const std::string plot = fit_flags.plot.empty() ? default_plot_path(common.out) : fit_flags.plot;
      if (!plot.empty()) emit(plot, plot_csv(r, *hook, tree, traits), out);
      if (!r.converged) {
        err << "warning: outer loop did not reach delta < " << num(fit_flags.delta) << " in " << r.iterations
            << " iterations\n";
        return kExitNumerical;
      }
      return kExitOk;
    }

    if (simulate->parsed()) {
      const OUOUParams p = sim_params.params();
      const PhyloTree tree = load_tree(common.tree);
      const SimOutput sim = simulate_tree(SimConfig{p, tree, step, paths, common.seed, false});
      if (common.format == "json") {
        Json j;
        j["paths"] = paths;
        j["seed"] = common.seed;
        j["step"] = sim.step;
        Json tips = Json::array();
        for (std::size_t i = 0; i < tree.tip_count(); ++i) {
          const auto k = static_cast<Eigen::Index>(i);
          const Eigen::ArrayXd x = sim.tip_x.col(k).array(), y = sim.tip_y.col(k).array();
          Json t;
          t["species"] = tree.tip_label(i);
          t["mean_x"] = x.mean();
          t["mean_y"] = y.mean();
          t["var_x"] = paths > 1 ? (x - x.mean()).square().sum() / static_cast<double>(paths - 1) : 0.0;
          t["var_y"] = paths > 1 ? (y - y.mean()).square().sum() / static_cast<double>(paths - 1) : 0.0;
          tips.push_back(std::move(t));
        }
        j["tips"] = std::move(tips);
        emit(common.out, j.dump(2) + "\n", out);
      } else {
        TraitTable table;
        for (std::size_t i = 0; i < tree.tip_count(); ++i) {
          table.species.push_back(tree.tip_label(i));
          table.x.push_back(sim.tip_x(0, static_cast<Eigen::Index>(i)));
          table.y.push_back(sim.tip_y(0, static_cast<Eigen::Index>(i)));
        }
        std::ostringstream s;
        write_trait_csv(s, table);
        emit(common.out, s.str(), out);
      }
      return kExitOk;
    }

    if (compare->parsed()) {
      std::vector<ModelHook> chosen;
      for (const auto& name : split(hooks, ',')) {
        const auto hook = hook_by_name(name);
        if (!hook) throw InputError("unknown model '" + name + "' (known: " + kHookList + ")");
        for (const auto& c : chosen) {
          if (c.name == name) throw InputError("model '" + name + "' listed twice");
        }
        chosen.push_back(*hook);
      }
      if (chosen.empty()) throw InputError("no models given");
      const PhyloTree tree = prepared_tree(common.tree, fit_flags.normalize);
      const TraitTable traits = load_traits(common.traits);
      // Input problems are reported once, before any model runs.
      validate_ultrametric(tree);
      align_traits(tree, traits);

      std::vector<ComparisonRow> rows;
      if (fit_flags.multistart <= 1) {
        rows = compare_models(tree, traits, chosen, fit_config(fit_flags));
      } else {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& h : chosen) {
          ComparisonRow row;
          row.model = h.name;
          try {
            row.fit = fit_multistart(tree, traits, fit_config(fit_flags), h, fit_flags.multistart, common.seed);
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
      }

      bool all_ok = true;
      std::string text;
      if (common.format == "json") {
        Json arr = Json::array();
        for (std::size_t i = 0; i < rows.size(); ++i) {
          const auto& row = rows[i];
          Json j;
          j["model"] = row.model;
          if (row.fit) {
            const Line l = regression_line(*row.fit, chosen[i]);
            j["line_intercept"] = l.intercept;
            j["line_slope"] = l.slope;
            j["r_squared"] = row.fit->r_squared;
            j["aicc"] = row.fit->aicc;
            j["delta_aicc"] = row.delta_aicc;
            j["co_supported"] = row.co_supported;
            j["converged"] = row.fit->converged;
            j["fit"] = report_json(*row.fit, chosen[i]);
          } else {
            j["error"] = row.error;
          }
          all_ok = all_ok && row.fit && row.fit->converged;
          arr.push_back(std::move(j));
        }
        text = arr.dump(2) + "\n";
      } else if (common.format == "csv") {
        text = "model,line_intercept,line_slope,r_squared,aicc,delta_aicc,co_supported,converged,error\n";
        for (std::size_t i = 0; i < rows.size(); ++i) {
          const auto& row = rows[i];
          text += row.model + ",";
          if (row.fit) {
            const Line l = regression_line(*row.fit, chosen[i]);
            text += num(l.intercept, 17) + "," + num(l.slope, 17) + "," + num(row.fit->r_squared, 17) + "," +
                    num(row.fit->aicc, 17) + "," + num(row.delta_aicc, 17) + "," +
                    (row.co_supported ? "true" : "false") + "," + (row.fit->converged ? "true" : "false") + ",\n";
          } else {
            std::string msg = row.error;
            std::replace(msg.begin(), msg.end(), ',', ';');
            text += ",,,,,false,false," + msg + "\n";
          }
          all_ok = all_ok && row.fit && row.fit->converged;
        }
      } else {
        std::ostringstream s;
        s << pad("Model", 14) << pad("Regression Line", 28) << pad("r^2", 9) << pad("AICc", 11)
          << pad("dAICc", 9) << "co-supported\n";
        for (std::size_t i = 0; i < rows.size(); ++i) {
          const auto& row = rows[i];
          s << pad(row.model, 14);
          if (row.fit) {
            s << pad(line_text(regression_line(*row.fit, chosen[i])), 28)
              << pad(std::isnan(row.fit->r_squared) ? "n/a" : fixed(100.0 * row.fit->r_squared, 1) + "%", 9)
              << pad(fixed(row.fit->aicc, 2), 11) << pad(fixed(row.delta_aicc, 2), 9)
              << (row.co_supported ? "yes" : "no") << (row.fit->converged ? "" : "  (not converged)") << '\n';
          } else {
            s << "failed: " << row.error << '\n';
          }
          all_ok = all_ok && row.fit && row.fit->converged;
        }
        s << "Models within 2 AICc units of the best are co-supported.\n";
        text = s.str();
      }
      emit(common.out, text, out);
      return all_ok ? kExitOk : kExitNumerical;
    }

    if (validate->parsed()) {
      const OUOUParams p = val_params.params();
      if (val_paths < 2) throw InputError("validate needs at least 2 paths");
      if (val_paths < 1000) {
        err << "warning: " << val_paths << " paths give low power; standard errors are large\n";
      }
      struct Check {
        std::string name;
        double t;
        double observed, expected, se;
        bool pass;
      };
      std::vector<Check> checks;
      auto add = [&](const std::string& name, double t, const Estimate& e, double expected) {
        const bool pass = std::abs(e.value - expected) <= sigma_level * e.se + 1e-12 * std::abs(expected);
        checks.push_back({name, t, e.value, expected, e.se, pass});
      };
      std::uint64_t run_index = 0;
      for (const auto& token : split(times, ',')) {
        double mult = 0.0;
        try {
          std::size_t used = 0;
          mult = std::stod(token, &used);
          if (used != token.size()) throw std::invalid_argument(token);
        } catch (const std::exception&) {
          throw InputError("--times: '" + token + "' is not a number");
        }
        if (!(mult > 0.0)) throw InputError("--times entries must be positive");
        const double t = mult / p.alpha();
        const auto m = mc_moments(p, t, val_paths, t / 1000.0, stream_seed(common.seed, run_index++, 0x7));
        const auto th = formulas.theta(p, t);
        const auto ym = formulas.y(p, t);
        const auto vc = formulas.var_cov(p, t);
        add("E[theta]", t, m.mean_theta, th.mean);
        add("E[theta^2]", t, m.second_theta, th.second);
        add("E[y theta]", t, m.cross_y_theta, formulas.cross(p, t));
        add("E[y]", t, m.mean_y, ym.mean);
        add("E[y^2]", t, m.second_y, ym.second);
        add("Var[theta]", t, m.var_theta, vc.var_theta);
        add("Cov[y,theta]", t, m.cov_y_theta, vc.cov_y_theta);
        add("Var[y]", t, m.var_y, vc.var_y);
      }
      const PhyloTree tree = common.tree.empty() ? parse_newick("(((A:1,B:1):1,C:2):1,(D:2.5,E:2.5):0.5);")
                                                 : load_tree(common.tree);
      const double depth = validate_ultrametric(tree);
      const auto sim = simulate_tree(SimConfig{p, tree, step, val_paths, stream_seed(common.seed, run_index, 0x7), false});
      const auto cov = sample_covariance(sim.tip_y);
      const Eigen::MatrixXd expected = formulas.trait_cov(tree, p);
      for (Eigen::Index i = 0; i < cov.cov.rows(); ++i) {
        for (Eigen::Index j = 0; j <= i; ++j) {
          add("Cov[y_" + tree.tip_label(static_cast<std::size_t>(i)) + ",y_" +
                  tree.tip_label(static_cast<std::size_t>(j)) + "]",
              depth, {cov.cov(i, j), cov.se(i, j)}, expected(i, j));
        }
      }

      const bool all_pass = std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
      std::string text;
      if (common.format == "json") {
        Json j;
        j["paths"] = val_paths;
        j["seed"] = common.seed;
        j["sigmas"] = sigma_level;
        j["all_pass"] = all_pass;
        Json arr = Json::array();
        for (const auto& c : checks) {
          Json e;
          e["check"] = c.name;
          e["t"] = c.t;
          e["observed"] = c.observed;
          e["expected"] = c.expected;
          e["se"] = c.se;
          e["pass"] = c.pass;
          arr.push_back(std::move(e));
        }
        j["checks"] = std::move(arr);
        text = j.dump(2) + "\n";
      } else if (common.format == "csv") {
        text = "check,t,observed,expected,se,z,pass\n";
        for (const auto& c : checks) {
          const double z = c.se > 0.0 ? (c.observed - c.expected) / c.se : 0.0;
          text += c.name + "," + num(c.t, 17) + "," + num(c.observed, 17) + "," + num(c.expected, 17) + "," +
                  num(c.se, 17) + "," + num(z, 6) + "," + (c.pass ? "true" : "false") + "\n";
        }
      } else {
        std::ostringstream s;
        s << pad("check", 16) << pad("t", 8) << pad("observed", 13) << pad("expected", 13) << pad("se", 11)
          << pad("z", 8) << "result\n";
        for (const auto& c : checks) {
          const double z = c.se > 0.0 ? (c.observed - c.expected) / c.se : 0.0;
          s << pad(c.name, 16) << pad(num(c.t, 4), 8) << pad(fixed(c.observed, 6), 13)
            << pad(fixed(c.expected, 6), 13) << pad(num(c.se, 3), 11) << pad(fixed(z, 2), 8)
            << (c.pass ? "pass" : "FAIL") << '\n';
        }
        const auto failed = std::count_if(checks.begin(), checks.end(), [](const Check& c) { return !c.pass; });
        s << checks.size() - static_cast<std::size_t>(failed) << "/" << checks.size() << " checks within "
          << num(sigma_level, 3) << " standard errors (" << val_paths << " paths, seed " << common.seed << ")\n";
        text = s.str();
      }
      emit(common.out, text, out);
      return all_pass ? kExitOk : kExitNumerical;
    }
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  }
  return kExitInput;
}

}  // namespace ououreg::cli
