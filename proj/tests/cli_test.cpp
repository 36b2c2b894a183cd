#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "ououreg_commands.hpp"
#include "test_trees.hpp"

namespace {

namespace fs = std::filesystem;
using ououreg::cli::run;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run_in_process(const std::vector<std::string>& args, const ououreg::cli::ValidateFormulas& f = {}) {
  std::ostringstream out, err;
  const int code = run(args, out, err, f);
  return {code, out.str(), err.str()};
}

// Runs the built binary; stdout captured, stderr discarded.
Result run_binary(const std::string& args) {
  const std::string cmd = std::string(OUOUREG_CLI_PATH) + " " + args + " 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  std::string out;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof(buf), pipe)) > 0) out.append(buf, n);
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out, ""};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("ououreg_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::create_directories(dir_);
    tree_ = path("tree.nwk");
    write(tree_, ououreg::testing::balanced_newick(5, 1.0));
    traits_ = path("traits.csv");
    ASSERT_EQ(run_in_process({"simulate", "--tree", tree_, "--seed", "7", "--out", traits_}).code, 0);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
  std::string tree_, traits_;
};

TEST_F(CliTest, HelpListsUnitsAndExitsZero) {
  const auto top = run_in_process({"--help"});
  EXPECT_EQ(top.code, 0);
  for (const char* sub : {"fit", "simulate", "compare", "validate"}) {
    EXPECT_NE(top.out.find(sub), std::string::npos) << sub;
  }
  const auto fit = run_in_process({"fit", "--help"});
  EXPECT_EQ(fit.code, 0);
  EXPECT_NE(fit.out.find("--alpha-max"), std::string::npos);
  EXPECT_NE(fit.out.find("[1/time]"), std::string::npos);
  const auto sim = run_in_process({"simulate", "--help"});
  for (const char* unit : {"[1/time]", "[trait/sqrt(time)]", "[predictor/sqrt(time)]", "[time]", "[count]"}) {
    EXPECT_NE(sim.out.find(unit), std::string::npos) << unit;
  }
}

TEST_F(CliTest, UsageErrorsExitOne) {
  EXPECT_EQ(run_in_process({}).code, 1);
  EXPECT_EQ(run_in_process({"bogus"}).code, 1);
  EXPECT_EQ(run_in_process({"fit", "--tree", tree_}).code, 1);
  EXPECT_EQ(run_in_process({"fit", "--tree", tree_, "--traits", traits_, "--format", "xml"}).code, 1);
  EXPECT_EQ(run_in_process({"fit", "--tree", path("missing.nwk"), "--traits", traits_}).code, 1);
  write(path("bad.nwk"), "((A:1,B:1);");
  EXPECT_EQ(run_in_process({"fit", "--tree", path("bad.nwk"), "--traits", traits_}).code, 1);
}

TEST_F(CliTest, OrphanSpeciesExitsOneAndNamesIt) {
  std::string csv = slurp(traits_);
  csv += "stray,0.1,0.2\n";
  write(path("orphan.csv"), csv);
  const auto r = run_in_process({"fit", "--tree", tree_, "--traits", path("orphan.csv")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("stray"), std::string::npos) << r.err;
}

TEST_F(CliTest, NonUltrametricRejectedUnlessNormalized) {
  write(path("ragged.nwk"), "(((t0:1,t1:1.5):1,(t2:1,t3:1):1):1,((t4:1,t5:1):1,(t6:1,t7:1):1):1);");
  write(path("ragged.csv"),
        "species,x,y\nt0,0.1,1.0\nt1,-0.3,0.8\nt2,0.5,1.3\nt3,0.2,0.9\n"
        "t4,-0.4,0.7\nt5,0.0,1.1\nt6,0.3,1.2\nt7,-0.1,0.95\n");
  const auto rejected = run_in_process({"fit", "--tree", path("ragged.nwk"), "--traits", path("ragged.csv")});
  EXPECT_EQ(rejected.code, 1);
  const auto normalized = run_in_process(
      {"fit", "--tree", path("ragged.nwk"), "--traits", path("ragged.csv"), "--normalize-depths"});
  EXPECT_NE(normalized.code, 1) << normalized.err;
}

TEST_F(CliTest, FitJsonCarriesEveryReportField) {
  const auto r = run_in_process({"fit", "--tree", tree_, "--traits", traits_, "--format", "json"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  for (const char* key : {"model", "n", "tree_depth", "b0", "b1", "alpha_hat", "sigma_y2_hat", "sigma_x2_hat",
                          "x_mean_hat", "log_likelihood", "r_squared", "aicc", "iterations", "delta_trace",
                          "converged", "jitter"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  EXPECT_EQ(j["model"], "ouou");
  EXPECT_EQ(j["n"], 32);
  EXPECT_TRUE(j["converged"].get<bool>());
  EXPECT_EQ(j["delta_trace"].size(), j["iterations"].get<std::size_t>());
  EXPECT_LT(j["delta_trace"].back().get<double>(), 1e-5);
}

TEST_F(CliTest, ConstantTraitGivesNullRSquared) {
  std::string csv = "species,x,y\n";
  for (int i = 0; i < 32; ++i) csv += "t" + std::to_string(i) + "," + std::to_string(0.1 * i) + ",2.5\n";
  write(path("flat.csv"), csv);
  const auto r = run_in_process({"fit", "--tree", tree_, "--traits", path("flat.csv"), "--format", "json"});
  ASSERT_NE(r.code, 1) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_TRUE(j["r_squared"].is_null());
  EXPECT_NEAR(j["b1"].get<double>(), 0.0, 1e-8);
}

TEST_F(CliTest, FitCsvAndTextFormats) {
  const auto csv = run_in_process({"fit", "--tree", tree_, "--traits", traits_, "--format", "csv"});
  ASSERT_EQ(csv.code, 0);
  std::istringstream lines(csv.out);
  std::string header, row, extra;
  std::getline(lines, header);
  std::getline(lines, row);
  EXPECT_FALSE(std::getline(lines, extra));
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), std::count(row.begin(), row.end(), ','));
  const auto text = run_in_process({"fit", "--tree", tree_, "--traits", traits_});
  EXPECT_NE(text.out.find("regression line"), std::string::npos);
  EXPECT_NE(text.out.find("converged         yes"), std::string::npos);
}

TEST_F(CliTest, PlotFileHasCurveAndScatter) {
  const auto r = run_in_process({"fit", "--tree", tree_, "--traits", traits_, "--out", path("fit.json"),
                                 "--format", "json"});
  ASSERT_EQ(r.code, 0);
  EXPECT_TRUE(r.out.empty());
  std::istringstream plot(slurp(path("fit.json.plot.csv")));
  std::string line;
  std::getline(plot, line);
  EXPECT_EQ(line, "series,species,x,y");
  int curve = 0, data = 0;
  double first = 0.0, last = 0.0;
  while (std::getline(plot, line)) {
    if (line.rfind("curve,,", 0) == 0) {
      const double x = std::stod(line.substr(7, line.find(',', 7) - 7));
      if (curve == 0) first = x;
      last = x;
      ++curve;
    } else if (line.rfind("data,", 0) == 0) {
      ++data;
    }
  }
  EXPECT_EQ(curve, 200);
  EXPECT_EQ(data, 32);
  const auto table = [&] {
    std::ifstream in(traits_);
    return ououreg::read_trait_csv(in);
  }();
  EXPECT_DOUBLE_EQ(first, *std::min_element(table.x.begin(), table.x.end()));
  EXPECT_DOUBLE_EQ(last, *std::max_element(table.x.begin(), table.x.end()));
}

TEST_F(CliTest, NonConvergenceExitsTwoButStillReports) {
  const auto r = run_in_process({"fit", "--tree", tree_, "--traits", traits_, "--max-outer", "1", "--format", "json"});
  EXPECT_EQ(r.code, 2);
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_FALSE(j["converged"].get<bool>());
  EXPECT_EQ(j["iterations"], 1);
}

TEST_F(CliTest, MultistartNeverWorsensLikelihood) {
  const auto one = nlohmann::json::parse(
      run_in_process({"fit", "--tree", tree_, "--traits", traits_, "--format", "json"}).out);
  const auto many = nlohmann::json::parse(
      run_in_process({"fit", "--tree", tree_, "--traits", traits_, "--format", "json", "--multistart", "4"}).out);
  EXPECT_GE(many["log_likelihood"].get<double>(), one["log_likelihood"].get<double>() - 1e-9);
}

TEST_F(CliTest, ConfigFileSitsBetweenFlagsAndDefaults) {
  write(path("cfg.txt"), "# fit settings\nformat = json\nmax-outer=1\n\n");
  const auto from_config = run_in_process({"fit", "--tree", tree_, "--traits", traits_, "--config", path("cfg.txt")});
  EXPECT_EQ(from_config.code, 2);
  EXPECT_EQ(nlohmann::json::parse(from_config.out)["iterations"], 1);

  const auto flag_wins = run_in_process(
      {"fit", "--tree", tree_, "--traits", traits_, "--config", path("cfg.txt"), "--max-outer", "100"});
  EXPECT_EQ(flag_wins.code, 0);
  EXPECT_TRUE(nlohmann::json::parse(flag_wins.out)["converged"].get<bool>());

  write(path("broken.txt"), "max-outer\n");
  EXPECT_EQ(run_in_process({"fit", "--tree", tree_, "--traits", traits_, "--config", path("broken.txt")}).code, 1);
  write(path("unknown.txt"), "no-such-flag=3\n");
  EXPECT_EQ(run_in_process({"fit", "--tree", tree_, "--traits", traits_, "--config", path("unknown.txt")}).code, 1);
}

TEST_F(CliTest, SimulateIsDeterministicPerSeed) {
  write(path("t128.nwk"), ououreg::testing::balanced_newick(7, 1.0));
  const auto a = run_binary("simulate --tree " + path("t128.nwk") + " --seed 42");
  const auto b = run_binary("simulate --tree " + path("t128.nwk") + " --seed 42");
  const auto c = run_binary("simulate --tree " + path("t128.nwk") + " --seed 43");
  ASSERT_EQ(a.code, 0);
  EXPECT_EQ(a.out, b.out);
  EXPECT_NE(a.out, c.out);
  EXPECT_EQ(std::count(a.out.begin(), a.out.end(), '\n'), 129);
  EXPECT_EQ(a.out.rfind("species,x,y\n", 0), 0u);
}

TEST_F(CliTest, SimulateZeroNoiseFollowsDeterministicRelaxation) {
  const auto at_rest = run_in_process({"simulate", "--tree", tree_, "--sigma-x", "0", "--sigma-y", "0"});
  ASSERT_EQ(at_rest.code, 0);
  std::istringstream rest_in(at_rest.out);
  const auto rest = ououreg::read_trait_csv(rest_in);
  ASSERT_EQ(rest.x.size(), 32u);
  for (std::size_t i = 0; i < rest.x.size(); ++i) {
    EXPECT_EQ(rest.x[i], 0.0);
    EXPECT_EQ(rest.y[i], 1.0);
  }

  // x relaxes towards 0 at rate alpha; every tip of the balanced tree sits at depth 5.
  const auto moving = run_in_process({"simulate", "--tree", tree_, "--sigma-x", "0", "--sigma-y", "0", "--x-anc",
                                      "2", "--step", "0.001"});
  std::istringstream moving_in(moving.out);
  const auto m = ououreg::read_trait_csv(moving_in);
  for (std::size_t i = 0; i < m.x.size(); ++i) {
    EXPECT_EQ(m.x[i], m.x[0]);
    EXPECT_EQ(m.y[i], m.y[0]);
  }
  EXPECT_NEAR(m.x[0], 2.0 * std::exp(-5.0), 1e-4);
}

TEST_F(CliTest, SimulateRejectsBadParameters) {
  EXPECT_EQ(run_in_process({"simulate", "--tree", tree_, "--alpha", "0"}).code, 1);
  EXPECT_EQ(run_in_process({"simulate", "--tree", tree_, "--sigma-y", "-1"}).code, 1);
  EXPECT_EQ(run_in_process({"simulate", "--tree", tree_, "--paths", "0"}).code, 1);
}

TEST_F(CliTest, SimulateJsonSummarizesPaths) {
  const auto r = run_in_process({"simulate", "--tree", tree_, "--paths", "50", "--format", "json"});
  ASSERT_EQ(r.code, 0);
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["paths"], 50);
  ASSERT_EQ(j["tips"].size(), 32u);
  EXPECT_GT(j["tips"][0]["var_y"].get<double>(), 0.0);
}

TEST_F(CliTest, CompareRanksModels) {
  const auto r = run_in_process({"compare", "--tree", tree_, "--traits", traits_, "--format", "json"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  ASSERT_EQ(j.size(), 2u);
  double best = 1e300;
  for (const auto& row : j) best = std::min(best, row["aicc"].get<double>());
  for (const auto& row : j) {
    EXPECT_NEAR(row["delta_aicc"].get<double>(), row["aicc"].get<double>() - best, 1e-12);
    EXPECT_EQ(row["co_supported"].get<bool>(), row["delta_aicc"].get<double>() <= 2.0);
  }
  const auto text = run_in_process({"compare", "--tree", tree_, "--traits", traits_});
  for (const char* col : {"Model", "Regression Line", "r^2", "AICc", "dAICc", "co-supported"}) {
    EXPECT_NE(text.out.find(col), std::string::npos) << col;
  }
}

TEST_F(CliTest, CompareSingleModelAndDuplicates) {
  const auto single =
      run_in_process({"compare", "--tree", tree_, "--traits", traits_, "--hooks", "ouou", "--format", "json"});
  ASSERT_EQ(single.code, 0);
  const auto j = nlohmann::json::parse(single.out);
  ASSERT_EQ(j.size(), 1u);
  EXPECT_EQ(j[0]["delta_aicc"].get<double>(), 0.0);
  EXPECT_TRUE(j[0]["co_supported"].get<bool>());

  const auto dup = run_in_process({"compare", "--tree", tree_, "--traits", traits_, "--hooks", "ouou,unscaled,ouou"});
  EXPECT_EQ(dup.code, 1);
  EXPECT_NE(dup.err.find("twice"), std::string::npos);
  EXPECT_EQ(run_in_process({"compare", "--tree", tree_, "--traits", traits_, "--hooks", "ouou,mystery"}).code, 1);
}

TEST_F(CliTest, ValidatePassesWithCorrectFormulas) {
  const auto r = run_in_process({"validate", "--paths", "4000", "--times", "0.5,2", "--format", "json"});
  ASSERT_EQ(r.code, 0) << r.out;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_TRUE(j["all_pass"].get<bool>());
  EXPECT_EQ(j["checks"].size(), 2u * 8u + 15u);
}

TEST_F(CliTest, ValidateCatchesInjectedWrongFormula) {
  ououreg::cli::ValidateFormulas wrong;
  wrong.var_cov = [](const ououreg::OUOUParams& p, double t) {
    auto v = ououreg::var_cov(p, t);
    v.var_y *= 1.5;
    return v;
  };
  const auto r = run_in_process({"validate", "--paths", "4000", "--times", "1", "--format", "json"}, wrong);
  EXPECT_EQ(r.code, 2);
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_FALSE(j["all_pass"].get<bool>());
  for (const auto& c : j["checks"]) {
    EXPECT_EQ(c["pass"].get<bool>(), c["check"] != "Var[y]") << c["check"];
  }

  ououreg::cli::ValidateFormulas no_cross;
  no_cross.trait_cov = [](const ououreg::PhyloTree& t, const ououreg::OUOUParams& p) {
    return ououreg::trait_cov(t, p, ououreg::CovarianceForm::kWithoutCrossTerm);
  };
  EXPECT_EQ(run_in_process({"validate", "--paths", "20000", "--times", "1"}, no_cross).code, 2);
}

TEST_F(CliTest, ValidateWarnsOnLowPathCount) {
  const auto r = run_in_process({"validate", "--paths", "200", "--times", "1"});
  EXPECT_NE(r.err.find("warning"), std::string::npos);
  EXPECT_NE(r.code, 1);
  const auto quiet = run_in_process({"validate", "--paths", "1000", "--times", "1"});
  EXPECT_EQ(quiet.err.find("warning"), std::string::npos);
}

TEST_F(CliTest, OutputIsByteDeterministic) {
  for (const std::string& cmd : {"fit --format json", "fit --format csv", "compare --format text"}) {
    const std::string args = cmd + " --tree " + tree_ + " --traits " + traits_;
    const auto a = run_binary(args);
    const auto b = run_binary(args);
    EXPECT_EQ(a.code, 0) << cmd;
    EXPECT_EQ(a.out, b.out) << cmd;
  }
  EXPECT_EQ(run_binary("validate --paths 2000 --times 1").out, run_binary("validate --paths 2000 --times 1").out);
}

TEST_F(CliTest, BinaryExitCodes) {
  EXPECT_EQ(run_binary("--help").code, 0);
  EXPECT_EQ(run_binary("fit --tree " + tree_).code, 1);
  EXPECT_EQ(run_binary("fit --tree " + tree_ + " --traits " + traits_ + " --max-outer 1").code, 2);
  EXPECT_EQ(run_binary("fit --tree " + tree_ + " --traits " + traits_).code, 0);
}

}  // namespace
