#include <gtest/gtest.h>

#include <random>
#include <string>

#include "ououreg/newick_tree.hpp"
#include "test_trees.hpp"

namespace ououreg {
namespace {

TEST(ParseNewick, TwoTipTree) {
  const auto tree = parse_newick("(A:1,B:1);");
  ASSERT_EQ(tree.tip_count(), 2u);
  EXPECT_EQ(tree.tip_label(0), "A");
  EXPECT_EQ(tree.tip_label(1), "B");
  EXPECT_DOUBLE_EQ(tree.tip_depths()[0], 1.0);
  EXPECT_DOUBLE_EQ(tree.tip_depths()[1], 1.0);
  EXPECT_DOUBLE_EQ(tree.pair_times("A", "B").shared_time, 0.0);
}

TEST(ParseNewick, ThreeTipTree) {
  const auto tree = parse_newick("((A:1,B:1):1,C:2);");
  ASSERT_EQ(tree.tip_count(), 3u);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(tree.tip_depths()[i], 2.0);
  EXPECT_DOUBLE_EQ(tree.pair_times("A", "B").shared_time, 1.0);
  EXPECT_DOUBLE_EQ(tree.pair_times("A", "C").shared_time, 0.0);
}

TEST(ParseNewick, UnbalancedParenthesisReportsEndOfInput) {
  try {
    parse_newick("(A:1");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.position(), 4u);
    EXPECT_NE(std::string(e.what()).find("end of input"), std::string::npos);
  }
}

TEST(ParseNewick, RejectsMissingBranchLength) {
  EXPECT_THROW(parse_newick("(A:1,B);"), ParseError);
  EXPECT_THROW(parse_newick("((A:1,B:1),C:2);"), ParseError);
}

TEST(ParseNewick, RejectsDuplicateTips) {
  try {
    parse_newick("(A:1,A:1);");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("duplicate"), std::string::npos);
  }
}

TEST(ParseNewick, RejectsQuotedLabelsAndComments) {
  EXPECT_THROW(parse_newick("('A':1,B:1);"), ParseError);
  EXPECT_THROW(parse_newick("(A[x]:1,B:1);"), ParseError);
  EXPECT_THROW(parse_newick("(A:1,B:1)[&R];"), ParseError);
}

TEST(ParseNewick, RejectsBadLengthsAndTrailingInput) {
  EXPECT_THROW(parse_newick("(A:-1,B:1);"), ParseError);
  EXPECT_THROW(parse_newick("(A:inf,B:1);"), ParseError);
  EXPECT_THROW(parse_newick("(A:x,B:1);"), ParseError);
  EXPECT_THROW(parse_newick("(A:1,B:1);;"), ParseError);
  EXPECT_THROW(parse_newick("(A:1,B:1)"), ParseError);
  EXPECT_THROW(parse_newick("(,B:1);"), ParseError);
  EXPECT_THROW(parse_newick(""), ParseError);
}

TEST(ParseNewick, RootLengthIsKeptButIgnored) {
  const auto tree = parse_newick("((A:1,B:1):1,C:2):5;");
  EXPECT_DOUBLE_EQ(tree.tip_depths()[2], 2.0);
  EXPECT_EQ(serialize_newick(tree), "((A:1,B:1):1,C:2):5;");
}

TEST(ParseNewick, WhitespaceAndInternalLabels) {
  const auto tree = parse_newick(" ( (A : 0.5 , B:0.5 ) ab : 1.5, C_1.x:2 ) root ;\n");
  EXPECT_EQ(tree.tip_count(), 3u);
  EXPECT_EQ(serialize_newick(tree), "((A:0.5,B:0.5)ab:1.5,C_1.x:2)root;");
}

TEST(ParseNewick, MultifurcationsAccepted) {
  const auto tree = parse_newick("(A:1,B:1,C:1);");
  EXPECT_EQ(tree.tip_count(), 3u);
  EXPECT_DOUBLE_EQ(tree.pair_times("B", "C").shared_time, 0.0);
}

TEST(SerializeNewick, MatchesInputForSimpleTrees) {
  EXPECT_EQ(serialize_newick(parse_newick("(A:1,B:1);")), "(A:1,B:1);");
  EXPECT_EQ(serialize_newick(parse_newick("((A:1,B:1):1,C:2);")), "((A:1,B:1):1,C:2);");
}

TEST(SerializeNewick, SingleTip) {
  const auto tree = parse_newick("A:0;");
  EXPECT_EQ(tree.tip_count(), 1u);
  EXPECT_EQ(serialize_newick(tree), "A:0;");
  EXPECT_EQ(serialize_newick(parse_newick(serialize_newick(tree))), "A:0;");
}

TEST(SerializeNewick, RoundTripPropertyOnRandomTrees) {
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 50; ++rep) {
    const auto tree = testing::random_ultrametric(2 + rep % 40, rng);
    const std::string text = serialize_newick(tree);
    const auto again = parse_newick(text);
    EXPECT_EQ(serialize_newick(again), text);
    EXPECT_EQ(again.tip_labels(), tree.tip_labels());
    EXPECT_EQ((again.shared_times() - tree.shared_times()).cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(PairTimes, ExamplesOnThreeTipTree) {
  const auto tree = parse_newick("((A:1,B:1):1,C:2);");
  auto ab = tree.pair_times("A", "B");
  EXPECT_DOUBLE_EQ(ab.shared_time, 1.0);
  EXPECT_DOUBLE_EQ(ab.divergence_time, 2.0);
  EXPECT_DOUBLE_EQ(ab.depth, 2.0);
  auto ac = tree.pair_times("A", "C");
  EXPECT_DOUBLE_EQ(ac.shared_time, 0.0);
  EXPECT_DOUBLE_EQ(ac.divergence_time, 4.0);
  auto aa = tree.pair_times("A", "A");
  EXPECT_DOUBLE_EQ(aa.shared_time, 2.0);
  EXPECT_DOUBLE_EQ(aa.divergence_time, 0.0);
  EXPECT_THROW(tree.pair_times("A", "Z"), InputError);
}

TEST(PairTimes, SymmetricAndConsistentOnRandomUltrametricTrees) {
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 30; ++rep) {
    const auto tree = testing::random_ultrametric(3 + rep * 3, rng);
    const double depth = validate_ultrametric(tree);
    const auto n = tree.tip_count();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const auto pij = tree.pair_times(i, j);
        const auto pji = tree.pair_times(j, i);
        EXPECT_EQ(pij.shared_time, pji.shared_time);
        EXPECT_EQ(pij.divergence_time, pji.divergence_time);
        EXPECT_NEAR(pij.shared_time + pij.divergence_time / 2.0, depth, 1e-12 * depth);
      }
    }
  }
}

TEST(ValidateUltrametric, Examples) {
  EXPECT_DOUBLE_EQ(validate_ultrametric(parse_newick("((A:1,B:1):1,C:2);")), 2.0);
  try {
    validate_ultrametric(parse_newick("(A:1,B:2);"));
    FAIL() << "expected TreeError";
  } catch (const TreeError& e) {
    EXPECT_NE(std::string(e.what()).find("'B'"), std::string::npos);
  }
  EXPECT_DOUBLE_EQ(validate_ultrametric(parse_newick("(A:1,B:1.2);"), 0.5), 1.1);
  EXPECT_DOUBLE_EQ(validate_ultrametric(parse_newick("A:0;")), 0.0);
}

TEST(NormalizeTipDepths, MakesTreeUltrametric) {
  const auto tree = normalize_tip_depths(parse_newick("((A:1,B:1.2):1,C:2);"));
  EXPECT_NEAR(validate_ultrametric(tree, 1e-12), 2.0 + 0.2 / 3.0, 1e-12);
  EXPECT_THROW(normalize_tip_depths(parse_newick("((A:0.1,B:0.1):10,C:1);")), TreeError);
}

TEST(PhyloTreeConstruction, RejectsStructuralDefects) {
  std::vector<TreeNode> nodes(3);
  nodes[0].children = {1, 2};
  nodes[1].parent = 0;
  nodes[1].label = "A";
  nodes[2].parent = 0;
  nodes[2].label = "A";
  EXPECT_THROW(PhyloTree(nodes, 0), TreeError);
  nodes[2].label = "B";
  nodes[2].length = -1.0;
  EXPECT_THROW(PhyloTree(nodes, 0), TreeError);
  nodes[2].length = 1.0;
  EXPECT_NO_THROW(PhyloTree(nodes, 0));
  nodes[1].parent = 2;  // parent link disagrees with child list
  EXPECT_THROW(PhyloTree(nodes, 0), TreeError);
}

// Arbitrary bytes must either parse or throw ParseError; anything that parses
// must round-trip.
TEST(ParseNewick, FuzzNeverCrashes) {
  std::mt19937_64 rng(2024);
  const std::string alphabet = "(),:;AB01.e-_ []'\n";
  std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
  std::uniform_int_distribution<int> len(0, 30);
  std::uniform_int_distribution<int> raw(0, 255);
  int parsed = 0;
  for (int rep = 0; rep < 20000; ++rep) {
    std::string text;
    const int l = len(rng);
    for (int i = 0; i < l; ++i) {
      text.push_back(rep % 5 == 0 ? static_cast<char>(raw(rng)) : alphabet[pick(rng)]);
    }
    try {
      const auto tree = parse_newick(text);
      ++parsed;
      EXPECT_EQ(serialize_newick(parse_newick(serialize_newick(tree))), serialize_newick(tree));
    } catch (const ParseError&) {
    }
  }
  // Deep nesting is handled without recursion.
  std::string deep(200000, '(');
  EXPECT_THROW(parse_newick(deep), ParseError);
  SUCCEED() << parsed << " random strings parsed";
}

}  // namespace
}  // namespace ououreg
