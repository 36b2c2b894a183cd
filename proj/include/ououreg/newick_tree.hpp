#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ououreg/errors.hpp"

namespace ououreg {

struct TreeNode {
  std::string label;
  int parent = -1;
  /// Branch length to the parent. The root's value is kept for round-tripping
  /// but never enters any time computation.
  double length = 0.0;
  bool has_length = false;
  std::vector<int> children;

  bool is_tip() const noexcept { return children.empty(); }
};

/// Time quantities for a pair of tips.
struct PairTimes {
  double shared_time;      // root to most recent common ancestor
  double divergence_time;  // MRCA to tip i plus MRCA to tip j
  double depth;            // mean root-to-tip distance of the tree
};

/// Rooted phylogeny with branch lengths. Immutable once built; the pairwise
/// shared-time and divergence matrices are computed eagerly in tip order.
class PhyloTree {
 public:
  PhyloTree(std::vector<TreeNode> nodes, int root);

  const std::vector<TreeNode>& nodes() const noexcept { return nodes_; }
  int root() const noexcept { return root_; }

  std::size_t tip_count() const noexcept { return tips_.size(); }
  /// Node index of each tip, left-to-right in input order.
  const std::vector<int>& tip_nodes() const noexcept { return tips_; }
  const std::string& tip_label(std::size_t i) const { return nodes_[tips_.at(i)].label; }
  std::vector<std::string> tip_labels() const;
  std::size_t tip_index(std::string_view label) const;
  bool has_tip(std::string_view label) const { return tip_lookup_.count(std::string(label)) > 0; }

  /// Distance from the root to every node.
  const std::vector<double>& node_depths() const noexcept { return node_depth_; }
  Eigen::VectorXd tip_depths() const;
  double mean_tip_depth() const;
  double min_branch_length(bool positive_only = true) const;

  /// n x n matrix of root-to-MRCA times; diagonal holds tip depths.
  const Eigen::MatrixXd& shared_times() const noexcept { return shared_; }
  /// n x n matrix of path lengths between tips through their MRCA.
  const Eigen::MatrixXd& divergence_times() const noexcept { return divergence_; }

  PairTimes pair_times(std::size_t i, std::size_t j) const;
  PairTimes pair_times(std::string_view a, std::string_view b) const {
    return pair_times(tip_index(a), tip_index(b));
  }

  /// Node indices such that every child precedes its parent.
  std::vector<int> postorder() const;
  /// Node indices such that every parent precedes its children.
  std::vector<int> preorder() const;

 private:
  void validate() const;
  void compute_times();

  std::vector<TreeNode> nodes_;
  int root_;
  std::vector<int> tips_;
  std::unordered_map<std::string, std::size_t> tip_lookup_;
  std::vector<double> node_depth_;
  Eigen::MatrixXd shared_;
  Eigen::MatrixXd divergence_;
};

inline PhyloTree::PhyloTree(std::vector<TreeNode> nodes, int root)
    : nodes_(std::move(nodes)), root_(root) {
  validate();
  for (int v : preorder()) {
    if (nodes_[v].is_tip()) {
      tip_lookup_.emplace(nodes_[v].label, tips_.size());
      tips_.push_back(v);
    }
  }
  compute_times();
}

inline void PhyloTree::validate() const {
  const int n = static_cast<int>(nodes_.size());
  if (n == 0) throw TreeError("tree has no nodes");
  if (root_ < 0 || root_ >= n) throw TreeError("root index out of range");
  if (nodes_[root_].parent != -1) throw TreeError("root has a parent");
  std::vector<int> parent_seen(n, 0);
  for (int v = 0; v < n; ++v) {
    const auto& node = nodes_[v];
    if (v != root_) {
      if (node.parent < 0 || node.parent >= n) {
        throw TreeError("node " + std::to_string(v) + " has no valid parent");
      }
      if (!std::isfinite(node.length) || node.length < 0.0) {
        throw TreeError("branch length of node " + std::to_string(v) +
                        " is negative or not finite");
      }
    }
    for (int c : node.children) {
      if (c < 0 || c >= n || nodes_[c].parent != v) {
        throw TreeError("inconsistent parent/child links at node " + std::to_string(v));
      }
      ++parent_seen[c];
    }
  }
  for (int v = 0; v < n; ++v) {
    const int expected = v == root_ ? 0 : 1;
    if (parent_seen[v] != expected) {
      throw TreeError("node " + std::to_string(v) + " is not attached exactly once");
    }
  }
  // Reachability from the root rules out cycles once every node has one parent.
  std::vector<char> seen(n, 0);
  std::vector<int> stack{root_};
  int reached = 0;
  while (!stack.empty()) {
    const int v = stack.back();
    stack.pop_back();
    if (seen[v]) throw TreeError("cycle detected");
    seen[v] = 1;
    ++reached;
    for (int c : nodes_[v].children) stack.push_back(c);
  }
  if (reached != n) throw TreeError("tree contains nodes unreachable from the root");

  std::unordered_map<std::string, int> labels;
  for (const auto& node : nodes_) {
    if (!node.is_tip()) continue;
    if (node.label.empty()) throw TreeError("tip with empty label");
    if (!labels.emplace(node.label, 0).second) {
      throw TreeError("duplicate tip label '" + node.label + "'");
    }
  }
}

inline std::vector<int> PhyloTree::preorder() const {
  std::vector<int> order;
  order.reserve(nodes_.size());
  std::vector<int> stack{root_};
  while (!stack.empty()) {
    const int v = stack.back();
    stack.pop_back();
    order.push_back(v);
    const auto& ch = nodes_[v].children;
    for (auto it = ch.rbegin(); it != ch.rend(); ++it) stack.push_back(*it);
  }
  return order;
}

inline std::vector<int> PhyloTree::postorder() const {
  auto order = preorder();
  std::reverse(order.begin(), order.end());
  return order;
}

inline void PhyloTree::compute_times() {
  node_depth_.assign(nodes_.size(), 0.0);
  for (int v : preorder()) {
    if (v != root_) node_depth_[v] = node_depth_[nodes_[v].parent] + nodes_[v].length;
  }

  const auto n = static_cast<Eigen::Index>(tips_.size());
  shared_.setZero(n, n);
  std::unordered_map<int, Eigen::Index> tip_pos;
  for (Eigen::Index i = 0; i < n; ++i) tip_pos[tips_[i]] = i;

  // Tips below each node, built bottom-up. Pairs split across two different
  // children of v have v as their MRCA.
  std::vector<std::vector<Eigen::Index>> below(nodes_.size());
  for (int v : postorder()) {
    auto& mine = below[v];
    if (nodes_[v].is_tip()) {
      const auto i = tip_pos[v];
      shared_(i, i) = node_depth_[v];
      mine.push_back(i);
      continue;
    }
    for (int c : nodes_[v].children) {
      for (auto i : mine) {
        for (auto j : below[c]) {
          shared_(i, j) = node_depth_[v];
          shared_(j, i) = node_depth_[v];
        }
      }
      mine.insert(mine.end(), below[c].begin(), below[c].end());
      std::vector<Eigen::Index>().swap(below[c]);
    }
  }

  divergence_.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      divergence_(i, j) = shared_(i, i) + shared_(j, j) - 2.0 * shared_(i, j);
    }
    divergence_(i, i) = 0.0;
  }
}

inline std::vector<std::string> PhyloTree::tip_labels() const {
  std::vector<std::string> out;
  out.reserve(tips_.size());
  for (int v : tips_) out.push_back(nodes_[v].label);
  return out;
}

inline std::size_t PhyloTree::tip_index(std::string_view label) const {
  auto it = tip_lookup_.find(std::string(label));
  if (it == tip_lookup_.end()) throw InputError("unknown tip label '" + std::string(label) + "'");
  return it->second;
}

inline Eigen::VectorXd PhyloTree::tip_depths() const { return shared_.diagonal(); }

inline double PhyloTree::mean_tip_depth() const { return shared_.diagonal().mean(); }

inline double PhyloTree::min_branch_length(bool positive_only) const {
  double best = std::numeric_limits<double>::infinity();
  for (int v = 0; v < static_cast<int>(nodes_.size()); ++v) {
    if (v == root_) continue;
    const double len = nodes_[v].length;
    if (positive_only && len <= 0.0) continue;
    best = std::min(best, len);
  }
  return best;
}

inline PairTimes PhyloTree::pair_times(std::size_t i, std::size_t j) const {
  const auto n = tips_.size();
  if (i >= n || j >= n) throw InputError("tip index out of range");
  const auto a = static_cast<Eigen::Index>(i);
  const auto b = static_cast<Eigen::Index>(j);
  return PairTimes{shared_(a, b), divergence_(a, b), mean_tip_depth()};
}

// ---------------------------------------------------------------------------
// Newick reading and writing.
//
// Dialect: labels are [A-Za-z0-9_.]+, every non-root edge carries a length,
// whitespace between tokens is ignored. Quoted labels and [comments] are
// rejected.

namespace detail {

class NewickParser {
 public:
  explicit NewickParser(std::string_view text) : text_(text) {}

  PhyloTree parse() {
    std::vector<int> open;  // internal nodes whose ')' has not been read
    skip_ws();
    for (;;) {
      // A subtree starts here: either a run of '(' or a tip label.
      while (peek() == '(') {
        open.push_back(add_node(open.empty() ? -1 : open.back()));
        ++pos_;
        skip_ws();
      }
      const std::size_t label_pos = pos_;
      std::string label = read_label();
      if (label.empty()) {
        if (at_end()) fail("unexpected end of input");
        fail(std::string("expected tip label, found '") + peek() + "'");
      }
      int node = add_node(open.empty() ? -1 : open.back());
      set_label(node, std::move(label), label_pos, /*tip=*/true);

      // Close as many groups as the input closes.
      for (;;) {
        read_length(node);
        skip_ws();
        if (open.empty()) return finish(node);
        const char c = peek();
        if (c == ',') {
          ++pos_;
          skip_ws();
          break;
        }
        if (c == ')') {
          ++pos_;
          node = open.back();
          open.pop_back();
          skip_ws();
          const std::size_t ipos = pos_;
          std::string internal = read_label();
          if (!internal.empty()) set_label(node, std::move(internal), ipos, /*tip=*/false);
          continue;
        }
        if (at_end()) fail("unexpected end of input");
        fail(std::string("expected ',' or ')', found '") + c + "'");
      }
    }
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const { throw ParseError(msg, pos_); }

  bool at_end() const { return pos_ >= text_.size(); }
  char peek() const { return at_end() ? '\0' : text_[pos_]; }

  void skip_ws() {
    while (!at_end()) {
      const char c = text_[pos_];
      if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
        ++pos_;
      } else {
        break;
      }
    }
  }

  static bool is_label_char(char c) {
    return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') ||
           c == '_' || c == '.';
  }

  std::string read_label() {
    const char c = peek();
    if (c == '\'' || c == '"') fail("quoted labels are not supported");
    if (c == '[') fail("comments are not supported");
    const std::size_t start = pos_;
    while (!at_end() && is_label_char(text_[pos_])) ++pos_;
    std::string label(text_.substr(start, pos_ - start));
    skip_ws();
    if (peek() == '[') fail("comments are not supported");
    return label;
  }

  int add_node(int parent) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    nodes_.back().parent = parent;
    if (parent >= 0) nodes_[parent].children.push_back(id);
    return id;
  }

  void set_label(int node, std::string label, std::size_t at, bool tip) {
    if (tip && !tip_labels_.emplace(label, node).second) {
      throw ParseError("duplicate tip label '" + label + "'", at);
    }
    nodes_[node].label = std::move(label);
  }

  void read_length(int node) {
    skip_ws();
    const bool is_root = nodes_[node].parent < 0;
    if (peek() != ':') {
      if (!is_root) fail("missing branch length");
      return;
    }
    ++pos_;
    skip_ws();
    const char* first = text_.data() + pos_;
    const char* last = text_.data() + text_.size();
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc() || ptr == first) fail("invalid branch length");
    if (!std::isfinite(value)) fail("branch length is not finite");
    if (value < 0.0) fail("negative branch length");
    pos_ += static_cast<std::size_t>(ptr - first);
    nodes_[node].length = value;
    nodes_[node].has_length = true;
  }

  PhyloTree finish(int root) {
    if (peek() != ';') {
      if (at_end()) fail("missing ';' at end of input");
      fail(std::string("expected ';', found '") + peek() + "'");
    }
    ++pos_;
    skip_ws();
    if (!at_end()) fail("trailing characters after ';'");
    for (const auto& node : nodes_) {
      if (node.is_tip() && node.label.empty()) fail("tip with empty label");
    }
    return PhyloTree(std::move(nodes_), root);
  }

  std::string_view text_;
  std::size_t pos_ = 0;
  std::vector<TreeNode> nodes_;
  std::unordered_map<std::string, int> tip_labels_;
};

inline void append_number(std::string& out, double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  out.append(buf, ptr);
}

}  // namespace detail

/// Parses a single Newick tree. Throws ParseError with the byte offset on
/// malformed input.
inline PhyloTree parse_newick(std::string_view text) {
  return detail::NewickParser(text).parse();
}

/// Writes the tree with children in stored order and shortest round-trip
/// number formatting.
inline std::string serialize_newick(const PhyloTree& tree) {
  const auto& nodes = tree.nodes();
  std::string out;
  // (node, next child to visit)
  std::vector<std::pair<int, std::size_t>> stack{{tree.root(), 0}};
  while (!stack.empty()) {
    auto& [v, next] = stack.back();
    const auto& node = nodes[v];
    if (!node.is_tip() && next < node.children.size()) {
      out.push_back(next == 0 ? '(' : ',');
      const int child = node.children[next++];
      stack.emplace_back(child, 0);
      continue;
    }
    if (!node.is_tip()) out.push_back(')');
    out += node.label;
    if (node.has_length) {
      out.push_back(':');
      detail::append_number(out, node.length);
    }
    stack.pop_back();
  }
  out.push_back(';');
  return out;
}

/// Checks that all root-to-tip distances agree with their mean to within
/// `rel_tol` (relative to the mean) and returns that mean depth.
inline double validate_ultrametric(const PhyloTree& tree, double rel_tol = 1e-6) {
  const Eigen::VectorXd depths = tree.tip_depths();
  const double mean = depths.mean();
  if (mean == 0.0) return 0.0;  // every tip sits on the root
  Eigen::Index worst = 0;
  double worst_dev = -1.0;
  for (Eigen::Index i = 0; i < depths.size(); ++i) {
    const double dev = std::abs(depths[i] - mean);
    if (dev > worst_dev || (dev == worst_dev && depths[i] > depths[worst])) {
      worst_dev = dev;
      worst = i;
    }
  }
  const double rel = worst_dev / mean;
  if (rel > rel_tol) {
    throw TreeError("tree is not ultrametric: tip '" + tree.tip_label(worst) + "' has depth " +
                    std::to_string(depths[worst]) + " vs mean " + std::to_string(mean) +
                    " (relative deviation " + std::to_string(rel) + ")");
  }
  return mean;
}

/// Stretches or shrinks terminal branches so every tip sits at the mean depth.
inline PhyloTree normalize_tip_depths(const PhyloTree& tree) {
  const double target = tree.mean_tip_depth();
  auto nodes = tree.nodes();
  const auto& depth = tree.node_depths();
  for (int v : tree.tip_nodes()) {
    if (v == tree.root()) continue;
    const double len = nodes[v].length + (target - depth[v]);
    if (len < 0.0) {
      throw TreeError("cannot normalize tip depths: tip '" + nodes[v].label +
                      "' would need a negative branch length");
    }
    nodes[v].length = len;
  }
  return PhyloTree(std::move(nodes), tree.root());
}

}  // namespace ououreg
