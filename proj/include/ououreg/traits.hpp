#pragma once

#include <Eigen/Dense>

#include <charconv>
#include <cmath>
#include <cstddef>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ououreg/errors.hpp"
#include "ououreg/newick_tree.hpp"

namespace ououreg {

/// Per-species predictor (x) and trait (y) observations.
struct TraitTable {
  std::vector<std::string> species;
  std::vector<double> x;
  std::vector<double> y;

  std::size_t size() const noexcept { return species.size(); }
};

/// Traits reordered to match the tree's tip order.
struct AlignedTraits {
  Eigen::VectorXd x;
  Eigen::VectorXd y;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(trim(line.substr(start)));
      return out;
    }
    out.push_back(trim(line.substr(start, comma - start)));
    start = comma + 1;
  }
}

inline double parse_number(std::string_view field, std::size_t line_no, const char* column) {
  double v = 0.0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || field.empty() || !std::isfinite(v)) {
    throw InputError("line " + std::to_string(line_no) + ": column '" + column +
                     "' is not a finite number: '" + std::string(field) + "'");
  }
  return v;
}

inline void append_csv_number(std::string& out, double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  out.append(buf, ptr);
}

}  // namespace detail

/// Reads `species,x,y` CSV (header required, '.' decimal separator).
inline TraitTable read_trait_csv(std::istream& in) {
  TraitTable table;
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  std::unordered_map<std::string, std::size_t> seen;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view = line;
    if (line_no == 1 && view.substr(0, 3) == "\xEF\xBB\xBF") view.remove_prefix(3);
    if (detail::trim(view).empty()) continue;
    const auto fields = detail::split_commas(view);
    if (!header_seen) {
      if (fields.size() != 3 || fields[0] != "species" || fields[1] != "x" || fields[2] != "y") {
        throw InputError("trait file must start with the header 'species,x,y'");
      }
      header_seen = true;
      continue;
    }
    if (fields.size() != 3) {
      throw InputError("line " + std::to_string(line_no) + ": expected 3 columns, found " +
                       std::to_string(fields.size()));
    }
    if (fields[0].empty()) throw InputError("line " + std::to_string(line_no) + ": empty species name");
    std::string name(fields[0]);
    if (!seen.emplace(name, line_no).second) {
      throw InputError("line " + std::to_string(line_no) + ": duplicate species '" + name + "'");
    }
    table.x.push_back(detail::parse_number(fields[1], line_no, "x"));
    table.y.push_back(detail::parse_number(fields[2], line_no, "y"));
    table.species.push_back(std::move(name));
  }
  if (!header_seen) throw InputError("trait file is empty");
  return table;
}

inline void write_trait_csv(std::ostream& out, const TraitTable& table) {
  std::string buf = "species,x,y\n";
  for (std::size_t i = 0; i < table.size(); ++i) {
    buf += table.species[i];
    buf.push_back(',');
    detail::append_csv_number(buf, table.x[i]);
    buf.push_back(',');
    detail::append_csv_number(buf, table.y[i]);
    buf.push_back('\n');
  }
  out << buf;
}

/// Matches table rows to tree tips. The species set must equal the tip set.
inline AlignedTraits align_traits(const PhyloTree& tree, const TraitTable& table) {
  if (table.x.size() != table.size() || table.y.size() != table.size()) {
    throw InputError("trait table columns have different lengths");
  }
  const auto n = tree.tip_count();
  AlignedTraits out{Eigen::VectorXd::Constant(n, std::nan("")), Eigen::VectorXd::Constant(n, std::nan(""))};
  std::vector<char> filled(n, 0);
  for (std::size_t r = 0; r < table.size(); ++r) {
    if (!tree.has_tip(table.species[r])) {
      throw InputError("species '" + table.species[r] + "' is not a tip of the tree");
    }
    const auto i = tree.tip_index(table.species[r]);
    if (filled[i]) throw InputError("species '" + table.species[r] + "' appears twice");
    if (!std::isfinite(table.x[r]) || !std::isfinite(table.y[r])) {
      throw InputError("species '" + table.species[r] + "' has a non-finite value");
    }
    filled[i] = 1;
    out.x[static_cast<Eigen::Index>(i)] = table.x[r];
    out.y[static_cast<Eigen::Index>(i)] = table.y[r];
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!filled[i]) throw InputError("tip '" + tree.tip_label(i) + "' has no trait row");
  }
  return out;
}

}  // namespace ououreg
