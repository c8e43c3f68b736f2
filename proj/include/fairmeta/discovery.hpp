#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fairmeta/error.hpp"

namespace fairmeta::discovery {

enum class Level : std::uint8_t { Low = 0, Median = 1, High = 2 };

inline constexpr std::array<Level, 3> kLevels{Level::Low, Level::Median, Level::High};

inline const char* to_string(Level l) {
  switch (l) {
    case Level::Low: return "low";
    case Level::Median: return "median";
    case Level::High: return "high";
  }
  return "?";
}

inline bool is_constant(std::span<const double> values) {
  return std::adjacent_find(values.begin(), values.end(), std::not_equal_to<>()) == values.end();
}

/// Equal-frequency terciles. Values are ranked by a stable sort; a run of tied
/// values takes the bin of its first (lowest) rank, so ties never straddle a
/// bin boundary and a constant column maps entirely to Low.
inline std::vector<Level> discretize_terciles(std::span<const double> values) {
  if (values.empty()) throw Error("discretize_terciles: empty input");
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<Level> out(n);
  std::size_t run_start = 0;
  for (std::size_t rank = 0; rank < n; ++rank) {
    if (rank > 0 && values[order[rank]] != values[order[rank - 1]]) run_start = rank;
    const std::size_t bin = std::min<std::size_t>(2, (3 * run_start) / n);
    out[order[rank]] = static_cast<Level>(bin);
  }
  return out;
}

/// Discretized records grouped by task. Each record holds a target level and
/// one level per protected variable.
class CategoricalTable {
 public:
  struct TaskRecords {
    std::string id;
    std::vector<Level> target;
    std::vector<std::vector<Level>> protected_levels;  // [variable][record]
  };

  explicit CategoricalTable(std::vector<std::string> protected_names)
      : names_(std::move(protected_names)) {
    if (names_.empty()) throw Error("CategoricalTable: no protected variables");
  }

  void add_record(const std::string& task_id, Level target, std::span<const Level> protected_levels) {
    if (protected_levels.size() != names_.size())
      throw DimensionError("CategoricalTable::add_record", names_.size(), protected_levels.size());
    auto it = index_.find(task_id);
    if (it == index_.end()) {
      it = index_.emplace(task_id, tasks_.size()).first;
      tasks_.push_back(TaskRecords{task_id, {}, std::vector<std::vector<Level>>(names_.size())});
    }
    auto& t = tasks_[it->second];
    t.target.push_back(target);
    for (std::size_t v = 0; v < names_.size(); ++v) t.protected_levels[v].push_back(protected_levels[v]);
  }

  const std::vector<std::string>& protected_names() const { return names_; }
  const std::vector<TaskRecords>& tasks() const { return tasks_; }
  std::size_t task_count() const { return tasks_.size(); }
  bool empty() const { return tasks_.empty(); }

  std::size_t variable_index(const std::string& name) const {
    const auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) throw Error("unknown protected variable '" + name + "'");
    return static_cast<std::size_t>(it - names_.begin());
  }

 private:
  std::vector<std::string> names_;
  std::vector<TaskRecords> tasks_;
  std::map<std::string, std::size_t> index_;
};

/// Empty conditional sub-population in a risk-difference comparison.
class EmptyCellError : public Error {
 public:
  EmptyCellError(std::string task, std::string variable, Level level)
      : Error("risk_difference: task '" + task + "' has no records with " + variable + "=" +
              to_string(level)),
        task_(std::move(task)),
        variable_(std::move(variable)),
        level_(level) {}

  const std::string& task() const { return task_; }
  const std::string& variable() const { return variable_; }
  Level level() const { return level_; }

 private:
  std::string task_;
  std::string variable_;
  Level level_;
};

namespace detail {

/// P(Y = y | S = s) within one task, or nullopt when S = s never occurs.
inline std::optional<double> conditional(const CategoricalTable::TaskRecords& t, std::size_t var,
                                         Level y, Level s) {
  std::size_t cell = 0, hits = 0;
  const auto& sv = t.protected_levels[var];
  for (std::size_t i = 0; i < sv.size(); ++i) {
    if (sv[i] != s) continue;
    ++cell;
    if (t.target[i] == y) ++hits;
  }
  if (cell == 0) return std::nullopt;
  return static_cast<double>(hits) / static_cast<double>(cell);
}

}  // namespace detail

/// |P(Y=y | s1, task) - P(Y=y | s2, task)|
inline double risk_difference(const CategoricalTable& table, std::size_t task, Level y,
                              std::size_t s_var, Level s1, Level s2) {
  const auto& t = table.tasks().at(task);
  const auto p1 = detail::conditional(t, s_var, y, s1);
  if (!p1) throw EmptyCellError(t.id, table.protected_names().at(s_var), s1);
  const auto p2 = detail::conditional(t, s_var, y, s2);
  if (!p2) throw EmptyCellError(t.id, table.protected_names().at(s_var), s2);
  return std::abs(*p1 - *p2);
}

struct DiscoveryConfig {
  double epsilon = 0.05;
  double rule_threshold = 0.8;

  void validate() const {
    if (!(epsilon > 0 && epsilon <= 1)) throw Error("DiscoveryConfig: epsilon must be in (0, 1]");
    if (!(rule_threshold > 0 && rule_threshold <= 1))
      throw Error("DiscoveryConfig: rule_threshold must be in (0, 1]");
  }
};

struct ParityResult {
  double r = 0.0;
  bool flagged = false;
  std::size_t within_epsilon = 0;        // n
  std::size_t comparisons_total = 0;     // attempted: tasks x 3 target levels x 3 level pairs
  std::size_t comparisons_skipped = 0;   // a sub-population was empty
  std::size_t comparisons_used() const { return comparisons_total - comparisons_skipped; }  // m
};

/// Share of (task, target level, unordered protected-level pair) comparisons
/// whose risk difference is within epsilon. Flagged unfair when below the
/// rule threshold. Comparisons touching an empty sub-population are skipped.
inline ParityResult parity_ratio(const CategoricalTable& table, std::size_t s_var,
                                 const DiscoveryConfig& config = {}) {
  config.validate();
  if (table.empty()) throw Error("parity_ratio: empty table");
  if (s_var >= table.protected_names().size())
    throw Error("parity_ratio: protected variable index out of range");
  static constexpr std::array<std::pair<Level, Level>, 3> kPairs{
      std::pair{Level::Low, Level::Median}, std::pair{Level::Low, Level::High},
      std::pair{Level::Median, Level::High}};
  ParityResult res;
  for (const auto& t : table.tasks()) {
    std::array<std::optional<double>, 3> p{};
    for (Level y : kLevels) {
      for (Level s : kLevels) p[static_cast<int>(s)] = detail::conditional(t, s_var, y, s);
      for (const auto& [s1, s2] : kPairs) {
        ++res.comparisons_total;
        const auto& a = p[static_cast<int>(s1)];
        const auto& b = p[static_cast<int>(s2)];
        if (!a || !b) {
          ++res.comparisons_skipped;
          continue;
        }
        if (std::abs(*a - *b) <= config.epsilon) ++res.within_epsilon;
      }
    }
  }
  if (res.comparisons_used() == 0) throw Error("parity_ratio: no valid comparisons");
  res.r = static_cast<double>(res.within_epsilon) / static_cast<double>(res.comparisons_used());
  res.flagged = res.r < config.rule_threshold;
  return res;
}

inline ParityResult parity_ratio(const CategoricalTable& table, const std::string& s_var,
                                 const DiscoveryConfig& config = {}) {
  return parity_ratio(table, table.variable_index(s_var), config);
}

enum class EdgeLabel { Unlabeled, Fair, Unfair, PartiallyUnfair };

inline const char* to_string(EdgeLabel l) {
  switch (l) {
    case EdgeLabel::Unlabeled: return "unlabeled";
    case EdgeLabel::Fair: return "fair";
    case EdgeLabel::Unfair: return "unfair";
    case EdgeLabel::PartiallyUnfair: return "partially-unfair";
  }
  return "?";
}

using Path = std::vector<std::string>;

/// Directed acyclic graph over named variables. Inserting an edge that would
/// close a cycle is rejected.
class CausalGraph {
 public:
  struct Edge {
    std::size_t from;
    std::size_t to;
    EdgeLabel label = EdgeLabel::Unlabeled;
  };

  std::size_t add_node(const std::string& name) {
    const auto it = index_.find(name);
    if (it != index_.end()) return it->second;
    index_.emplace(name, names_.size());
    names_.push_back(name);
    out_.emplace_back();
    return names_.size() - 1;
  }

  /// `line` is reported when the edge closes a cycle.
  void add_edge(const std::string& from, const std::string& to, std::size_t line = 0) {
    const std::size_t a = add_node(from), b = add_node(to);
    if (a == b || reaches(b, a))
      throw ParseError("edge " + from + " -> " + to + " creates a cycle", line);
    for (std::size_t e : out_[a])
      if (edges_[e].to == b) return;
    out_[a].push_back(edges_.size());
    edges_.push_back(Edge{a, b});
  }

  bool has_node(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t node(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown node '" + name + "'");
    return it->second;
  }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const std::vector<std::string>& nodes() const { return names_; }
  const std::vector<Edge>& edges() const { return edges_; }
  std::vector<Edge>& edges() { return edges_; }
  std::span<const std::size_t> out_edges(std::size_t node) const { return out_.at(node); }

  std::optional<EdgeLabel> label(const std::string& from, const std::string& to) const {
    if (!has_node(from) || !has_node(to)) return std::nullopt;
    const std::size_t a = node(from), b = node(to);
    for (std::size_t e : out_[a])
      if (edges_[e].to == b) return edges_[e].label;
    return std::nullopt;
  }

  /// Directed reachability (a node reaches itself).
  bool reaches(std::size_t from, std::size_t to) const {
    std::vector<char> seen(names_.size(), 0);
    std::vector<std::size_t> stack{from};
    while (!stack.empty()) {
      const std::size_t u = stack.back();
      stack.pop_back();
      if (u == to) return true;
      if (seen[u]) continue;
      seen[u] = 1;
      for (std::size_t e : out_[u]) stack.push_back(edges_[e].to);
    }
    return false;
  }

 private:
  std::vector<std::string> names_;
  std::map<std::string, std::size_t> index_;
  std::vector<Edge> edges_;
  std::vector<std::vector<std::size_t>> out_;
};

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline bool is_identifier(const std::string& s) {
  if (s.empty() || !(std::isalpha(static_cast<unsigned char>(s[0])) || s[0] == '_')) return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
  });
}

}  // namespace detail

/// Edge-list text: one `source -> target` per line, `#` starts a comment.
inline CausalGraph parse_dag(std::istream& in) {
  CausalGraph g;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    const auto arrow = body.find("->");
    if (arrow == std::string::npos) throw ParseError("expected 'source -> target'", lineno);
    const std::string from = detail::trim(std::string_view(body).substr(0, arrow));
    const std::string to = detail::trim(std::string_view(body).substr(arrow + 2));
    if (!detail::is_identifier(from) || !detail::is_identifier(to))
      throw ParseError("node names must be bare identifiers", lineno);
    g.add_edge(from, to, lineno);
  }
  return g;
}

inline CausalGraph parse_dag(const std::string& text) {
  std::istringstream in(text);
  return parse_dag(in);
}

inline CausalGraph load_dag(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open DAG file '" + path + "'");
  return parse_dag(in);
}

/// Every simple directed path source ~> target, sorted lexicographically by
/// node-name sequence. A node's only path to itself is [node].
inline std::vector<Path> causal_paths(const CausalGraph& g, const std::string& source,
                                      const std::string& target) {
  const std::size_t s = g.node(source), t = g.node(target);
  std::vector<Path> out;
  Path current{g.name(s)};
  auto dfs = [&](auto&& self, std::size_t u) -> void {
    if (u == t) {
      out.push_back(current);
      return;
    }
    for (std::size_t e : g.out_edges(u)) {
      const std::size_t v = g.edges()[e].to;
      if (!g.reaches(v, t)) continue;
      current.push_back(g.name(v));
      self(self, v);
      current.pop_back();
    }
  };
  dfs(dfs, s);
  std::sort(out.begin(), out.end());
  return out;
}

/// Labels edges relative to protected node S and target Y: edges leaving S
/// that lie on a causal path S ~> Y are unfair, other edges on such a path are
/// partially unfair, everything else is fair.
inline CausalGraph classify_edges(const CausalGraph& g, const std::string& protected_node,
                                  const std::string& target) {
  const std::size_t s = g.node(protected_node), y = g.node(target);
  CausalGraph out = g;
  for (auto& e : out.edges()) {
    const bool on_path = g.reaches(s, e.from) && g.reaches(e.to, y);
    if (!on_path)
      e.label = EdgeLabel::Fair;
    else
      e.label = e.from == s ? EdgeLabel::Unfair : EdgeLabel::PartiallyUnfair;
  }
  return out;
}

}  // namespace fairmeta::discovery
