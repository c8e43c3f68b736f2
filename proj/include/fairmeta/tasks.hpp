#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fairmeta/csv.hpp"
#include "fairmeta/diffnet.hpp"
#include "fairmeta/error.hpp"

namespace fairmeta::tasks {

struct TaskRecord {
  std::vector<double> x;
  double y = 0.0;
  bool s = false;  // true = protected group

  friend bool operator==(const TaskRecord&, const TaskRecord&) = default;
};

/// Generating parameters of a synthetic task.
struct SyntheticMeta {
  double base_mean = 0.0;
  double shift = 0.0;
  std::vector<double> weights;

  friend bool operator==(const SyntheticMeta&, const SyntheticMeta&) = default;
};

struct Task {
  std::string id;
  std::vector<TaskRecord> records;
  std::optional<SyntheticMeta> meta;

  std::size_t size() const { return records.size(); }
  std::size_t count_protected() const {
    return static_cast<std::size_t>(
        std::count_if(records.begin(), records.end(), [](const TaskRecord& r) { return r.s; }));
  }
  bool has_both_groups() const {
    const auto np = count_protected();
    return np > 0 && np < records.size();
  }

  friend bool operator==(const Task&, const Task&) = default;
};

/// Per-feature and target location/scale from the training split.
struct Standardization {
  std::vector<double> feature_mean;
  std::vector<double> feature_std;
  double target_mean = 0.0;
  double target_std = 1.0;

  double target_to_raw(double y) const { return y * target_std + target_mean; }
  double target_from_raw(double y) const { return (y - target_mean) / target_std; }

  friend bool operator==(const Standardization&, const Standardization&) = default;
};

struct TaskSet {
  std::vector<Task> train, val, test;
  std::size_t n_features = 0;
  Standardization stats;
  bool standardized = false;
  std::size_t dropped_tasks = 0;
  std::vector<std::string> warnings;

  const std::vector<Task>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw Error("unknown split '" + name + "'");
  }

  friend bool operator==(const TaskSet& a, const TaskSet& b) {
    return a.train == b.train && a.val == b.val && a.test == b.test &&
           a.n_features == b.n_features && a.stats == b.stats && a.standardized == b.standardized;
  }
};

/// Computes population mean / std over every training record. Constant
/// columns get std 1 (so they standardize to 0) and a warning.
inline Standardization compute_standardization(const std::vector<Task>& train,
                                               std::size_t n_features,
                                               std::vector<std::string>* warnings = nullptr,
                                               const std::vector<std::string>* names = nullptr) {
  Standardization st;
  st.feature_mean.assign(n_features, 0.0);
  st.feature_std.assign(n_features, 0.0);
  std::size_t count = 0;
  double ysum = 0;
  for (const auto& t : train)
    for (const auto& r : t.records) {
      for (std::size_t k = 0; k < n_features; ++k) st.feature_mean[k] += r.x[k];
      ysum += r.y;
      ++count;
    }
  if (count == 0) throw Error("standardization: empty training split");
  const double n = static_cast<double>(count);
  for (auto& m : st.feature_mean) m /= n;
  st.target_mean = ysum / n;
  double yss = 0;
  for (const auto& t : train)
    for (const auto& r : t.records) {
      for (std::size_t k = 0; k < n_features; ++k) {
        const double d = r.x[k] - st.feature_mean[k];
        st.feature_std[k] += d * d;
      }
      yss += (r.y - st.target_mean) * (r.y - st.target_mean);
    }
  constexpr double kMinStd = 1e-12;
  auto finish = [&](double ss, const std::string& what) {
    double sd = std::sqrt(ss / n);
    if (!(sd > kMinStd)) {
      if (warnings) warnings->push_back("constant column '" + what + "' standardized to zeros");
      sd = 1.0;
    }
    return sd;
  };
  const auto& first = train.front().records.front();
  for (std::size_t k = 0; k < n_features; ++k) {
    st.feature_std[k] =
        finish(st.feature_std[k], names ? (*names)[k] : "x" + std::to_string(k + 1));
    // a constant column maps to exact zeros
    if (std::all_of(train.begin(), train.end(), [&](const Task& t) {
          return std::all_of(t.records.begin(), t.records.end(),
                             [&](const TaskRecord& r) { return r.x[k] == first.x[k]; });
        }))
      st.feature_mean[k] = first.x[k];
  }
  st.target_std = finish(yss, "target");
  return st;
}

inline void apply_standardization(TaskSet& ts) {
  if (ts.standardized) return;
  for (auto* split : {&ts.train, &ts.val, &ts.test})
    for (auto& t : *split)
      for (auto& r : t.records) {
        for (std::size_t k = 0; k < ts.n_features; ++k)
          r.x[k] = (r.x[k] - ts.stats.feature_mean[k]) / ts.stats.feature_std[k];
        r.y = ts.stats.target_from_raw(r.y);
      }
  ts.standardized = true;
}

inline void undo_standardization(TaskSet& ts) {
  if (!ts.standardized) return;
  for (auto* split : {&ts.train, &ts.val, &ts.test})
    for (auto& t : *split)
      for (auto& r : t.records) {
        for (std::size_t k = 0; k < ts.n_features; ++k)
          r.x[k] = r.x[k] * ts.stats.feature_std[k] + ts.stats.feature_mean[k];
        r.y = ts.stats.target_to_raw(r.y);
      }
  ts.standardized = false;
}

struct SyntheticSpec {
  std::size_t n_features = 7;
  double base_mean_min = 0.0, base_mean_max = 10.0;
  double shift_min = 1.0, shift_max = 5.0;
  double sigma = 1.0;
  double weight_range = 1.0;         // per-task feature weights ~ U[-w, w]
  double protected_probability = 0.5;
  std::size_t records_per_task = 1000;
  std::size_t n_train = 10000, n_val = 1000, n_test = 1000;

  void validate() const {
    if (n_features < 1) throw Error("SyntheticSpec: n_features must be >= 1");
    if (!(base_mean_min <= base_mean_max)) throw Error("SyntheticSpec: empty base-mean range");
    if (!(shift_min > 0 && shift_min <= shift_max))
      throw Error("SyntheticSpec: shift range must be positive");
    if (!(sigma > 0)) throw Error("SyntheticSpec: sigma must be positive");
    if (!(weight_range >= 0)) throw Error("SyntheticSpec: weight_range must be >= 0");
    if (!(protected_probability > 0 && protected_probability < 1))
      throw Error("SyntheticSpec: protected_probability must be in (0, 1)");
    if (records_per_task < 2) throw Error("SyntheticSpec: records_per_task must be >= 2");
  }
};

/// Biased regression tasks: per task base mean mu0, protected shift delta and
/// feature weights beta; each record s ~ Bernoulli(p), x ~ U[0,1]^n and
/// y = mu0 + delta*s + beta.x + N(0, sigma). Records are raw; training-split
/// statistics are computed but not applied.
inline TaskSet generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> base(spec.base_mean_min, spec.base_mean_max);
  std::uniform_real_distribution<double> shift(spec.shift_min, spec.shift_max);
  std::uniform_real_distribution<double> weight(-spec.weight_range, spec.weight_range);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, spec.sigma);
  std::bernoulli_distribution coin(spec.protected_probability);

  auto make_task = [&](const std::string& id) {
    Task t;
    t.id = id;
    SyntheticMeta meta;
    meta.base_mean = base(rng);
    meta.shift = shift(rng);
    meta.weights.resize(spec.n_features);
    for (auto& w : meta.weights) w = weight(rng);
    std::vector<char> groups(spec.records_per_task);
    // redraw until both groups occur
    for (;;) {
      std::size_t np = 0;
      for (auto& g : groups) np += (g = coin(rng) ? 1 : 0);
      if (np > 0 && np < groups.size()) break;
    }
    t.records.reserve(spec.records_per_task);
    for (std::size_t i = 0; i < spec.records_per_task; ++i) {
      TaskRecord r;
      r.s = groups[i] != 0;
      r.x.resize(spec.n_features);
      double y = meta.base_mean + (r.s ? meta.shift : 0.0);
      for (std::size_t k = 0; k < spec.n_features; ++k) {
        r.x[k] = unit(rng);
        y += meta.weights[k] * r.x[k];
      }
      r.y = y + noise(rng);
      t.records.push_back(std::move(r));
    }
    t.meta = std::move(meta);
    return t;
  };

  TaskSet ts;
  ts.n_features = spec.n_features;
  for (std::size_t i = 0; i < spec.n_train; ++i) ts.train.push_back(make_task("train_" + std::to_string(i)));
  for (std::size_t i = 0; i < spec.n_val; ++i) ts.val.push_back(make_task("val_" + std::to_string(i)));
  for (std::size_t i = 0; i < spec.n_test; ++i) ts.test.push_back(make_task("test_" + std::to_string(i)));
  if (!ts.train.empty()) ts.stats = compute_standardization(ts.train, ts.n_features, &ts.warnings);
  return ts;
}

/// One CSV per split: task_id,s,y,x1..xn.
inline void export_split_csv(const std::vector<Task>& split, std::size_t n_features,
                             std::ostream& out) {
  csv::Writer w(out);
  std::vector<std::string> header{"task_id", "s", "y"};
  for (std::size_t k = 0; k < n_features; ++k) header.push_back("x" + std::to_string(k + 1));
  w.row(header);
  std::vector<std::string> row;
  for (const auto& t : split)
    for (const auto& r : t.records) {
      row.clear();
      row.push_back(t.id);
      row.push_back(r.s ? "1" : "0");
      row.push_back(csv::format_number(r.y));
      for (double v : r.x) row.push_back(csv::format_number(v));
      w.row(row);
    }
}

struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0;
};

/// Column layout of tabular multi-task data.
struct CsvSchema {
  std::string task_column;
  std::string target_column;
  std::string protected_column;
  double protected_threshold = 0.70;  // value > threshold -> protected
  std::vector<std::string> feature_columns;
  SplitCounts splits;
  std::uint64_t split_seed = 0;

  static CsvSchema from_json(const nlohmann::json& j) {
    CsvSchema s;
    s.task_column = j.at("task_column").get<std::string>();
    s.target_column = j.at("target_column").get<std::string>();
    s.protected_column = j.at("protected_column").get<std::string>();
    s.protected_threshold = j.value("protected_threshold", 0.70);
    s.feature_columns = j.at("feature_columns").get<std::vector<std::string>>();
    if (j.contains("splits")) {
      const auto& sp = j.at("splits");
      s.splits.train = sp.value("train", std::size_t{0});
      s.splits.val = sp.value("val", std::size_t{0});
      s.splits.test = sp.value("test", std::size_t{0});
    }
    s.split_seed = j.value("split_seed", std::uint64_t{0});
    return s;
  }
};

/// Loads tabular data grouped by task id. The protected column is binarized
/// at the threshold, tasks lacking one group are dropped, tasks are split by
/// seeded shuffle, and features plus target are standardized with
/// training-split statistics.
inline TaskSet load_csv(const csv::Table& table, const CsvSchema& schema) {
  const std::size_t task_col = table.require_column(schema.task_column);
  const std::size_t y_col = table.require_column(schema.target_column);
  const std::size_t s_col = table.require_column(schema.protected_column);
  std::vector<std::size_t> x_cols;
  for (const auto& f : schema.feature_columns) x_cols.push_back(table.require_column(f));
  if (x_cols.empty()) throw Error("schema lists no feature columns");

  std::vector<Task> tasks;
  std::map<std::string, std::size_t> index;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const std::size_t line = table.lines[r];
    TaskRecord rec;
    rec.y = csv::parse_number(row[y_col], line, schema.target_column);
    rec.s = csv::parse_number(row[s_col], line, schema.protected_column) > schema.protected_threshold;
    rec.x.reserve(x_cols.size());
    for (std::size_t k = 0; k < x_cols.size(); ++k)
      rec.x.push_back(csv::parse_number(row[x_cols[k]], line, schema.feature_columns[k]));
    const std::string id(csv::trim(row[task_col]));
    auto it = index.find(id);
    if (it == index.end()) {
      it = index.emplace(id, tasks.size()).first;
      tasks.push_back(Task{id, {}, std::nullopt});
    }
    tasks[it->second].records.push_back(std::move(rec));
  }

  TaskSet ts;
  ts.n_features = x_cols.size();
  std::vector<Task> kept;
  for (auto& t : tasks) {
    if (t.size() < 2 || !t.has_both_groups()) {
      ts.warnings.push_back("task '" + t.id + "' dropped: single protected group");
      ++ts.dropped_tasks;
      continue;
    }
    kept.push_back(std::move(t));
  }

  SplitCounts counts = schema.splits;
  if (counts.train + counts.val + counts.test == 0) counts.train = kept.size();
  if (counts.train + counts.val + counts.test > kept.size())
    throw Error("schema splits request " +
                std::to_string(counts.train + counts.val + counts.test) + " tasks but only " +
                std::to_string(kept.size()) + " are usable");
  if (counts.train == 0) throw Error("schema splits: training split is empty");
  std::mt19937_64 rng(schema.split_seed);
  std::shuffle(kept.begin(), kept.end(), rng);
  std::size_t pos = 0;
  auto take = [&](std::vector<Task>& dst, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst.push_back(std::move(kept[pos++]));
  };
  take(ts.train, counts.train);
  take(ts.val, counts.val);
  take(ts.test, counts.test);

  ts.stats = compute_standardization(ts.train, ts.n_features, &ts.warnings, &schema.feature_columns);
  apply_standardization(ts);
  return ts;
}

inline TaskSet load_csv(const std::string& path, const CsvSchema& schema) {
  return load_csv(csv::read_file(path), schema);
}

/// Network input for a record: features followed by the protected label
/// (0/1) when `include_protected`.
inline diffnet::Batch to_batch(const Task& task, std::span<const std::size_t> indices,
                               bool include_protected) {
  diffnet::Batch b;
  std::vector<double> input;
  for (std::size_t i : indices) {
    const auto& r = task.records.at(i);
    input.assign(r.x.begin(), r.x.end());
    if (include_protected) input.push_back(r.s ? 1.0 : 0.0);
    b.push_back(input, r.y, r.s);
  }
  if (b.dim == 0) b.dim = task.records.empty() ? 0 : task.records[0].x.size() + (include_protected ? 1 : 0);
  return b;
}

inline diffnet::Batch to_batch(const Task& task, bool include_protected) {
  std::vector<std::size_t> all(task.size());
  std::iota(all.begin(), all.end(), 0);
  return to_batch(task, all, include_protected);
}

inline std::size_t input_dim(std::size_t n_features, bool include_protected) {
  return n_features + (include_protected ? 1 : 0);
}

/// K-shot support set and disjoint query set of one task, both containing
/// each protected group.
struct Episode {
  std::string task_id;
  std::vector<std::size_t> support_indices;
  std::vector<std::size_t> query_indices;
  diffnet::Batch support;
  diffnet::Batch query;
};

/// Samples K support and `query_size` (default 2K) query records without
/// replacement. One record of each group is reserved for each side, the rest
/// are drawn uniformly from the remaining pool.
template <class Rng>
Episode sample_episode(const Task& task, std::size_t k, Rng& rng, bool include_protected = true,
                       std::size_t query_size = 0) {
  if (query_size == 0) query_size = 2 * k;
  if (k < 2 || query_size < 2) throw Error("sample_episode: support and query need >= 2 records");
  if (task.size() < k + query_size)
    throw Error("sample_episode: task '" + task.id + "' has " + std::to_string(task.size()) +
                " records, needs " + std::to_string(k + query_size));
  std::vector<std::size_t> plus, minus;
  for (std::size_t i = 0; i < task.size(); ++i) (task.records[i].s ? plus : minus).push_back(i);
  if (plus.size() < 2 || minus.size() < 2)
    throw Error("sample_episode: task '" + task.id + "' needs >= 2 records per protected group");
  std::shuffle(plus.begin(), plus.end(), rng);
  std::shuffle(minus.begin(), minus.end(), rng);

  Episode ep;
  ep.task_id = task.id;
  ep.support_indices = {plus[0], minus[0]};
  ep.query_indices = {plus[1], minus[1]};
  std::vector<std::size_t> pool(plus.begin() + 2, plus.end());
  pool.insert(pool.end(), minus.begin() + 2, minus.end());
  std::sort(pool.begin(), pool.end());
  std::shuffle(pool.begin(), pool.end(), rng);
  auto it = pool.begin();
  ep.support_indices.insert(ep.support_indices.end(), it, it + static_cast<std::ptrdiff_t>(k - 2));
  it += static_cast<std::ptrdiff_t>(k - 2);
  ep.query_indices.insert(ep.query_indices.end(), it, it + static_cast<std::ptrdiff_t>(query_size - 2));
  std::shuffle(ep.support_indices.begin(), ep.support_indices.end(), rng);
  std::shuffle(ep.query_indices.begin(), ep.query_indices.end(), rng);
  ep.support = to_batch(task, ep.support_indices, include_protected);
  ep.query = to_batch(task, ep.query_indices, include_protected);
  return ep;
}

}  // namespace fairmeta::tasks
