#pragma once

// Experiment runner behind the `fairmeta` executable. Every subcommand reads
// one JSON run configuration and writes CSV/JSON artifacts into output_dir.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fairmeta/csv.hpp"
#include "fairmeta/discovery.hpp"
#include "fairmeta/error.hpp"
#include "fairmeta/metalearn.hpp"
#include "fairmeta/tasks.hpp"

namespace fairmeta::cli {

namespace fs = std::filesystem;
using nlohmann::json;

/// Usage or configuration problem; maps to exit status 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class Mode { GenData, Train, Eval, Discover, Report };

inline Mode parse_mode(const std::string& s) {
  if (s == "gen-data") return Mode::GenData;
  if (s == "train") return Mode::Train;
  if (s == "eval") return Mode::Eval;
  if (s == "discover") return Mode::Discover;
  if (s == "report") return Mode::Report;
  throw ConfigError("unknown subcommand '" + s + "'");
}

struct DataConfig {
  enum class Source { Synthetic, Csv };
  Source source = Source::Synthetic;
  tasks::SyntheticSpec synthetic;
  std::uint64_t seed = 0;  // synthetic generation seed
  std::string csv_path;
  tasks::CsvSchema schema;
};

struct EvalConfig {
  std::vector<std::size_t> k{5, 10, 20};
  std::vector<std::string> checkpoints;  // empty: checkpoint_<r>.json in output_dir
};

struct DiscoverConfig {
  std::string csv_path;
  std::string task_column;
  std::string target_column;
  std::vector<std::string> protected_columns;
  discovery::DiscoveryConfig params;
  std::string dag_path;
  std::string dag_protected = "S";
  std::string dag_target = "Y";
};

struct RunConfig {
  metalearn::Method method = metalearn::Method::FairMaml;
  std::uint64_t seed = 0;
  std::size_t repetitions = 10;
  std::string output_dir = "fairmeta_out";
  metalearn::FairMamlConfig train;
  DataConfig data;
  EvalConfig eval;
  DiscoverConfig discover;

  void validate() const {
    if (repetitions < 1) throw ConfigError("repetitions must be >= 1");
    if (output_dir.empty()) throw ConfigError("output_dir must be non-empty");
    try {
      train.validate();
      discover.params.validate();
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    for (auto k : eval.k)
      if (k < 2) throw ConfigError("eval.k entries must be >= 2");
  }
};

namespace detail {

template <class T>
void take(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void reject_unknown(const json& j, const std::vector<std::string>& known, const std::string& where) {
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("unknown key '" + where + key + "'");
}

inline tasks::SyntheticSpec synthetic_from_json(const json& j) {
  reject_unknown(j,
                 {"n_features", "base_mean_min", "base_mean_max", "shift_min", "shift_max", "sigma",
                  "weight_range", "protected_probability", "records_per_task", "n_train", "n_val",
                  "n_test"},
                 "data.synthetic.");
  tasks::SyntheticSpec s;
  take(j, "n_features", s.n_features);
  take(j, "base_mean_min", s.base_mean_min);
  take(j, "base_mean_max", s.base_mean_max);
  take(j, "shift_min", s.shift_min);
  take(j, "shift_max", s.shift_max);
  take(j, "sigma", s.sigma);
  take(j, "weight_range", s.weight_range);
  take(j, "protected_probability", s.protected_probability);
  take(j, "records_per_task", s.records_per_task);
  take(j, "n_train", s.n_train);
  take(j, "n_val", s.n_val);
  take(j, "n_test", s.n_test);
  return s;
}

/// Parses an override value as JSON when possible, else as a string.
inline json override_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return text;
  }
}

}  // namespace detail

/// Sets a dotted key ("train.lambda") in a JSON document, creating objects
/// along the way.
inline void apply_override(json& doc, const std::string& dotted, const std::string& value) {
  if (dotted.empty()) throw ConfigError("empty override key");
  json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const auto dot = dotted.find('.', start);
    const std::string part = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("malformed override key '" + dotted + "'");
    if (!node->is_object()) throw ConfigError("override '" + dotted + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = detail::override_value(value);
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

inline RunConfig run_config_from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("run configuration must be a JSON object");
  detail::reject_unknown(doc, {"method", "seed", "repetitions", "output_dir", "data", "train", "eval", "discover"}, "");
  RunConfig rc;
  try {
    if (doc.contains("method")) rc.method = metalearn::parse_method(doc.at("method").get<std::string>());
    detail::take(doc, "seed", rc.seed);
    detail::take(doc, "repetitions", rc.repetitions);
    detail::take(doc, "output_dir", rc.output_dir);
    if (doc.contains("train")) rc.train = metalearn::config_from_json(doc.at("train"));
    if (doc.contains("data")) {
      const auto& d = doc.at("data");
      detail::reject_unknown(d, {"source", "seed", "synthetic", "csv", "schema"}, "data.");
      const auto source = d.value("source", std::string("synthetic"));
      if (source == "synthetic") rc.data.source = DataConfig::Source::Synthetic;
      else if (source == "csv") rc.data.source = DataConfig::Source::Csv;
      else throw ConfigError("data.source must be 'synthetic' or 'csv'");
      detail::take(d, "seed", rc.data.seed);
      if (d.contains("synthetic")) rc.data.synthetic = detail::synthetic_from_json(d.at("synthetic"));
      detail::take(d, "csv", rc.data.csv_path);
      if (d.contains("schema")) rc.data.schema = tasks::CsvSchema::from_json(d.at("schema"));
    }
    if (doc.contains("eval")) {
      const auto& e = doc.at("eval");
      detail::reject_unknown(e, {"k", "checkpoints"}, "eval.");
      detail::take(e, "k", rc.eval.k);
      detail::take(e, "checkpoints", rc.eval.checkpoints);
    }
    if (doc.contains("discover")) {
      const auto& d = doc.at("discover");
      detail::reject_unknown(d,
                             {"csv", "task_column", "target_column", "protected_columns", "epsilon",
                              "rule_threshold", "dag", "dag_protected", "dag_target"},
                             "discover.");
      detail::take(d, "csv", rc.discover.csv_path);
      detail::take(d, "task_column", rc.discover.task_column);
      detail::take(d, "target_column", rc.discover.target_column);
      detail::take(d, "protected_columns", rc.discover.protected_columns);
      detail::take(d, "epsilon", rc.discover.params.epsilon);
      detail::take(d, "rule_threshold", rc.discover.params.rule_threshold);
      detail::take(d, "dag", rc.discover.dag_path);
      detail::take(d, "dag_protected", rc.discover.dag_protected);
      detail::take(d, "dag_target", rc.discover.dag_target);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid configuration: ") + e.what());
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  rc.validate();
  return rc;
}

/// Config file, then FAIRMETA_SEED, then command-line overrides.
inline RunConfig load_run_config(const std::string& path,
                                 const std::vector<std::pair<std::string, std::string>>& overrides,
                                 const char* env_seed = std::getenv("FAIRMETA_SEED")) {
  json doc = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    try {
      doc = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config '" + path + "': " + e.what());
    }
  }
  if (env_seed != nullptr && *env_seed != '\0') {
    std::uint64_t seed = 0;
    const std::string_view s(env_seed);
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), seed);
    if (ec != std::errc() || ptr != s.data() + s.size())
      throw ConfigError("FAIRMETA_SEED must be a non-negative integer, got '" + std::string(s) + "'");
    doc["seed"] = seed;
  }
  for (const auto& [k, v] : overrides) apply_override(doc, k, v);
  return run_config_from_json(doc);
}

/// Loads the configured data source; the result is standardized.
inline tasks::TaskSet load_taskset(const DataConfig& d) {
  if (d.source == DataConfig::Source::Csv) {
    if (d.csv_path.empty()) throw ConfigError("data.csv is required for csv source");
    auto ts = tasks::load_csv(d.csv_path, d.schema);
    for (const auto& w : ts.warnings) std::cerr << "warning: " << w << '\n';
    return ts;
  }
  auto ts = tasks::generate_synthetic(d.synthetic, d.seed);
  tasks::apply_standardization(ts);
  return ts;
}

inline std::string fmt(double v) { return csv::format_number(v); }

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create output directory '" + dir + "': " + ec.message());
}

inline std::ofstream open_output(const fs::path& p) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + p.string() + "'");
  return out;
}

inline void finish_output(std::ofstream& out, const fs::path& p) {
  out.flush();
  if (!out) throw Error("write failed for '" + p.string() + "'");
}

// --------------------------------------------------------------------------
// gen-data

inline std::vector<fs::path> run_gen_data(const RunConfig& rc) {
  if (rc.data.source != DataConfig::Source::Synthetic)
    throw ConfigError("gen-data requires data.source = synthetic");
  const auto ts = tasks::generate_synthetic(rc.data.synthetic, rc.data.seed);
  const fs::path dir = fs::path(rc.output_dir) / "data";
  ensure_dir(dir.string());
  std::vector<fs::path> written;
  for (const char* name : {"train", "val", "test"}) {
    const auto p = dir / (std::string(name) + ".csv");
    auto out = open_output(p);
    tasks::export_split_csv(ts.split(name), ts.n_features, out);
    finish_output(out, p);
    written.push_back(p);
  }
  return written;
}

// --------------------------------------------------------------------------
// train / report

inline const std::vector<std::string>& run_csv_header() {
  static const std::vector<std::string> h{"iteration", "train_loss", "train_md", "val_loss",
                                          "val_md",    "val_auc",    "val_ir"};
  return h;
}

inline std::vector<std::string> run_csv_row(const metalearn::IterationMetrics& m) {
  std::vector<std::string> row{std::to_string(m.iteration), fmt(m.query_loss), fmt(m.query_md)};
  if (m.validation) {
    row.push_back(fmt(m.validation->loss));
    row.push_back(fmt(m.validation->md));
    row.push_back(fmt(m.validation->auc));
    row.push_back(fmt(m.validation->ir));
  } else {
    row.insert(row.end(), 4, "");
  }
  return row;
}

inline fs::path run_csv_path(const RunConfig& rc, std::size_t r) {
  return fs::path(rc.output_dir) / ("run_" + std::to_string(r) + ".csv");
}

inline fs::path checkpoint_path(const RunConfig& rc, std::size_t r) {
  return fs::path(rc.output_dir) / ("checkpoint_" + std::to_string(r) + ".json");
}

/// summary.csv: mean and population std, across repetitions, of the last row
/// of every run CSV. Columns left empty in some run are averaged over the
/// runs that have them; a column empty everywhere is left empty.
inline fs::path write_summary(const RunConfig& rc) {
  const auto& header = run_csv_header();
  std::vector<std::vector<double>> values(header.size());
  for (std::size_t r = 0; r < rc.repetitions; ++r) {
    const auto p = run_csv_path(rc, r);
    const auto table = csv::read_file(p.string());
    if (table.header != header) throw Error("'" + p.string() + "' has an unexpected header");
    if (table.rows.empty()) continue;
    const auto& last = table.rows.back();
    for (std::size_t c = 1; c < header.size(); ++c)
      if (!csv::trim(last[c]).empty())
        values[c].push_back(csv::parse_number(last[c], table.lines.back(), header[c]));
  }
  const auto p = fs::path(rc.output_dir) / "summary.csv";
  auto out = open_output(p);
  csv::Writer w(out);
  w.row({"metric", "mean", "std"});
  for (std::size_t c = 1; c < header.size(); ++c) {
    if (values[c].empty()) {
      w.row({header[c], "", ""});
      continue;
    }
    const auto a = metalearn::aggregate(values[c]);
    w.row({header[c], fmt(a.mean), fmt(a.std)});
  }
  finish_output(out, p);
  return p;
}

inline std::vector<fs::path> run_train(const RunConfig& rc) {
  const auto ts = load_taskset(rc.data);
  ensure_dir(rc.output_dir);
  std::vector<fs::path> written;
  for (std::size_t r = 0; r < rc.repetitions; ++r) {
    auto cfg = rc.train;
    cfg.seed = rc.seed + r;
    const auto csv_path = run_csv_path(rc, r);
    auto out = open_output(csv_path);
    csv::Writer w(out);
    w.row(run_csv_header());
    out.flush();
    auto result = metalearn::fit(ts, cfg, rc.method,
                                 [&](const metalearn::IterationMetrics& m, const metalearn::TrainState&) {
                                   w.row(run_csv_row(m));
                                   out.flush();
                                 });
    finish_output(out, csv_path);
    written.push_back(csv_path);
    metalearn::Checkpoint ck{cfg, rc.method, ts.n_features, ts.stats, std::move(result.state)};
    const auto ck_path = checkpoint_path(rc, r);
    metalearn::save_checkpoint(ck, ck_path.string());
    written.push_back(ck_path);
  }
  written.push_back(write_summary(rc));
  return written;
}

inline std::vector<fs::path> run_report(const RunConfig& rc) { return {write_summary(rc)}; }

// --------------------------------------------------------------------------
// eval

inline const std::vector<std::string>& eval_csv_header() {
  static const std::vector<std::string> h{
      "method",   "k",       "tasks",    "tasks_skipped",     "loss_mean",        "loss_std",
      "md_mean",  "md_std",  "md_raw_mean", "md_raw_std",     "auc_mean",         "auc_std",
      "ir_mean",  "ir_std",  "ir_two_sided_mean", "ir_two_sided_std", "ir_undefined"};
  return h;
}

/// Evaluates every checkpoint on the test split for each K. Task-level values
/// are pooled across checkpoints of the same method before aggregation.
inline std::vector<fs::path> run_eval(const RunConfig& rc) {
  std::vector<std::string> paths = rc.eval.checkpoints;
  if (paths.empty())
    for (std::size_t r = 0; r < rc.repetitions; ++r) paths.push_back(checkpoint_path(rc, r).string());
  std::vector<metalearn::Checkpoint> cks;
  for (const auto& p : paths) cks.push_back(metalearn::load_checkpoint(p));
  const auto ts = load_taskset(rc.data);
  if (ts.test.empty()) throw Error("eval: the test split is empty");
  for (std::size_t i = 0; i < cks.size(); ++i) {
    const auto expected = cks[i].state.phi.config().input_dim;
    const auto given = tasks::input_dim(ts.n_features, cks[i].config.include_protected);
    if (expected != given)
      throw DimensionError("checkpoint '" + paths[i] + "' input dimension vs data", expected, given);
  }
  std::vector<metalearn::Method> methods;
  for (const auto& ck : cks)
    if (std::find(methods.begin(), methods.end(), ck.method) == methods.end()) methods.push_back(ck.method);

  ensure_dir(rc.output_dir);
  const auto out_path = fs::path(rc.output_dir) / "eval.csv";
  auto out = open_output(out_path);
  csv::Writer w(out);
  w.row(eval_csv_header());
  for (auto method : methods) {
    for (auto k : rc.eval.k) {
      std::vector<double> loss, md, md_raw, auc, ir, ir2;
      std::size_t used = 0, skipped = 0, undefined = 0;
      for (std::size_t i = 0; i < cks.size(); ++i) {
        if (cks[i].method != method) continue;
        const auto r = metalearn::evaluate(cks[i].state.phi, ts.test, ts.stats, cks[i].config, method, k,
                                           rc.seed + i, true);
        used += r.tasks_used;
        skipped += r.tasks_skipped;
        undefined += r.ir_undefined;
        for (const auto& t : r.per_task) {
          loss.push_back(t.loss);
          md.push_back(t.md);
          md_raw.push_back(t.md_raw);
          auc.push_back(t.auc);
          if (t.ir) {
            ir.push_back(*t.ir);
            ir2.push_back(*t.ir_two_sided);
          }
        }
      }
      std::vector<std::string> row{metalearn::to_string(method), std::to_string(k), std::to_string(used),
                                   std::to_string(skipped)};
      for (const auto* v : {&loss, &md, &md_raw, &auc, &ir, &ir2}) {
        if (v->empty()) {
          row.insert(row.end(), 2, "");
          continue;
        }
        const auto a = metalearn::aggregate(*v);
        row.push_back(fmt(a.mean));
        row.push_back(fmt(a.std));
      }
      row.push_back(std::to_string(undefined));
      w.row(row);
    }
  }
  finish_output(out, out_path);
  return {out_path};
}

// --------------------------------------------------------------------------
// discover

/// Discretizes the target and every protected column into terciles over the
/// whole file and groups records by task.
inline discovery::CategoricalTable categorical_table(const csv::Table& table, const DiscoverConfig& d) {
  if (d.protected_columns.empty()) throw ConfigError("discover.protected_columns is empty");
  const auto task_col = table.require_column(d.task_column);
  auto levels_of = [&](const std::string& name) {
    const auto c = table.require_column(name);
    std::vector<double> v(table.rows.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = csv::parse_number(table.rows[i][c], table.lines[i], name);
    return discovery::discretize_terciles(v);
  };
  const auto target = levels_of(d.target_column);
  std::vector<std::vector<discovery::Level>> prot;
  for (const auto& name : d.protected_columns) prot.push_back(levels_of(name));
  discovery::CategoricalTable out(d.protected_columns);
  std::vector<discovery::Level> rec(prot.size());
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    for (std::size_t v = 0; v < prot.size(); ++v) rec[v] = prot[v][i];
    out.add_record(table.rows[i][task_col], target[i], rec);
  }
  return out;
}

inline std::vector<fs::path> run_discover(const RunConfig& rc) {
  const auto& d = rc.discover;
  if (d.csv_path.empty()) throw ConfigError("discover.csv is required");
  // parse the DAG first so a malformed graph writes nothing
  std::optional<discovery::CausalGraph> dag;
  if (!d.dag_path.empty()) dag = discovery::load_dag(d.dag_path);
  const auto table = categorical_table(csv::read_file(d.csv_path), d);

  ensure_dir(rc.output_dir);
  std::vector<fs::path> written;
  const auto p = fs::path(rc.output_dir) / "discovery.csv";
  auto out = open_output(p);
  csv::Writer w(out);
  w.row({"protected_variable", "r", "flagged", "comparisons_total", "comparisons_skipped"});
  for (std::size_t v = 0; v < d.protected_columns.size(); ++v) {
    const auto r = discovery::parity_ratio(table, v, d.params);
    w.row({d.protected_columns[v], fmt(r.r), r.flagged ? "true" : "false",
           std::to_string(r.comparisons_total), std::to_string(r.comparisons_skipped)});
  }
  finish_output(out, p);
  written.push_back(p);

  if (dag) {
    const auto paths_file = fs::path(rc.output_dir) / "dag_paths.csv";
    auto po = open_output(paths_file);
    csv::Writer pw(po);
    pw.row({"path"});
    for (const auto& path : discovery::causal_paths(*dag, d.dag_protected, d.dag_target)) {
      std::string s;
      for (std::size_t i = 0; i < path.size(); ++i) s += (i ? " -> " : "") + path[i];
      pw.row({s});
    }
    finish_output(po, paths_file);
    written.push_back(paths_file);

    const auto edges_file = fs::path(rc.output_dir) / "dag_edges.csv";
    auto eo = open_output(edges_file);
    csv::Writer ew(eo);
    ew.row({"from", "to", "label"});
    const auto labeled = discovery::classify_edges(*dag, d.dag_protected, d.dag_target);
    for (const auto& e : labeled.edges())
      ew.row({labeled.name(e.from), labeled.name(e.to), discovery::to_string(e.label)});
    finish_output(eo, edges_file);
    written.push_back(edges_file);
  }
  return written;
}

inline std::vector<fs::path> run(Mode mode, const RunConfig& rc) {
  switch (mode) {
    case Mode::GenData: return run_gen_data(rc);
    case Mode::Train: return run_train(rc);
    case Mode::Eval: return run_eval(rc);
    case Mode::Discover: return run_discover(rc);
    case Mode::Report: return run_report(rc);
  }
  return {};
}

}  // namespace fairmeta::cli
