#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "fairmeta/diffnet.hpp"
#include "fairmeta/error.hpp"
#include "fairmeta/fairmetrics.hpp"
#include "fairmeta/objective.hpp"
#include "fairmeta/tasks.hpp"

namespace fairmeta::metalearn {

using diffnet::Batch;
using diffnet::ConstraintMode;
using diffnet::GradientOrder;
using diffnet::MLPParams;
using diffnet::NetConfig;
using diffnet::Reduction;

enum class Method { Maml, FairMaml, Baseline, FairBaseline };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::Maml: return "maml";
    case Method::FairMaml: return "fair-maml";
    case Method::Baseline: return "baseline";
    case Method::FairBaseline: return "fair-baseline";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "maml") return Method::Maml;
  if (s == "fair-maml") return Method::FairMaml;
  if (s == "baseline") return Method::Baseline;
  if (s == "fair-baseline") return Method::FairBaseline;
  throw Error("unknown method '" + s + "' (expected maml, fair-maml, baseline, fair-baseline)");
}

inline bool is_meta(Method m) { return m == Method::Maml || m == Method::FairMaml; }
inline bool is_fair(Method m) { return m == Method::FairMaml || m == Method::FairBaseline; }

struct FairMamlConfig {
  double alpha = 0.01;
  double beta = 0.001;
  std::size_t q = 1;
  double lambda = 1.0;
  double c = 0.1;
  std::size_t K = 10;
  std::size_t meta_batch_size = 10;
  std::size_t iterations = 1000;
  GradientOrder order = GradientOrder::Second;
  ConstraintMode mode = ConstraintMode::Always;
  Reduction reduction = Reduction::Mean;
  std::uint64_t seed = 0;

  std::size_t hidden1 = 40, hidden2 = 40;
  bool include_protected = true;  // feed s as an extra input
  bool query_penalty = true;      // meta-objective includes the query Lagrangian term
  std::size_t val_interval = 100;  // 0 disables validation
  std::size_t val_tasks = 0;       // 0 = every validation task
  std::size_t baseline_batch_size = 64;
  std::vector<double> finetune_alphas{0.001, 0.01, 0.1};
  std::size_t finetune_max_steps = 10;
  double adam_b1 = 0.9, adam_b2 = 0.999, adam_eps = 1e-8;
  std::size_t workers = 1;

  void validate() const {
    auto fail = [](const std::string& m) { throw Error("FairMamlConfig: " + m); };
    if (!(alpha > 0) || !std::isfinite(alpha)) fail("alpha must be > 0");
    if (!(beta > 0) || !std::isfinite(beta)) fail("beta must be > 0");
    if (q < 1) fail("q must be >= 1");
    if (!(lambda >= 0) || !std::isfinite(lambda)) fail("lambda must be >= 0");
    if (!(c > 0) || !std::isfinite(c)) fail("c must be > 0");
    if (K < 2) fail("K must be >= 2");
    if (meta_batch_size < 1) fail("meta_batch_size must be >= 1");
    if (hidden1 < 1 || hidden2 < 1) fail("hidden sizes must be >= 1");
    if (baseline_batch_size < 2) fail("baseline_batch_size must be >= 2");
    if (finetune_alphas.empty()) fail("finetune_alphas must be non-empty");
    for (double a : finetune_alphas)
      if (!(a > 0)) fail("finetune_alphas must be > 0");
    if (!(adam_b1 >= 0 && adam_b1 < 1 && adam_b2 >= 0 && adam_b2 < 1 && adam_eps > 0))
      fail("invalid Adam hyperparameters");
    if (workers < 1) fail("workers must be >= 1");
  }

  NetConfig net(std::size_t n_features) const {
    return NetConfig{tasks::input_dim(n_features, include_protected), hidden1, hidden2};
  }

  /// Config with lambda forced to 0 for the unconstrained methods.
  FairMamlConfig for_method(Method m) const {
    auto c2 = *this;
    if (!is_fair(m)) c2.lambda = 0.0;
    return c2;
  }
};

inline std::string to_string(GradientOrder o) { return o == GradientOrder::First ? "first" : "second"; }
inline std::string to_string(ConstraintMode m) { return m == ConstraintMode::Always ? "always" : "hinge"; }
inline std::string to_string(Reduction r) { return r == Reduction::Mean ? "mean" : "sum"; }

inline GradientOrder parse_order(const std::string& s) {
  if (s == "first") return GradientOrder::First;
  if (s == "second") return GradientOrder::Second;
  throw Error("unknown order '" + s + "'");
}
inline ConstraintMode parse_mode(const std::string& s) {
  if (s == "always") return ConstraintMode::Always;
  if (s == "hinge") return ConstraintMode::Hinge;
  throw Error("unknown constraint_mode '" + s + "'");
}
inline Reduction parse_reduction(const std::string& s) {
  if (s == "mean") return Reduction::Mean;
  if (s == "sum") return Reduction::Sum;
  throw Error("unknown loss_reduction '" + s + "'");
}

inline nlohmann::json to_json(const FairMamlConfig& c) {
  return {{"alpha", c.alpha},
          {"beta", c.beta},
          {"q", c.q},
          {"lambda", c.lambda},
          {"c", c.c},
          {"K", c.K},
          {"meta_batch_size", c.meta_batch_size},
          {"iterations", c.iterations},
          {"order", to_string(c.order)},
          {"constraint_mode", to_string(c.mode)},
          {"loss_reduction", to_string(c.reduction)},
          {"seed", c.seed},
          {"hidden1", c.hidden1},
          {"hidden2", c.hidden2},
          {"include_protected", c.include_protected},
          {"query_penalty", c.query_penalty},
          {"val_interval", c.val_interval},
          {"val_tasks", c.val_tasks},
          {"baseline_batch_size", c.baseline_batch_size},
          {"finetune_alphas", c.finetune_alphas},
          {"finetune_max_steps", c.finetune_max_steps},
          {"adam_b1", c.adam_b1},
          {"adam_b2", c.adam_b2},
          {"adam_eps", c.adam_eps},
          {"workers", c.workers}};
}

/// Reads the keys present in `j` over `base`; unknown keys are an error.
inline FairMamlConfig config_from_json(const nlohmann::json& j, FairMamlConfig base = {}) {
  if (!j.is_object()) throw Error("training config must be a JSON object");
  auto& c = base;
  for (const auto& [key, v] : j.items()) {
    if (key == "alpha") c.alpha = v.get<double>();
    else if (key == "beta") c.beta = v.get<double>();
    else if (key == "q") c.q = v.get<std::size_t>();
    else if (key == "lambda") c.lambda = v.get<double>();
    else if (key == "c") c.c = v.get<double>();
    else if (key == "K") c.K = v.get<std::size_t>();
    else if (key == "meta_batch_size") c.meta_batch_size = v.get<std::size_t>();
    else if (key == "iterations") c.iterations = v.get<std::size_t>();
    else if (key == "order") c.order = parse_order(v.get<std::string>());
    else if (key == "constraint_mode") c.mode = parse_mode(v.get<std::string>());
    else if (key == "loss_reduction") c.reduction = parse_reduction(v.get<std::string>());
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "hidden1") c.hidden1 = v.get<std::size_t>();
    else if (key == "hidden2") c.hidden2 = v.get<std::size_t>();
    else if (key == "include_protected") c.include_protected = v.get<bool>();
    else if (key == "query_penalty") c.query_penalty = v.get<bool>();
    else if (key == "val_interval") c.val_interval = v.get<std::size_t>();
    else if (key == "val_tasks") c.val_tasks = v.get<std::size_t>();
    else if (key == "baseline_batch_size") c.baseline_batch_size = v.get<std::size_t>();
    else if (key == "finetune_alphas") c.finetune_alphas = v.get<std::vector<double>>();
    else if (key == "finetune_max_steps") c.finetune_max_steps = v.get<std::size_t>();
    else if (key == "adam_b1") c.adam_b1 = v.get<double>();
    else if (key == "adam_b2") c.adam_b2 = v.get<double>();
    else if (key == "adam_eps") c.adam_eps = v.get<double>();
    else if (key == "workers") c.workers = v.get<std::size_t>();
    else throw Error("unknown training config key '" + key + "'");
  }
  return c;
}

/// Meta-parameters plus Adam optimizer state. m and v always match phi in
/// size.
struct TrainState {
  MLPParams<double> phi;
  std::vector<double> adam_m, adam_v;
  std::uint64_t adam_t = 0;
  std::size_t iteration = 0;
  std::mt19937_64 rng;

  TrainState() = default;
  TrainState(MLPParams<double> init, std::uint64_t seed)
      : phi(std::move(init)), adam_m(phi.size(), 0.0), adam_v(phi.size(), 0.0), rng(seed) {}

  friend bool operator==(const TrainState&, const TrainState&) = default;
};

/// Initial state: parameters from `seed`, sampling rng from a derived seed.
inline TrainState initial_state(const NetConfig& net, std::uint64_t seed) {
  return TrainState(diffnet::init_params(net, seed), seed ^ 0x5851f42d4c957f2dULL);
}

struct ValidationMetrics {
  double loss = 0, md = 0, auc = 0, ir = 0;
};

struct IterationMetrics {
  std::size_t iteration = 0;
  double query_loss = 0;  // mean over the meta-batch of l(f_phi_j) on the query
  double query_md = 0;    // mean over the meta-batch of g(f_phi_j) on the query
  double support_md = 0;  // mean over the meta-batch of g(f_phi_j) on the support
  std::optional<ValidationMetrics> validation;
};

inline diffnet::Objective lagrangian(const Batch& support, const FairMamlConfig& config) {
  return diffnet::lagrangian_objective(support, config.lambda, config.c, config.mode,
                                       config.reduction);
}

/// Scalar value of the inner Lagrangian.
inline double lagrangian(const MLPParams<double>& params, const Batch& support,
                         const FairMamlConfig& config) {
  return diffnet::evaluate(lagrangian(support, config), params);
}

inline diffnet::Objective query_objective(const Batch& query, const FairMamlConfig& config) {
  if (config.query_penalty) return lagrangian(query, config);
  return diffnet::squared_loss_objective(query, config.reduction);
}

/// q steps of gradient descent with step alpha on the support Lagrangian.
inline diffnet::Adaptation inner_adapt(const MLPParams<double>& phi, const Batch& support,
                                       const FairMamlConfig& config) {
  return diffnet::gradient_descent(lagrangian(support, config), phi, config.alpha, config.q);
}

inline void adam_update(TrainState& state, std::span<const double> g, const FairMamlConfig& config) {
  if (g.size() != state.phi.size()) throw DimensionError("adam_update", state.phi.size(), g.size());
  state.adam_t += 1;
  const double t = static_cast<double>(state.adam_t);
  const double c1 = 1.0 - std::pow(config.adam_b1, t);
  const double c2 = 1.0 - std::pow(config.adam_b2, t);
  auto phi = state.phi.flat();
  for (std::size_t i = 0; i < g.size(); ++i) {
    state.adam_m[i] = config.adam_b1 * state.adam_m[i] + (1.0 - config.adam_b1) * g[i];
    state.adam_v[i] = config.adam_b2 * state.adam_v[i] + (1.0 - config.adam_b2) * g[i] * g[i];
    const double mhat = state.adam_m[i] / c1;
    const double vhat = state.adam_v[i] / c2;
    phi[i] -= config.beta * mhat / (std::sqrt(vhat) + config.adam_eps);
  }
}

namespace detail {

struct EpisodeResult {
  std::vector<double> grad;
  double query_loss = 0, query_md = 0, support_md = 0;
};

inline EpisodeResult episode_meta_grad(const MLPParams<double>& phi, const tasks::Episode& ep,
                                       const FairMamlConfig& config) {
  const auto support = lagrangian(ep.support, config);
  const auto query = query_objective(ep.query, config);
  EpisodeResult r;
  try {
    const auto adaptation = inner_adapt(phi, ep.support, config);
    const auto& adapted = adaptation.adapted();
    r.grad = diffnet::pull_back(adaptation, support, diffnet::grad(query, adapted), config.alpha,
                                config.order);
    r.query_loss = diffnet::batch_loss(adapted, ep.query, config.reduction);
    r.query_md = fairmetrics::prediction_md(adapted, ep.query);
    r.support_md = fairmetrics::prediction_md(adapted, ep.support);
  } catch (const NonFiniteError& e) {
    throw NonFiniteError("task '" + ep.task_id + "': " + e.what());
  }
  if (!diffnet::all_finite(r.grad))
    throw NonFiniteError("task '" + ep.task_id + "': non-finite meta-gradient");
  return r;
}

/// Runs fn(i) for i in [0, n) over `workers` threads; rethrows the first
/// failure by index.
template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  auto run = [&](std::size_t w) {
    for (std::size_t i = w; i < n; i += workers) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// One outer update: meta-gradients of the query objective of every episode,
/// summed in episode order, then one Adam step.
inline IterationMetrics meta_step(TrainState& state, const std::vector<tasks::Episode>& episodes,
                                  const FairMamlConfig& config) {
  if (episodes.empty()) throw Error("meta_step: empty meta-batch");
  std::vector<detail::EpisodeResult> results(episodes.size());
  detail::parallel_for(episodes.size(), config.workers, [&](std::size_t i) {
    results[i] = detail::episode_meta_grad(state.phi, episodes[i], config);
  });
  std::vector<double> total(state.phi.size(), 0.0);
  IterationMetrics m;
  for (const auto& r : results) {
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += r.grad[i];
    m.query_loss += r.query_loss;
    m.query_md += r.query_md;
    m.support_md += r.support_md;
  }
  const double n = static_cast<double>(episodes.size());
  m.query_loss /= n;
  m.query_md /= n;
  m.support_md /= n;
  adam_update(state, total, config);
  if (!state.phi.all_finite()) throw NonFiniteError("meta_step: non-finite parameters after update");
  state.iteration += 1;
  m.iteration = state.iteration;
  return m;
}

/// meta_batch_size distinct training tasks, then one episode from each.
inline std::vector<tasks::Episode> sample_meta_batch(const std::vector<tasks::Task>& train,
                                                     const FairMamlConfig& config,
                                                     std::mt19937_64& rng) {
  if (train.size() < config.meta_batch_size)
    throw Error("need at least meta_batch_size=" + std::to_string(config.meta_batch_size) +
                " training tasks, have " + std::to_string(train.size()));
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), 0);
  // partial Fisher-Yates
  for (std::size_t i = 0; i < config.meta_batch_size; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  std::vector<tasks::Episode> episodes;
  episodes.reserve(config.meta_batch_size);
  for (std::size_t i = 0; i < config.meta_batch_size; ++i)
    episodes.push_back(tasks::sample_episode(train[idx[i]], config.K, rng, config.include_protected));
  return episodes;
}

// --------------------------------------------------------------------------
// Evaluation

struct Aggregate {
  double mean = 0, std = 0;  // population std
  std::size_t count = 0;
};

inline Aggregate aggregate(std::span<const double> v) {
  Aggregate a;
  a.count = v.size();
  if (v.empty()) return a;
  a.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - a.mean) * (x - a.mean);
  a.std = std::sqrt(ss / static_cast<double>(v.size()));
  return a;
}

/// Query-set metrics of one adapted model on one task.
struct TaskMetrics {
  std::string task_id;
  double loss = 0;      // standardized scale
  double md = 0;        // standardized scale
  double md_raw = 0;    // raw target scale
  double auc = 0;
  std::optional<double> ir;            // raw scale; absent when a group mean is <= 0
  std::optional<double> ir_two_sided;  // min(ir, 1/ir)
};

struct EvalResult {
  Aggregate loss, md, md_raw, auc, ir, ir_two_sided;
  std::size_t tasks_used = 0;
  std::size_t tasks_skipped = 0;  // failed episode preconditions
  std::size_t ir_undefined = 0;   // used tasks whose IR is undefined
  std::vector<TaskMetrics> per_task;
};

inline TaskMetrics query_metrics(const MLPParams<double>& adapted, const tasks::Episode& ep,
                                 const tasks::Standardization& stats) {
  TaskMetrics t;
  t.task_id = ep.task_id;
  const auto pred = diffnet::predict(adapted, ep.query);
  t.loss = diffnet::detail::squared_error<double>(pred, ep.query, Reduction::Mean);
  t.md = fairmetrics::prediction_md_from<double>(pred, ep.query.groups);
  t.md_raw = t.md * stats.target_std;
  fairmetrics::GroupedSample s;
  s.values.resize(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) s.values[i] = stats.target_to_raw(pred[i]);
  s.groups.assign(ep.query.groups.begin(), ep.query.groups.end());
  t.auc = fairmetrics::auc(s);
  const auto [plus, minus] = fairmetrics::detail::group_means<double>(s.values, s.groups, "ir");
  if (plus > 0 && minus > 0) {
    t.ir = plus / minus;
    t.ir_two_sided = fairmetrics::parity_ratio_of(*t.ir);
  }
  return t;
}

struct FinetuneResult {
  MLPParams<double> params;
  double alpha = 0;       // 0 when the unadapted parameters win
  std::size_t steps = 0;
  double support_loss = 0, support_md = 0;
};

/// Grid search over step sizes and 0..finetune_max_steps steps on the support
/// Lagrangian. Picks the lowest support loss among candidates with MD <= c
/// when lambda > 0 and any exists, else the lowest Lagrangian. Ties keep the
/// earlier candidate; the unadapted parameters come first.
inline FinetuneResult finetune(const MLPParams<double>& phi, const Batch& support,
                               const FairMamlConfig& config) {
  const auto obj = lagrangian(support, config);
  struct Cand {
    FinetuneResult r;
    double lag;
    bool feasible;
  };
  auto score = [&](const MLPParams<double>& p, double alpha, std::size_t steps) {
    Cand c{{p, alpha, steps, diffnet::batch_loss(p, support, config.reduction), 0.0}, 0.0, true};
    c.lag = diffnet::evaluate(obj, p);
    if (config.lambda > 0) {
      c.r.support_md = fairmetrics::prediction_md(p, support);
      c.feasible = c.r.support_md <= config.c;
    }
    return c;
  };
  std::optional<Cand> best_feasible, best_lag;
  auto offer = [&](Cand c) {
    if (c.feasible && (!best_feasible || c.r.support_loss < best_feasible->r.support_loss))
      best_feasible = c;
    if (!best_lag || c.lag < best_lag->lag) best_lag = std::move(c);
  };
  offer(score(phi, 0.0, 0));
  for (double a : config.finetune_alphas) {
    auto traj = diffnet::gradient_descent(obj, phi, a, config.finetune_max_steps);
    for (std::size_t k = 1; k < traj.trajectory.size(); ++k)
      offer(score(traj.trajectory[k], a, k));
  }
  if (config.lambda > 0 && best_feasible) return best_feasible->r;
  return best_lag->r;
}

/// Samples one K-shot episode per task (in order, from `seed`), adapts on the
/// support and scores the query. MAML variants adapt with inner_adapt,
/// baselines with finetune. Tasks whose episode cannot be drawn are skipped.
inline EvalResult evaluate(const MLPParams<double>& phi, const std::vector<tasks::Task>& task_list,
                           const tasks::Standardization& stats, const FairMamlConfig& config,
                           Method method, std::size_t k, std::uint64_t seed,
                           bool keep_per_task = false) {
  if (task_list.empty()) throw Error("evaluate: no tasks");
  const auto cfg = config.for_method(method);
  std::mt19937_64 rng(seed);
  std::vector<tasks::Episode> episodes;
  EvalResult out;
  for (const auto& t : task_list) {
    try {
      episodes.push_back(tasks::sample_episode(t, k, rng, cfg.include_protected));
    } catch (const Error&) {
      ++out.tasks_skipped;
    }
  }
  if (episodes.empty()) throw Error("evaluate: every task failed episode sampling");
  std::vector<TaskMetrics> per(episodes.size());
  detail::parallel_for(episodes.size(), cfg.workers, [&](std::size_t i) {
    const auto& ep = episodes[i];
    try {
      const auto adapted = is_meta(method) ? inner_adapt(phi, ep.support, cfg).adapted()
                                           : finetune(phi, ep.support, cfg).params;
      per[i] = query_metrics(adapted, ep, stats);
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("task '" + ep.task_id + "': " + e.what());
    }
  });
  std::vector<double> loss, md, md_raw, auc, ir, ir2;
  for (const auto& m : per) {
    loss.push_back(m.loss);
    md.push_back(m.md);
    md_raw.push_back(m.md_raw);
    auc.push_back(m.auc);
    if (m.ir) {
      ir.push_back(*m.ir);
      ir2.push_back(*m.ir_two_sided);
    } else {
      ++out.ir_undefined;
    }
  }
  out.tasks_used = per.size();
  out.loss = aggregate(loss);
  out.md = aggregate(md);
  out.md_raw = aggregate(md_raw);
  out.auc = aggregate(auc);
  out.ir = aggregate(ir);
  out.ir_two_sided = aggregate(ir2);
  if (keep_per_task) out.per_task = std::move(per);
  return out;
}

// --------------------------------------------------------------------------
// Training loops

struct TrainResult {
  TrainState state;
  std::vector<IterationMetrics> history;
};

inline std::uint64_t validation_seed(std::uint64_t seed) { return seed ^ 0x9e3779b97f4a7c15ULL; }

inline ValidationMetrics validate_on(const MLPParams<double>& phi, const tasks::TaskSet& ts,
                                     const FairMamlConfig& config, Method method) {
  std::vector<tasks::Task> subset(
      ts.val.begin(),
      ts.val.begin() + static_cast<std::ptrdiff_t>(config.val_tasks == 0
                                                       ? ts.val.size()
                                                       : std::min(config.val_tasks, ts.val.size())));
  const auto r = evaluate(phi, subset, ts.stats, config, method, config.K,
                          validation_seed(config.seed));
  return {r.loss.mean, r.md.mean, r.auc.mean, r.ir_two_sided.mean};
}

inline bool validation_due(const FairMamlConfig& c, std::size_t it) {
  return c.val_interval > 0 && (it == 1 || it % c.val_interval == 0 || it == c.iterations);
}

/// Continues `state` for the remaining config.iterations outer updates.
/// on_iteration(metrics, state) runs after every update.
template <class Callback>
TrainResult train_from(TrainState state, const tasks::TaskSet& ts, const FairMamlConfig& config,
                       Method method, Callback&& on_iteration) {
  config.validate();
  const auto cfg = config.for_method(method);
  if (!is_meta(method)) throw Error("train: method " + to_string(method) + " is not meta-learned");
  if (ts.train.size() < cfg.meta_batch_size)
    throw Error("train: need at least meta_batch_size=" + std::to_string(cfg.meta_batch_size) +
                " training tasks, have " + std::to_string(ts.train.size()));
  TrainResult out;
  while (state.iteration < cfg.iterations) {
    const auto episodes = sample_meta_batch(ts.train, cfg, state.rng);
    auto m = meta_step(state, episodes, cfg);
    if (!ts.val.empty() && validation_due(cfg, m.iteration))
      m.validation = validate_on(state.phi, ts, cfg, method);
    on_iteration(m, state);
    out.history.push_back(std::move(m));
  }
  out.state = std::move(state);
  return out;
}

inline TrainResult train(const tasks::TaskSet& ts, const FairMamlConfig& config,
                         Method method = Method::FairMaml) {
  return train_from(initial_state(config.net(ts.n_features), config.seed), ts, config, method,
                    [](const IterationMetrics&, const TrainState&) {});
}

/// Joint training on records pooled over all training tasks with Adam; the
/// Fair-Baseline adds the Lagrangian term on each pooled mini-batch.
template <class Callback>
TrainResult pretrain_baseline_from(TrainState state, const tasks::TaskSet& ts,
                                   const FairMamlConfig& config, Method method,
                                   Callback&& on_iteration) {
  config.validate();
  if (is_meta(method)) throw Error("pretrain_baseline: method " + to_string(method) + " is meta-learned");
  const auto cfg = config.for_method(method);
  struct Ref {
    std::size_t task, record;
  };
  std::vector<Ref> pool;
  for (std::size_t t = 0; t < ts.train.size(); ++t)
    for (std::size_t r = 0; r < ts.train[t].size(); ++r) pool.push_back({t, r});
  if (pool.size() < cfg.baseline_batch_size)
    throw Error("pretrain_baseline: fewer pooled records than baseline_batch_size");
  TrainResult out;
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  while (state.iteration < cfg.iterations) {
    Batch b;
    std::vector<double> input;
    for (;;) {
      b = Batch{};
      for (std::size_t i = 0; i < cfg.baseline_batch_size; ++i) {
        const auto& ref = pool[pick(state.rng)];
        const auto& rec = ts.train[ref.task].records[ref.record];
        input.assign(rec.x.begin(), rec.x.end());
        if (cfg.include_protected) input.push_back(rec.s ? 1.0 : 0.0);
        b.push_back(input, rec.y, rec.s);
      }
      // the fairness term needs both groups
      const auto np = b.count_protected();
      if (cfg.lambda == 0 || (np > 0 && np < b.size())) break;
    }
    const auto obj = lagrangian(b, cfg);
    const auto g = diffnet::grad(obj, state.phi);
    if (!diffnet::all_finite(g)) throw NonFiniteError("pretrain_baseline: non-finite gradient");
    IterationMetrics m;
    m.query_loss = diffnet::batch_loss(state.phi, b, cfg.reduction);
    const auto np = b.count_protected();
    m.query_md = (np > 0 && np < b.size()) ? fairmetrics::prediction_md(state.phi, b) : 0.0;
    m.support_md = m.query_md;
    adam_update(state, g, cfg);
    if (!state.phi.all_finite()) throw NonFiniteError("pretrain_baseline: non-finite parameters");
    state.iteration += 1;
    m.iteration = state.iteration;
    if (!ts.val.empty() && validation_due(cfg, m.iteration))
      m.validation = validate_on(state.phi, ts, cfg, method);
    on_iteration(m, state);
    out.history.push_back(std::move(m));
  }
  out.state = std::move(state);
  return out;
}

inline TrainResult pretrain_baseline(const tasks::TaskSet& ts, const FairMamlConfig& config,
                                     Method method = Method::Baseline) {
  return pretrain_baseline_from(initial_state(config.net(ts.n_features), config.seed), ts, config,
                                method, [](const IterationMetrics&, const TrainState&) {});
}

/// Dispatches to train or pretrain_baseline.
template <class Callback>
TrainResult fit(const tasks::TaskSet& ts, const FairMamlConfig& config, Method method,
                Callback&& on_iteration) {
  auto state = initial_state(config.net(ts.n_features), config.seed);
  if (is_meta(method)) return train_from(std::move(state), ts, config, method, on_iteration);
  return pretrain_baseline_from(std::move(state), ts, config, method, on_iteration);
}

// --------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  FairMamlConfig config;
  Method method = Method::FairMaml;
  std::size_t n_features = 0;
  tasks::Standardization stats;
  TrainState state;
};

inline nlohmann::json to_json(const Checkpoint& ck) {
  std::ostringstream rng;
  rng << ck.state.rng;
  const auto& net = ck.state.phi.config();
  return {{"format", "fairmeta-checkpoint"},
          {"version", kCheckpointVersion},
          {"method", to_string(ck.method)},
          {"config", to_json(ck.config)},
          {"n_features", ck.n_features},
          {"net", {{"input_dim", net.input_dim}, {"hidden1", net.hidden1}, {"hidden2", net.hidden2}}},
          {"standardization",
           {{"feature_mean", ck.stats.feature_mean},
            {"feature_std", ck.stats.feature_std},
            {"target_mean", ck.stats.target_mean},
            {"target_std", ck.stats.target_std}}},
          {"params", ck.state.phi.flatten()},
          {"adam_m", ck.state.adam_m},
          {"adam_v", ck.state.adam_v},
          {"adam_t", ck.state.adam_t},
          {"iteration", ck.state.iteration},
          {"rng", rng.str()}};
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "fairmeta-checkpoint") throw Error("not a fairmeta checkpoint");
  if (j.at("version").get<int>() != kCheckpointVersion)
    throw Error("unsupported checkpoint version " + j.at("version").dump());
  Checkpoint ck;
  ck.method = parse_method(j.at("method").get<std::string>());
  ck.config = config_from_json(j.at("config"));
  ck.n_features = j.at("n_features").get<std::size_t>();
  const auto& st = j.at("standardization");
  ck.stats.feature_mean = st.at("feature_mean").get<std::vector<double>>();
  ck.stats.feature_std = st.at("feature_std").get<std::vector<double>>();
  ck.stats.target_mean = st.at("target_mean").get<double>();
  ck.stats.target_std = st.at("target_std").get<double>();
  const auto& n = j.at("net");
  const NetConfig net{n.at("input_dim").get<std::size_t>(), n.at("hidden1").get<std::size_t>(),
                      n.at("hidden2").get<std::size_t>()};
  ck.state.phi = MLPParams<double>::unflatten(net, j.at("params").get<std::vector<double>>());
  ck.state.adam_m = j.at("adam_m").get<std::vector<double>>();
  ck.state.adam_v = j.at("adam_v").get<std::vector<double>>();
  if (ck.state.adam_m.size() != net.param_count() || ck.state.adam_v.size() != net.param_count())
    throw DimensionError("checkpoint optimizer state", net.param_count(), ck.state.adam_m.size());
  ck.state.adam_t = j.at("adam_t").get<std::uint64_t>();
  ck.state.iteration = j.at("iteration").get<std::size_t>();
  std::istringstream rng(j.at("rng").get<std::string>());
  rng >> ck.state.rng;
  if (!rng) throw Error("checkpoint: malformed rng state");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out << to_json(ck).dump(1) << '\n';
  if (!out) throw Error("write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");
  try {
    return checkpoint_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw Error("checkpoint '" + path + "': " + e.what());
  }
}

}  // namespace fairmeta::metalearn
