#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fairmeta/diffnet.hpp"
#include "fairmeta/dual.hpp"
#include "fairmeta/error.hpp"
#include "fairmeta/fairmetrics.hpp"

namespace fairmeta::diffnet {

enum class ConstraintMode { Always, Hinge };
enum class GradientOrder { First, Second };

/// Scalar objective over one batch:
///
///   loss_weight * squared_error + md_weight * (MD - md_offset)          (Always)
///   loss_weight * squared_error + md_weight * max(0, MD - md_offset)    (Hinge)
///
/// where MD is the mean difference of predictions between protected groups.
/// With md_weight = 0 the fairness term is skipped entirely, so the batch may
/// then contain a single group.
struct Objective {
  const Batch* batch = nullptr;
  double loss_weight = 1.0;
  Reduction reduction = Reduction::Mean;
  double md_weight = 0.0;
  double md_offset = 0.0;
  ConstraintMode mode = ConstraintMode::Always;

  bool has_fairness_term() const { return md_weight != 0.0; }

  void validate() const {
    if (batch == nullptr) throw Error("objective: no batch bound");
    if (batch->empty()) throw Error("objective: empty batch");
    if (!std::isfinite(loss_weight) || loss_weight < 0)
      throw Error("objective: unsupported loss weight " + std::to_string(loss_weight));
    if (!std::isfinite(md_weight) || md_weight < 0)
      throw Error("objective: unsupported fairness weight " + std::to_string(md_weight));
    if (!std::isfinite(md_offset))
      throw Error("objective: fairness offset must be finite");
  }
};

inline Objective squared_loss_objective(const Batch& batch,
                                        Reduction reduction = Reduction::Mean) {
  return Objective{&batch, 1.0, reduction, 0.0, 0.0, ConstraintMode::Always};
}

/// weight * MD alone.
inline Objective prediction_md_objective(const Batch& batch, double weight = 1.0) {
  return Objective{&batch, 0.0, Reduction::Mean, weight, 0.0, ConstraintMode::Always};
}

inline Objective lagrangian_objective(const Batch& batch, double lambda, double c,
                                      ConstraintMode mode,
                                      Reduction reduction = Reduction::Mean) {
  return Objective{&batch, 1.0, reduction, lambda, c, mode};
}

template <class T>
T evaluate(const Objective& obj, const MLPParams<T>& params) {
  obj.validate();
  const auto pred = predict(params, *obj.batch);
  T value{};
  if (obj.loss_weight != 0.0)
    value += T(obj.loss_weight) * detail::squared_error<T>(pred, *obj.batch, obj.reduction);
  if (obj.has_fairness_term()) {
    const T slack = fairmetrics::prediction_md_from<T>(pred, obj.batch->groups) - T(obj.md_offset);
    if (obj.mode == ConstraintMode::Always)
      value += T(obj.md_weight) * slack;
    else if (primal(slack) > 0)
      value += T(obj.md_weight) * slack;
  }
  return value;
}

/// Exact reverse-mode gradient of `obj` at `params`.
template <class T>
GradientVector<T> grad(const Objective& obj, const MLPParams<T>& params) {
  obj.validate();
  const auto cache = detail::forward_batch(params, *obj.batch);
  std::vector<T> seed(obj.batch->size(), T{});
  const std::span<const T> pred(cache.pred);
  if (obj.loss_weight != 0.0)
    detail::squared_error_seed<T>(pred, *obj.batch, obj.reduction, obj.loss_weight, seed);
  if (obj.has_fairness_term()) {
    bool active = obj.mode == ConstraintMode::Always;
    if (!active) {
      const T md = fairmetrics::prediction_md_from<T>(pred, obj.batch->groups);
      active = primal(md) - obj.md_offset > 0;
    }
    if (active) fairmetrics::prediction_md_seed<T>(pred, obj.batch->groups, obj.md_weight, seed);
  }
  return detail::backprop<T>(params, *obj.batch, cache, seed);
}

/// Hessian-vector product H(params) * v of `obj`, by forward-mode
/// differentiation of the reverse-mode gradient.
inline GradientVector<double> hvp(const Objective& obj, const MLPParams<double>& params,
                                  std::span<const double> v) {
  if (v.size() != params.size()) throw DimensionError("hvp", params.size(), v.size());
  std::vector<Dual<double>> seeded(params.size());
  const auto flat = params.flat();
  for (std::size_t i = 0; i < flat.size(); ++i) seeded[i] = Dual<double>(flat[i], v[i]);
  const auto dual_params = MLPParams<Dual<double>>::unflatten(params.config(), std::move(seeded));
  const auto g = grad(obj, dual_params);
  GradientVector<double> out(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i].tangent;
  return out;
}

/// Iterates phi_0 = start, phi_{k+1} = phi_k - alpha * grad(obj)(phi_k).
/// trajectory holds phi_0 .. phi_steps.
struct Adaptation {
  std::vector<MLPParams<double>> trajectory;

  const MLPParams<double>& initial() const { return trajectory.front(); }
  const MLPParams<double>& adapted() const { return trajectory.back(); }
  std::size_t steps() const { return trajectory.size() - 1; }
};

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

inline Adaptation gradient_descent(const Objective& obj, const MLPParams<double>& start,
                                   double alpha, std::size_t steps) {
  Adaptation a;
  a.trajectory.reserve(steps + 1);
  a.trajectory.push_back(start);
  for (std::size_t k = 0; k < steps; ++k) {
    const auto& cur = a.trajectory.back();
    const auto g = grad(obj, cur);
    if (!all_finite(g))
      throw NonFiniteError("gradient descent: non-finite gradient at step " + std::to_string(k));
    auto next = cur;
    auto f = next.flat();
    for (std::size_t i = 0; i < f.size(); ++i) f[i] -= alpha * g[i];
    if (!next.all_finite())
      throw NonFiniteError("gradient descent: non-finite parameters after step " +
                           std::to_string(k));
    a.trajectory.push_back(std::move(next));
  }
  return a;
}

/// Pulls a gradient taken at the adapted parameters back to the initial
/// parameters. Second order applies (I - alpha * H_k) for every recorded step
/// in reverse; first order treats the adapted parameters as constant.
inline GradientVector<double> pull_back(const Adaptation& adaptation, const Objective& support,
                                        std::span<const double> outer_grad, double alpha,
                                        GradientOrder order) {
  GradientVector<double> u(outer_grad.begin(), outer_grad.end());
  if (order == GradientOrder::First || alpha == 0.0) return u;
  for (std::size_t k = adaptation.steps(); k-- > 0;) {
    const auto hu = hvp(support, adaptation.trajectory[k], u);
    for (std::size_t i = 0; i < u.size(); ++i) u[i] -= alpha * hu[i];
  }
  return u;
}

/// Gradient of query(adapt(params)) with respect to the initial params, where
/// adapt is q steps of gradient descent on the support objective.
inline GradientVector<double> meta_grad(const Objective& query, const Objective& support,
                                        const MLPParams<double>& params, double alpha,
                                        std::size_t q, GradientOrder order) {
  if (q < 1) throw Error("meta_grad: q must be >= 1");
  if (!(alpha >= 0)) throw Error("meta_grad: alpha must be non-negative");
  const auto adaptation = gradient_descent(support, params, alpha, q);
  const auto outer = grad(query, adaptation.adapted());
  return pull_back(adaptation, support, outer, alpha, order);
}

}  // namespace fairmeta::diffnet
