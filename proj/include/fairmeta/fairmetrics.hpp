#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fairmeta/diffnet.hpp"
#include "fairmeta/error.hpp"

namespace fairmeta::fairmetrics {

/// Scalar outcomes split by a binary protected label (1 = protected).
struct GroupedSample {
  std::vector<double> values;
  std::vector<std::uint8_t> groups;

  GroupedSample() = default;
  GroupedSample(std::vector<double> v, std::vector<std::uint8_t> g)
      : values(std::move(v)), groups(std::move(g)) {
    if (values.size() != groups.size())
      throw DimensionError("GroupedSample", values.size(), groups.size());
  }

  /// Builds a sample from separate protected / unprotected value lists.
  static GroupedSample from_groups(std::span<const double> protected_values,
                                   std::span<const double> unprotected_values) {
    GroupedSample s;
    for (double v : protected_values) {
      s.values.push_back(v);
      s.groups.push_back(1);
    }
    for (double v : unprotected_values) {
      s.values.push_back(v);
      s.groups.push_back(0);
    }
    return s;
  }

  std::size_t size() const { return values.size(); }
  std::size_t n_protected() const {
    return static_cast<std::size_t>(std::count(groups.begin(), groups.end(), 1));
  }
  std::size_t n_unprotected() const { return size() - n_protected(); }

  GroupedSample swapped() const {
    GroupedSample s = *this;
    for (auto& g : s.groups) g = g ? 0 : 1;
    return s;
  }
};

namespace detail {

inline void require_both_groups(std::size_t n_plus, std::size_t n_minus, const char* what) {
  if (n_plus == 0) throw EmptyGroupError(what, true);
  if (n_minus == 0) throw EmptyGroupError(what, false);
}

/// (protected mean, unprotected mean). Sums run relative to the first value,
/// so a constant sample has exactly equal group means.
template <class T>
std::pair<T, T> group_means(std::span<const T> values, std::span<const std::uint8_t> groups,
                            const char* what) {
  T sum_plus{}, sum_minus{};
  std::size_t n_plus = 0, n_minus = 0;
  const T ref = values.empty() ? T{} : values[0];
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (groups[i]) {
      sum_plus += values[i] - ref;
      ++n_plus;
    } else {
      sum_minus += values[i] - ref;
      ++n_minus;
    }
  }
  require_both_groups(n_plus, n_minus, what);
  return {ref + sum_plus / T(static_cast<double>(n_plus)),
          ref + sum_minus / T(static_cast<double>(n_minus))};
}

template <class T>
T abs_value(const T& v) {
  return primal(v) < 0 ? -v : v;
}

}  // namespace detail

/// |mean(protected) - mean(unprotected)|
inline double mean_difference(const GroupedSample& sample) {
  const auto [plus, minus] =
      detail::group_means<double>(sample.values, sample.groups, "mean_difference");
  return std::abs(plus - minus);
}

/// Probability that a protected outcome exceeds an unprotected one, ties
/// credited 0.5. Sort-based, O(N log N).
inline double auc(const GroupedSample& sample) {
  std::vector<double> minus;
  std::size_t n_plus = 0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    if (sample.groups[i])
      ++n_plus;
    else
      minus.push_back(sample.values[i]);
  }
  detail::require_both_groups(n_plus, minus.size(), "auc");
  std::sort(minus.begin(), minus.end());
  double score = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    if (!sample.groups[i]) continue;
    const double v = sample.values[i];
    const auto lo = std::lower_bound(minus.begin(), minus.end(), v);
    const auto hi = std::upper_bound(lo, minus.end(), v);
    score += static_cast<double>(lo - minus.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  return score / (static_cast<double>(n_plus) * static_cast<double>(minus.size()));
}

/// mean(protected) / mean(unprotected); the unprotected mean must be positive.
inline double impact_ratio(const GroupedSample& sample) {
  const auto [plus, minus] =
      detail::group_means<double>(sample.values, sample.groups, "impact_ratio");
  if (!(minus > 0))
    throw Error("impact_ratio: unprotected-group mean " + std::to_string(minus) +
                " is not positive");
  return plus / minus;
}

enum class RuleSides { TwoSided, OneSided };

/// min(ir, 1/ir); 1 means parity.
inline double parity_ratio_of(double ir) {
  if (!(ir > 0)) throw Error("impact ratio must be positive, got " + std::to_string(ir));
  return std::min(ir, 1.0 / ir);
}

/// True when the impact ratio violates the 80% rule. Two-sided by default so a
/// disadvantage of either group is flagged.
inline bool eighty_percent_flag(double ir, RuleSides sides = RuleSides::TwoSided,
                                double threshold = 0.8) {
  if (!(ir > 0)) throw Error("eighty_percent_flag: ir must be positive, got " + std::to_string(ir));
  const double r = sides == RuleSides::TwoSided ? parity_ratio_of(ir) : ir;
  return r < threshold;
}

/// Mean difference of the network's predictions between protected groups.
template <class T>
T prediction_md_from(std::span<const T> pred, std::span<const std::uint8_t> groups) {
  const auto [plus, minus] = detail::group_means<T>(pred, groups, "prediction_md");
  return detail::abs_value(plus - minus);
}

template <class T>
T prediction_md(const diffnet::MLPParams<T>& params, const diffnet::Batch& batch) {
  const auto pred = diffnet::predict(params, batch);
  return prediction_md_from<T>(pred, batch.groups);
}

/// Adds weight * d MD / d pred_i into `out`. The sign of the group-mean gap
/// drives the chain rule; an exactly zero gap contributes nothing.
template <class T>
void prediction_md_seed(std::span<const T> pred, std::span<const std::uint8_t> groups,
                        double weight, std::span<T> out) {
  const auto [plus, minus] = detail::group_means<T>(pred, groups, "prediction_md");
  const double gap = primal(plus - minus);
  if (gap == 0) return;
  std::size_t n_plus = 0;
  for (auto g : groups) n_plus += g;
  const std::size_t n_minus = groups.size() - n_plus;
  const double sign = gap > 0 ? 1.0 : -1.0;
  const T up(sign * weight / static_cast<double>(n_plus));
  const T down(-sign * weight / static_cast<double>(n_minus));
  for (std::size_t i = 0; i < groups.size(); ++i) out[i] += groups[i] ? up : down;
}

}  // namespace fairmeta::fairmetrics
