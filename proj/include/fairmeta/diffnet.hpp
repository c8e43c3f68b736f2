#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fairmeta/dual.hpp"
#include "fairmeta/error.hpp"

namespace fairmeta::diffnet {

enum class Activation { ReLU };

struct NetConfig {
  std::size_t input_dim = 1;
  std::size_t hidden1 = 40;
  std::size_t hidden2 = 40;
  Activation activation = Activation::ReLU;

  void validate() const {
    if (input_dim < 1) throw Error("NetConfig: input_dim must be >= 1");
    if (hidden1 < 1 || hidden2 < 1) throw Error("NetConfig: hidden sizes must be >= 1");
  }

  /// D = h1*n + h1 + h2*h1 + h2 + h2 + 1
  std::size_t param_count() const {
    return hidden1 * input_dim + hidden1 + hidden2 * hidden1 + hidden2 + hidden2 + 1;
  }

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

/// Row-major batch of network inputs with regression targets and binary
/// protected labels (1 = protected, 0 = unprotected).
struct Batch {
  std::size_t dim = 0;
  std::vector<double> inputs;
  std::vector<double> targets;
  std::vector<std::uint8_t> groups;

  std::size_t size() const { return targets.size(); }
  bool empty() const { return targets.empty(); }

  std::span<const double> row(std::size_t i) const {
    return {inputs.data() + i * dim, dim};
  }

  void push_back(std::span<const double> x, double y, bool protected_group) {
    if (dim == 0 && empty()) dim = x.size();
    if (x.size() != dim) throw DimensionError("Batch::push_back", dim, x.size());
    inputs.insert(inputs.end(), x.begin(), x.end());
    targets.push_back(y);
    groups.push_back(protected_group ? 1 : 0);
  }

  std::size_t count_protected() const {
    std::size_t n = 0;
    for (auto g : groups) n += g;
    return n;
  }
};

/// All weights of the fixed 2-hidden-layer regression network, stored as one
/// flat vector: W1 (h1 x n, row-major), b1, W2 (h2 x h1), b2, w3 (h2), b3.
template <class T = double>
class MLPParams {
 public:
  MLPParams() = default;
  explicit MLPParams(const NetConfig& config)
      : config_(config), flat_((config.validate(), config.param_count()), T{}) {}

  static MLPParams unflatten(const NetConfig& config, std::vector<T> flat) {
    config.validate();
    if (flat.size() != config.param_count())
      throw DimensionError("MLPParams::unflatten", config.param_count(), flat.size());
    MLPParams p;
    p.config_ = config;
    p.flat_ = std::move(flat);
    return p;
  }

  const NetConfig& config() const { return config_; }
  std::size_t size() const { return flat_.size(); }

  std::span<const T> flat() const { return flat_; }
  std::span<T> flat() { return flat_; }
  std::vector<T> flatten() const { return flat_; }

  std::size_t w1_offset() const { return 0; }
  std::size_t b1_offset() const { return config_.hidden1 * config_.input_dim; }
  std::size_t w2_offset() const { return b1_offset() + config_.hidden1; }
  std::size_t b2_offset() const { return w2_offset() + config_.hidden2 * config_.hidden1; }
  std::size_t w3_offset() const { return b2_offset() + config_.hidden2; }
  std::size_t b3_offset() const { return w3_offset() + config_.hidden2; }

  T& w1(std::size_t i, std::size_t j) { return flat_[i * config_.input_dim + j]; }
  T& b1(std::size_t i) { return flat_[b1_offset() + i]; }
  T& w2(std::size_t i, std::size_t j) { return flat_[w2_offset() + i * config_.hidden1 + j]; }
  T& b2(std::size_t i) { return flat_[b2_offset() + i]; }
  T& w3(std::size_t i) { return flat_[w3_offset() + i]; }
  T& b3() { return flat_[b3_offset()]; }

  const T& w1(std::size_t i, std::size_t j) const { return flat_[i * config_.input_dim + j]; }
  const T& b1(std::size_t i) const { return flat_[b1_offset() + i]; }
  const T& w2(std::size_t i, std::size_t j) const { return flat_[w2_offset() + i * config_.hidden1 + j]; }
  const T& b2(std::size_t i) const { return flat_[b2_offset() + i]; }
  const T& w3(std::size_t i) const { return flat_[w3_offset() + i]; }
  const T& b3() const { return flat_[b3_offset()]; }

  template <class U>
  MLPParams<U> cast() const {
    std::vector<U> out(flat_.size());
    for (std::size_t i = 0; i < flat_.size(); ++i) out[i] = static_cast<U>(flat_[i]);
    return MLPParams<U>::unflatten(config_, std::move(out));
  }

  bool all_finite() const {
    using std::isfinite;
    for (const auto& v : flat_)
      if (!isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const MLPParams&, const MLPParams&) = default;

 private:
  NetConfig config_;
  std::vector<T> flat_;
};

template <class T = double>
using GradientVector = std::vector<T>;

/// Scaled-uniform init: weights ~ U(-r, r) with r = sqrt(6 / (fan_in + fan_out)),
/// biases 0.
template <class Rng>
MLPParams<double> init_params(const NetConfig& config, Rng& rng) {
  MLPParams<double> p(config);
  auto fill = [&](std::size_t offset, std::size_t fan_in, std::size_t fan_out) {
    const double r = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-r, r);
    for (std::size_t k = 0; k < fan_in * fan_out; ++k) p.flat()[offset + k] = dist(rng);
  };
  fill(p.w1_offset(), config.input_dim, config.hidden1);
  fill(p.w2_offset(), config.hidden1, config.hidden2);
  fill(p.w3_offset(), config.hidden2, 1);
  return p;
}

inline MLPParams<double> init_params(const NetConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return init_params(config, rng);
}

namespace detail {

template <class T>
T relu(const T& z) {
  return primal(z) > 0 ? z : T{};
}

template <class T>
bool active(const T& z) {
  return primal(z) > 0;
}

/// Per-row activations kept for the backward pass.
template <class T>
struct ForwardCache {
  std::size_t h1 = 0, h2 = 0;
  std::vector<T> z1, z2, a1, a2;
  std::vector<T> pred;
};

template <class T>
void forward_row(const MLPParams<T>& p, std::span<const double> x, T* z1, T* a1, T* z2,
                 T* a2, T& pred) {
  const auto& c = p.config();
  const auto f = p.flat();
  const std::size_t n = c.input_dim;
  for (std::size_t i = 0; i < c.hidden1; ++i) {
    T acc = f[p.b1_offset() + i];
    const T* w = f.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) acc += w[j] * x[j];
    z1[i] = acc;
    a1[i] = relu(acc);
  }
  for (std::size_t i = 0; i < c.hidden2; ++i) {
    T acc = f[p.b2_offset() + i];
    const T* w = f.data() + p.w2_offset() + i * c.hidden1;
    for (std::size_t j = 0; j < c.hidden1; ++j) acc += w[j] * a1[j];
    z2[i] = acc;
    a2[i] = relu(acc);
  }
  T out = f[p.b3_offset()];
  const T* w3 = f.data() + p.w3_offset();
  for (std::size_t i = 0; i < c.hidden2; ++i) out += w3[i] * a2[i];
  pred = out;
}

template <class T>
ForwardCache<T> forward_batch(const MLPParams<T>& p, const Batch& batch) {
  const auto& c = p.config();
  if (batch.dim != c.input_dim && !batch.empty())
    throw DimensionError("forward", c.input_dim, batch.dim);
  ForwardCache<T> cache;
  const std::size_t m = batch.size();
  cache.h1 = c.hidden1;
  cache.h2 = c.hidden2;
  cache.z1.resize(m * c.hidden1);
  cache.a1.resize(m * c.hidden1);
  cache.z2.resize(m * c.hidden2);
  cache.a2.resize(m * c.hidden2);
  cache.pred.resize(m);
  for (std::size_t r = 0; r < m; ++r) {
    forward_row(p, batch.row(r), &cache.z1[r * c.hidden1], &cache.a1[r * c.hidden1],
                &cache.z2[r * c.hidden2], &cache.a2[r * c.hidden2], cache.pred[r]);
  }
  return cache;
}

/// Accumulates sum_r dpred[r] * d pred_r / d params into a flat gradient.
template <class T>
GradientVector<T> backprop(const MLPParams<T>& p, const Batch& batch,
                           const ForwardCache<T>& cache, std::span<const T> dpred) {
  const auto& c = p.config();
  const auto f = p.flat();
  const std::size_t n = c.input_dim, h1 = c.hidden1, h2 = c.hidden2;
  GradientVector<T> g(p.size(), T{});
  std::vector<T> dz2(h2), da1(h1);
  for (std::size_t r = 0; r < batch.size(); ++r) {
    const T dp = dpred[r];
    if (is_zero(dp)) continue;
    const T* a1 = &cache.a1[r * h1];
    const T* a2 = &cache.a2[r * h2];
    const T* z1 = &cache.z1[r * h1];
    const T* z2 = &cache.z2[r * h2];
    const auto x = batch.row(r);

    g[p.b3_offset()] += dp;
    for (std::size_t i = 0; i < h2; ++i) {
      g[p.w3_offset() + i] += dp * a2[i];
      dz2[i] = active(z2[i]) ? dp * f[p.w3_offset() + i] : T{};
    }
    for (std::size_t j = 0; j < h1; ++j) da1[j] = T{};
    for (std::size_t i = 0; i < h2; ++i) {
      if (!active(z2[i])) continue;
      g[p.b2_offset() + i] += dz2[i];
      T* gw = g.data() + p.w2_offset() + i * h1;
      const T* w = f.data() + p.w2_offset() + i * h1;
      for (std::size_t j = 0; j < h1; ++j) {
        gw[j] += dz2[i] * a1[j];
        da1[j] += w[j] * dz2[i];
      }
    }
    for (std::size_t i = 0; i < h1; ++i) {
      if (!active(z1[i])) continue;
      g[p.b1_offset() + i] += da1[i];
      T* gw = g.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) gw[j] += da1[i] * x[j];
    }
  }
  return g;
}

}  // namespace detail

template <class T>
T forward(const MLPParams<T>& params, std::span<const double> x) {
  const auto& c = params.config();
  if (x.size() != c.input_dim) throw DimensionError("forward", c.input_dim, x.size());
  std::vector<T> z1(c.hidden1), a1(c.hidden1), z2(c.hidden2), a2(c.hidden2);
  T pred{};
  detail::forward_row(params, x, z1.data(), a1.data(), z2.data(), a2.data(), pred);
  return pred;
}

template <class T>
std::vector<T> predict(const MLPParams<T>& params, const Batch& batch) {
  return detail::forward_batch(params, batch).pred;
}

enum class Reduction { Mean, Sum };

namespace detail {

template <class T>
T squared_error(std::span<const T> pred, const Batch& batch, Reduction reduction) {
  T acc{};
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const T e = pred[i] - T(batch.targets[i]);
    acc += e * e;
  }
  if (reduction == Reduction::Mean) acc = acc / T(static_cast<double>(batch.size()));
  return acc;
}

/// d loss / d pred_i, scaled by `weight`, added into `out`.
template <class T>
void squared_error_seed(std::span<const T> pred, const Batch& batch, Reduction reduction,
                        double weight, std::span<T> out) {
  const double scale =
      weight * (reduction == Reduction::Mean ? 2.0 / static_cast<double>(batch.size()) : 2.0);
  for (std::size_t i = 0; i < batch.size(); ++i)
    out[i] += T(scale) * (pred[i] - T(batch.targets[i]));
}

}  // namespace detail

/// Squared-error loss of the network over a non-empty batch.
template <class T>
T batch_loss(const MLPParams<T>& params, const Batch& batch,
             Reduction reduction = Reduction::Mean) {
  if (batch.empty()) throw Error("batch_loss: empty batch");
  const auto pred = predict(params, batch);
  return detail::squared_error<T>(pred, batch, reduction);
}

}  // namespace fairmeta::diffnet
