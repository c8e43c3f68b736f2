#pragma once

#include <cmath>
#include <ostream>

namespace fairmeta {

/// Forward-mode dual number a + b·ε with ε² = 0.
///
/// Running the reverse-mode gradient code with Dual parameters seeded by a
/// direction v yields the Hessian-vector product H·v in the tangent parts.
template <class T>
struct Dual {
  T value{};
  T tangent{};

  constexpr Dual() = default;
  constexpr Dual(T v) : value(v) {}  // NOLINT(google-explicit-constructor)
  constexpr Dual(T v, T t) : value(v), tangent(t) {}

  constexpr Dual& operator+=(const Dual& o) {
    value += o.value;
    tangent += o.tangent;
    return *this;
  }
  constexpr Dual& operator-=(const Dual& o) {
    value -= o.value;
    tangent -= o.tangent;
    return *this;
  }
  constexpr Dual& operator*=(const Dual& o) {
    tangent = tangent * o.value + value * o.tangent;
    value *= o.value;
    return *this;
  }
  constexpr Dual& operator/=(const Dual& o) {
    tangent = (tangent * o.value - value * o.tangent) / (o.value * o.value);
    value /= o.value;
    return *this;
  }

  friend constexpr Dual operator+(Dual a, const Dual& b) { return a += b; }
  friend constexpr Dual operator-(Dual a, const Dual& b) { return a -= b; }
  friend constexpr Dual operator*(Dual a, const Dual& b) { return a *= b; }
  friend constexpr Dual operator/(Dual a, const Dual& b) { return a /= b; }
  friend constexpr Dual operator-(const Dual& a) { return {-a.value, -a.tangent}; }

  friend std::ostream& operator<<(std::ostream& os, const Dual& d) {
    return os << d.value << "+" << d.tangent << "e";
  }
};

/// Primal value of a scalar; branches (ReLU, |.|, max) are decided on it.
inline double primal(double x) { return x; }
inline long double primal(long double x) { return x; }
template <class T>
auto primal(const Dual<T>& d) {
  return primal(d.value);
}

inline bool is_zero(double x) { return x == 0; }
inline bool is_zero(long double x) { return x == 0; }
template <class T>
bool is_zero(const Dual<T>& d) {
  return is_zero(d.value) && is_zero(d.tangent);
}

template <class T>
Dual<T> abs(const Dual<T>& d) {
  return primal(d.value) < 0 ? -d : d;
}

template <class T>
bool isfinite(const Dual<T>& d) {
  using std::isfinite;
  return isfinite(d.value) && isfinite(d.tangent);
}

}  // namespace fairmeta
