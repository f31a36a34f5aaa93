#pragma once

#include <cstdint>
#include <numeric>
#include <string>

#include "flashsvd/errors.hpp"

namespace flashsvd {

// Exact nonnegative rational. Threshold and speedup formulas are published as
// exact ratios; callers floor to integer ranks or render as decimals, but the
// comparisons themselves stay in integer arithmetic.
struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  Rational() = default;
  Rational(std::int64_t n, std::int64_t d) : num(n), den(d) {
    if (den == 0) throw NumericError("rational with zero denominator");
    if (den < 0) { num = -num; den = -den; }
    std::int64_t g = std::gcd(num < 0 ? -num : num, den);
    if (g > 1) { num /= g; den /= g; }
  }

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  std::int64_t floor() const {
    std::int64_t q = num / den;
    if (num % den != 0 && (num < 0)) --q;
    return q;
  }
  std::int64_t ceil() const {
    std::int64_t q = num / den;
    if (num % den != 0 && (num > 0)) ++q;
    return q;
  }
  bool is_integer() const { return num % den == 0; }

  friend bool operator==(const Rational& a, const Rational& b) {
    return a.num == b.num && a.den == b.den;
  }
  friend bool operator!=(const Rational& a, const Rational& b) { return !(a == b); }

  std::string str() const {
    return den == 1 ? std::to_string(num)
                    : std::to_string(num) + "/" + std::to_string(den);
  }
};

// rank < bound, compared exactly.
inline bool rank_below(std::int64_t rank, const Rational& bound) {
  return rank * bound.den < bound.num;
}

}  // namespace flashsvd
