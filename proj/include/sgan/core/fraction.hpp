#pragma once

#include <numeric>
#include <stdexcept>
#include <string>

namespace sgan {

/// Exact positive rational, used for resize and pooling scales ("1/4").
struct Fraction {
  int num = 1;
  int den = 1;

  constexpr Fraction() = default;
  constexpr Fraction(int n, int d) : num(n), den(d) {
    if (n <= 0 || d <= 0) throw std::invalid_argument("fraction must be positive");
    const int g = std::gcd(n, d);
    num = n / g;
    den = d / g;
  }

  double value() const { return static_cast<double>(num) / den; }
  /// floor(n * this)
  int apply(int n) const { return static_cast<int>((static_cast<long long>(n) * num) / den); }
  std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }

  static Fraction parse(const std::string& s) {
    const auto slash = s.find('/');
    try {
      if (slash == std::string::npos) return Fraction(std::stoi(s), 1);
      return Fraction(std::stoi(s.substr(0, slash)), std::stoi(s.substr(slash + 1)));
    } catch (const std::logic_error&) {
      throw std::invalid_argument("not a fraction: '" + s + "'");
    }
  }

  friend bool operator==(const Fraction& a, const Fraction& b) {
    return a.num == b.num && a.den == b.den;
  }
  friend bool operator<(const Fraction& a, const Fraction& b) {
    return static_cast<long long>(a.num) * b.den < static_cast<long long>(b.num) * a.den;
  }
};

}  // namespace sgan
