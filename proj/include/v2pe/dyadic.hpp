#pragma once

#include <compare>
#include <cstdint>
#include <string>
#include <string_view>

namespace v2pe {

// Exact rational with a power-of-two denominator: numerator / 2^exponent.
// Always kept normalized (odd numerator, or exponent 0), so equality is
// structural. Every value is exactly representable as a binary double as long
// as the numerator fits in 53 bits.
class Dyadic {
 public:
  static constexpr int kMaxExponent = 62;

  constexpr Dyadic() = default;
  constexpr Dyadic(std::int64_t integer) : num_(integer) {}  // NOLINT: implicit by intent

  // numerator / 2^exponent. Throws ConfigError when exponent is out of range.
  static Dyadic from_parts(std::int64_t numerator, int exponent);

  // Parses "a", "a/b" (b a power of two) or a "-" prefixed form of either.
  // Throws ConfigError for anything else, including non-dyadic denominators.
  static Dyadic parse(std::string_view text);

  std::int64_t numerator() const noexcept { return num_; }
  int exponent() const noexcept { return exp_; }
  std::int64_t denominator() const noexcept { return std::int64_t(1) << exp_; }

  double to_double() const noexcept;
  float to_float() const noexcept { return static_cast<float>(to_double()); }

  // Canonical text form: "3", "1/8", "-5/4".
  std::string to_string() const;

  Dyadic operator-() const { return from_parts(-num_, exp_); }
  friend Dyadic operator+(const Dyadic& a, const Dyadic& b);
  friend Dyadic operator-(const Dyadic& a, const Dyadic& b) { return a + (-b); }
  friend Dyadic operator*(const Dyadic& a, const Dyadic& b);
  Dyadic& operator+=(const Dyadic& o) { return *this = *this + o; }

  friend bool operator==(const Dyadic&, const Dyadic&) = default;
  friend std::strong_ordering operator<=>(const Dyadic& a, const Dyadic& b);

 private:
  constexpr Dyadic(std::int64_t num, int exp, int) : num_(num), exp_(exp) {}

  std::int64_t num_ = 0;
  int exp_ = 0;
};

}  // namespace v2pe
