#include "v2pe/dyadic.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <limits>

#include "v2pe/errors.hpp"

namespace v2pe {
namespace {

std::int64_t checked_shift(std::int64_t value, int by) {
  if (by == 0 || value == 0) return value;
  const auto mag = value < 0 ? -static_cast<__int128>(value) : static_cast<__int128>(value);
  const __int128 shifted = mag << by;
  if (by >= 63 || shifted > std::numeric_limits<std::int64_t>::max()) {
    throw RangeError("dyadic overflow");
  }
  return value < 0 ? -static_cast<std::int64_t>(shifted) : static_cast<std::int64_t>(shifted);
}

std::int64_t parse_int(std::string_view s, std::string_view whole) {
  std::int64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc{} || ptr != s.data() + s.size()) {
    throw ConfigError("not a rational: '" + std::string(whole) + "'");
  }
  return v;
}

}  // namespace

Dyadic Dyadic::from_parts(std::int64_t numerator, int exponent) {
  if (exponent < 0) {
    return Dyadic(checked_shift(numerator, -exponent));
  }
  if (exponent > kMaxExponent) throw ConfigError("dyadic exponent out of range");
  if (numerator == 0) return Dyadic();
  while (exponent > 0 && (numerator & 1) == 0) {
    numerator /= 2;
    --exponent;
  }
  return Dyadic(numerator, exponent, 0);
}

Dyadic Dyadic::parse(std::string_view text) {
  std::string_view s = text;
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  const auto slash = s.find('/');
  if (slash == std::string_view::npos) return Dyadic(parse_int(s, text));

  const std::int64_t num = parse_int(s.substr(0, slash), text);
  const std::int64_t den = parse_int(s.substr(slash + 1), text);
  if (den <= 0 || !std::has_single_bit(static_cast<std::uint64_t>(den))) {
    throw ConfigError("denominator must be a positive power of two: '" + std::string(text) + "'");
  }
  return from_parts(num, std::countr_zero(static_cast<std::uint64_t>(den)));
}

double Dyadic::to_double() const noexcept {
  return std::ldexp(static_cast<double>(num_), -exp_);
}

std::string Dyadic::to_string() const {
  if (exp_ == 0) return std::to_string(num_);
  return std::to_string(num_) + "/" + std::to_string(denominator());
}

Dyadic operator+(const Dyadic& a, const Dyadic& b) {
  const int e = a.exp_ > b.exp_ ? a.exp_ : b.exp_;
  const std::int64_t an = checked_shift(a.num_, e - a.exp_);
  const std::int64_t bn = checked_shift(b.num_, e - b.exp_);
  std::int64_t sum = 0;
  if (__builtin_add_overflow(an, bn, &sum)) throw RangeError("dyadic overflow");
  return Dyadic::from_parts(sum, e);
}

Dyadic operator*(const Dyadic& a, const Dyadic& b) {
  std::int64_t prod = 0;
  if (__builtin_mul_overflow(a.num_, b.num_, &prod)) throw RangeError("dyadic overflow");
  return Dyadic::from_parts(prod, a.exp_ + b.exp_);
}

std::strong_ordering operator<=>(const Dyadic& a, const Dyadic& b) {
  const int e = a.exp_ > b.exp_ ? a.exp_ : b.exp_;
  const __int128 an = static_cast<__int128>(a.num_) << (e - a.exp_);
  const __int128 bn = static_cast<__int128>(b.num_) << (e - b.exp_);
  return an <=> bn;
}

}  // namespace v2pe
