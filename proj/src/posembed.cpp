#include "v2pe/posembed.hpp"

#include <charconv>
#include <optional>

namespace v2pe {

void RopeConfig::validate() const {
  if (head_dim <= 0 || head_dim % 2 != 0) {
    throw ConfigError("rope head_dim must be even and positive, got " + std::to_string(head_dim));
  }
  if (!(base > 0.0)) throw ConfigError("rope base must be positive");
  if (const auto* lin = std::get_if<LinearInterpRope>(&scheme); lin && !(lin->factor >= 1.0)) {
    throw ConfigError("linear interpolation factor must be >= 1");
  }
  if (const auto* ntk = std::get_if<NtkScaledRope>(&scheme); ntk && !(ntk->alpha >= 1.0)) {
    throw ConfigError("NTK alpha must be >= 1");
  }
}

double RopeConfig::effective_position(double p) const {
  if (const auto* lin = std::get_if<LinearInterpRope>(&scheme)) return p / lin->factor;
  return p;
}

double RopeConfig::effective_base() const {
  if (const auto* ntk = std::get_if<NtkScaledRope>(&scheme)) {
    // d = 2 would divide by zero; the exponent is then taken as 1.
    const double d = head_dim;
    const double exponent = head_dim > 2 ? d / (d - 2.0) : 1.0;
    return base * std::pow(ntk->alpha, exponent);
  }
  return base;
}

std::vector<double> RopeConfig::inverse_frequencies() const {
  const double b = effective_base();
  std::vector<double> inv(static_cast<std::size_t>(head_dim / 2));
  for (int j = 0; j < head_dim / 2; ++j) {
    inv[static_cast<std::size_t>(j)] = std::pow(b, -2.0 * j / head_dim);
  }
  return inv;
}

std::string scheme_name(const RopeScheme& s) {
  if (std::holds_alternative<LinearInterpRope>(s)) return "linear";
  if (std::holds_alternative<NtkScaledRope>(s)) return "ntk";
  return "standard";
}

namespace {

std::string shortest(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

std::string scheme_spec(const RopeScheme& s) {
  if (const auto* lin = std::get_if<LinearInterpRope>(&s)) return "linear:" + shortest(lin->factor);
  if (const auto* ntk = std::get_if<NtkScaledRope>(&s)) return "ntk:" + shortest(ntk->alpha);
  return "standard";
}

RopeScheme parse_scheme(std::string_view text) {
  const auto colon = text.find(':');
  const std::string_view name = text.substr(0, colon);
  std::optional<double> arg;
  if (colon != std::string_view::npos) {
    double v = 0;
    const auto s = text.substr(colon + 1);
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) {
      throw ConfigError("bad scheme parameter in '" + std::string(text) + "'");
    }
    arg = v;
  }
  if (name == "standard" && !arg) return StandardRope{};
  if (name == "linear") return LinearInterpRope{arg.value_or(2.0)};
  if (name == "ntk") return NtkScaledRope{arg.value_or(5.0)};
  throw ConfigError("unknown rope scheme '" + std::string(text) + "'");
}

}  // namespace v2pe
