#pragma once

#include <cmath>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "v2pe/errors.hpp"

namespace v2pe {

struct StandardRope {};
// Position interpolation: positions are divided by `factor` before rotation.
struct LinearInterpRope {
  double factor = 2.0;
};
// NTK-aware scaling: base becomes base * alpha^(d / (d - 2)).
struct NtkScaledRope {
  double alpha = 5.0;
};

using RopeScheme = std::variant<StandardRope, LinearInterpRope, NtkScaledRope>;

// Rotary embedding over adjacent coordinate pairs (h[2j], h[2j+1]).
struct RopeConfig {
  int head_dim = 16;
  double base = 10000.0;
  RopeScheme scheme = StandardRope{};

  // head_dim even and positive, base > 0, factor/alpha >= 1; throws ConfigError.
  void validate() const;

  // Position and base after the extension scheme has been applied.
  double effective_position(double p) const;
  double effective_base() const;

  // base'^(-2j/d) for j = 0 .. d/2 - 1.
  std::vector<double> inverse_frequencies() const;
};

std::string scheme_name(const RopeScheme& s);
// Name plus parameter, e.g. "linear:2", "ntk:5"; parse_scheme inverts it exactly.
std::string scheme_spec(const RopeScheme& s);
// "standard", "linear", "linear:4", "ntk", "ntk:5"
RopeScheme parse_scheme(std::string_view text);

// angle_j = p' * base'^(-2j/d).
template <typename T>
std::vector<T> rope_angles(const RopeConfig& cfg, double p) {
  cfg.validate();
  const auto inv = cfg.inverse_frequencies();
  const double pe = cfg.effective_position(p);
  std::vector<T> out(inv.size());
  for (std::size_t j = 0; j < inv.size(); ++j) out[j] = static_cast<T>(pe * inv[j]);
  return out;
}

// Rotates h in place, pair j by angle_j. Angles are evaluated in double and the
// rotation in T; T = float meets the 32-bit floor for positional math.
template <typename T>
void apply_rope_inplace(std::span<T> h, const RopeConfig& cfg, double p) {
  if (static_cast<int>(h.size()) != cfg.head_dim) {
    throw ShapeError("apply_rope: vector length " + std::to_string(h.size()) +
                     " != head_dim " + std::to_string(cfg.head_dim));
  }
  const auto angles = rope_angles<double>(cfg, p);
  for (std::size_t j = 0; j < angles.size(); ++j) {
    const T c = static_cast<T>(std::cos(angles[j]));
    const T s = static_cast<T>(std::sin(angles[j]));
    const T x0 = h[2 * j];
    const T x1 = h[2 * j + 1];
    h[2 * j] = x0 * c - x1 * s;
    h[2 * j + 1] = x0 * s + x1 * c;
  }
}

template <typename T>
std::vector<T> apply_rope(std::span<const T> h, const RopeConfig& cfg, double p) {
  std::vector<T> out(h.begin(), h.end());
  apply_rope_inplace<T>(out, cfg, p);
  return out;
}

// cos/sin tables for a whole position sequence: row i holds the d/2 cosines
// (or sines) at positions[i]. Used by the model to avoid recomputing angles
// per head.
template <typename T>
struct RopeTable {
  int half = 0;
  std::vector<T> cos;
  std::vector<T> sin;
};

template <typename T>
RopeTable<T> make_rope_table(const RopeConfig& cfg, std::span<const double> positions) {
  cfg.validate();
  const auto inv = cfg.inverse_frequencies();
  RopeTable<T> t;
  t.half = cfg.head_dim / 2;
  t.cos.resize(positions.size() * inv.size());
  t.sin.resize(positions.size() * inv.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const double pe = cfg.effective_position(positions[i]);
    for (std::size_t j = 0; j < inv.size(); ++j) {
      const double a = pe * inv[j];
      t.cos[i * inv.size() + j] = static_cast<T>(std::cos(a));
      t.sin[i * inv.size() + j] = static_cast<T>(std::sin(a));
    }
  }
  return t;
}

}  // namespace v2pe
