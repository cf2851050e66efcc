#include "v2pe/posindex.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "v2pe/errors.hpp"
#include "v2pe/rng.hpp"

namespace v2pe {
namespace {

bool targets_visual(ModalityTarget t) {
  return t == ModalityTarget::kVisualOnly || t == ModalityTarget::kBoth;
}
bool targets_textual(ModalityTarget t) {
  return t == ModalityTarget::kTextualOnly || t == ModalityTarget::kBoth;
}

void check_delta(const Dyadic& d) {
  if (d <= Dyadic(0) || d > Dyadic(1)) {
    throw ConfigError("delta " + d.to_string() + " outside (0, 1]");
  }
}

void check_set(const std::vector<Dyadic>& set) {
  if (set.empty()) throw ConfigError("delta_set is empty");
  for (const auto& d : set) check_delta(d);
}

const Dyadic& image_delta(const DeltaAssignment& a, std::uint32_t image) {
  const auto it = a.per_image.find(image);
  if (it == a.per_image.end()) {
    throw IncompleteAssignmentError("no delta assigned to image " + std::to_string(image));
  }
  return it->second;
}

}  // namespace

std::string to_string(ModalityTarget t) {
  switch (t) {
    case ModalityTarget::kVisualOnly: return "visual";
    case ModalityTarget::kTextualOnly: return "textual";
    case ModalityTarget::kBoth: return "both";
    case ModalityTarget::kNeither: return "neither";
  }
  return "?";
}

ModalityTarget parse_modality_target(std::string_view s) {
  if (s == "visual") return ModalityTarget::kVisualOnly;
  if (s == "textual") return ModalityTarget::kTextualOnly;
  if (s == "both") return ModalityTarget::kBoth;
  if (s == "neither") return ModalityTarget::kNeither;
  throw ConfigError("unknown modality target '" + std::string(s) + "'");
}

std::vector<Dyadic> default_delta_set() {
  std::vector<Dyadic> set;
  for (int k = 0; k <= 8; ++k) set.push_back(Dyadic::from_parts(1, k));
  return set;
}

void DeltaPolicy::validate() const {
  std::visit(
      [](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, FixedDelta>) {
          check_delta(m.delta);
        } else if constexpr (std::is_same_v<M, VariableDeltas>) {
          check_set(m.delta_set);
        } else if constexpr (std::is_same_v<M, AdaptiveDelta>) {
          check_set(m.delta_set);
          if (m.context_window == 0) throw ConfigError("context window must be positive");
        }
      },
      mode);
}

namespace {
// Keeps N * 2^e within int64 for the exact accumulator in derive_positions.
constexpr int kAdaptiveMaxExponent = 32;
}  // namespace

DeltaAssignment assign_deltas(const TokenStream& stream, const DeltaPolicy& policy) {
  policy.validate();
  const std::size_t images = stream.image_count();
  DeltaAssignment out;
  auto fill = [&](const Dyadic& d) {
    for (std::uint32_t i = 0; i < images; ++i) out.per_image.emplace(i, d);
  };

  std::visit(
      [&](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, UniformDeltas>) {
          fill(Dyadic(1));
        } else if constexpr (std::is_same_v<M, FixedDelta>) {
          fill(m.delta);
          if (targets_textual(policy.target)) out.textual = m.delta;
        } else if constexpr (std::is_same_v<M, VariableDeltas>) {
          Rng rng(m.seed);
          for (std::uint32_t i = 0; i < images; ++i) {
            out.per_image.emplace(i, m.delta_set[rng.below(m.delta_set.size())]);
          }
          if (targets_textual(policy.target)) {
            out.textual = m.delta_set[rng.below(m.delta_set.size())];
          }
        } else {
          std::vector<Dyadic> candidates = m.delta_set;
          std::sort(candidates.begin(), candidates.end(), std::greater<>());
          const Dyadic window(static_cast<std::int64_t>(m.context_window));
          auto fits = [&](const Dyadic& d) {
            DeltaAssignment trial;
            for (std::uint32_t i = 0; i < images; ++i) trial.per_image.emplace(i, d);
            return max_position(stream, trial, policy.target) <= window;
          };
          const auto hit = std::find_if(candidates.begin(), candidates.end(), fits);
          Dyadic chosen = hit != candidates.end() ? *hit : candidates.back();
          // Nothing in the set fits: keep halving below the smallest member.
          while (hit == candidates.end() && chosen.exponent() < kAdaptiveMaxExponent && !fits(chosen)) {
            chosen = chosen * Dyadic::from_parts(1, 1);
          }
          fill(chosen);
        }
      },
      policy.mode);
  return out;
}

PositionSequence derive_positions(const TokenStream& stream, const DeltaAssignment& assignment,
                                  ModalityTarget target) {
  const std::size_t n = stream.size();
  PositionSequence out;
  out.values.reserve(n);
  if (n == 0) return out;

  // Accumulate exactly on the common denominator 2^e, round once per element.
  std::vector<Dyadic> image_inc(stream.image_count(), Dyadic(1));
  int e = 0;
  const Dyadic text_inc = targets_textual(target) ? assignment.textual : Dyadic(1);
  e = std::max(e, text_inc.exponent());
  for (std::uint32_t i = 0; i < image_inc.size(); ++i) {
    const Dyadic& d = image_delta(assignment, i);
    if (targets_visual(target)) {
      image_inc[i] = d;
      e = std::max(e, d.exponent());
    }
  }
  auto scaled = [e](const Dyadic& d) { return d.numerator() << (e - d.exponent()); };
  const std::int64_t text_step = scaled(text_inc);
  std::vector<std::int64_t> image_step(image_inc.size());
  for (std::size_t i = 0; i < image_inc.size(); ++i) image_step[i] = scaled(image_inc[i]);

  std::int64_t acc = 0;
  out.values.push_back(0.0);
  const auto tokens = stream.tokens();
  for (std::size_t i = 1; i < n; ++i) {
    const Token& t = tokens[i];
    acc += t.is_visual() ? image_step[*t.image_id] : text_step;
    out.values.push_back(std::ldexp(static_cast<double>(acc), -e));
  }
  return out;
}

PositionSequence derive_positions(const TokenStream& stream, const DeltaPolicy& policy) {
  return derive_positions(stream, assign_deltas(stream, policy), policy.target);
}

PositionSequence uniform_positions(std::size_t n) {
  PositionSequence out;
  out.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.values[i] = static_cast<double>(i);
  return out;
}

Dyadic max_position(const TokenStream& stream, const DeltaAssignment& assignment,
                    ModalityTarget target) {
  if (stream.empty()) return Dyadic(0);
  std::int64_t text_count = 0;
  for (const Token& t : stream.tokens()) text_count += t.is_visual() ? 0 : 1;
  const bool first_textual = !stream[0].is_visual();
  text_count -= first_textual ? 1 : 0;

  Dyadic total = (targets_textual(target) ? assignment.textual : Dyadic(1)) * Dyadic(text_count);
  for (const ImageRun& run : stream.image_runs()) {
    const Dyadic& d = image_delta(assignment, run.image_id);
    auto count = static_cast<std::int64_t>(run.count) - (run.start == 0 ? 1 : 0);
    total += (targets_visual(target) ? d : Dyadic(1)) * Dyadic(count);
  }
  return total;
}

nlohmann::json assignment_to_json(const DeltaAssignment& a) {
  nlohmann::json images = nlohmann::json::object();
  for (const auto& [id, d] : a.per_image) images[std::to_string(id)] = d.to_string();
  return {{"images", std::move(images)}, {"text", a.textual.to_string()}};
}

DeltaAssignment assignment_from_json(const nlohmann::json& j) {
  try {
    DeltaAssignment a;
    for (const auto& [key, value] : j.at("images").items()) {
      a.per_image.emplace(static_cast<std::uint32_t>(std::stoul(key)),
                          Dyadic::parse(value.get<std::string>()));
    }
    a.textual = Dyadic::parse(j.at("text").get<std::string>());
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed delta assignment: ") + e.what());
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("malformed image id: ") + e.what());
  }
}

std::string describe(const DeltaPolicy& policy) {
  return std::visit(
      [](const auto& m) -> std::string {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, UniformDeltas>) return "uniform";
        else if constexpr (std::is_same_v<M, FixedDelta>) return "fixed(" + m.delta.to_string() + ")";
        else if constexpr (std::is_same_v<M, VariableDeltas>) return "variable";
        else return "adaptive(" + std::to_string(m.context_window) + ")";
      },
      policy.mode);
}

}  // namespace v2pe
