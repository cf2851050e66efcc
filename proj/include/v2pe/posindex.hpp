#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "v2pe/dyadic.hpp"
#include "v2pe/tokenstream.hpp"

namespace v2pe {

// Which modalities receive the policy's increment; the others advance by 1.
enum class ModalityTarget : std::uint8_t { kVisualOnly, kTextualOnly, kBoth, kNeither };

std::string to_string(ModalityTarget t);
ModalityTarget parse_modality_target(std::string_view s);

// {1, 1/2, 1/4, ..., 1/256}, largest first.
std::vector<Dyadic> default_delta_set();

struct UniformDeltas {};
struct FixedDelta {
  Dyadic delta{1};
};
// One independent uniform draw from delta_set per image, in image-id order.
struct VariableDeltas {
  std::vector<Dyadic> delta_set = default_delta_set();
  std::uint64_t seed = 0;
};
// Largest member of delta_set (shared by all images) whose resulting maximum
// position stays within context_window. If no member fits, the smallest member
// is halved until the window holds (down to 2^-32).
struct AdaptiveDelta {
  std::uint64_t context_window = 512;
  std::vector<Dyadic> delta_set = default_delta_set();
};

using DeltaMode = std::variant<UniformDeltas, FixedDelta, VariableDeltas, AdaptiveDelta>;

struct DeltaPolicy {
  DeltaMode mode = UniformDeltas{};
  ModalityTarget target = ModalityTarget::kVisualOnly;

  // Checks 0 < delta <= 1 for every delta and non-empty sets; throws ConfigError.
  void validate() const;
};

struct DeltaAssignment {
  std::map<std::uint32_t, Dyadic> per_image;
  Dyadic textual{1};

  friend bool operator==(const DeltaAssignment&, const DeltaAssignment&) = default;
};

// Real-valued position indices, one per token. Values are exact sums of
// dyadic increments rounded once to double (exact for the sizes used here).
struct PositionSequence {
  std::vector<double> values;

  std::size_t size() const noexcept { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
  double back() const { return values.back(); }
};

DeltaAssignment assign_deltas(const TokenStream& stream, const DeltaPolicy& policy);

// p_0 = 0 and p_i = p_{i-1} + inc(x_i), inc being the image's delta for visual
// tokens when VISUAL is targeted, the textual delta for textual tokens when
// TEXTUAL is targeted, and 1 otherwise.
PositionSequence derive_positions(const TokenStream& stream, const DeltaAssignment& assignment,
                                  ModalityTarget target);

// Convenience: assign_deltas followed by derive_positions with policy.target.
PositionSequence derive_positions(const TokenStream& stream, const DeltaPolicy& policy);

// 0, 1, ..., N-1.
PositionSequence uniform_positions(std::size_t n);

// Closed form of the last derived position, computed exactly.
Dyadic max_position(const TokenStream& stream, const DeltaAssignment& assignment,
                    ModalityTarget target);

// {"images": {"0": "1/8", ...}, "text": "1"}
nlohmann::json assignment_to_json(const DeltaAssignment& a);
DeltaAssignment assignment_from_json(const nlohmann::json& j);

std::string describe(const DeltaPolicy& policy);

}  // namespace v2pe
