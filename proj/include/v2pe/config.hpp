#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "v2pe/longmr.hpp"
#include "v2pe/posindex.hpp"
#include "v2pe/tinyformer.hpp"

namespace v2pe {

struct SuiteConfig {
  std::string name = "eval";
  std::vector<std::uint64_t> buckets{512, 1024, 2048};
  std::size_t per_bucket = 100;
  std::uint64_t seed = 1;
};

struct TrainSection {
  std::string name = "model";
  TrainConfig run{};                // steps, optimizer, delta-draw seed
  DeltaPolicy policy{};
  CurriculumConfig curriculum{};    // gen is taken from ExperimentConfig::data
};

struct AttentionSection {
  int layer = 1;                    // 1-based
  std::size_t tail_rows = 8;
  std::size_t sample = 0;           // index into the suite
};

struct EvalSection {
  std::vector<IndexScheme> index{IndexScheme::uniform()};
  std::vector<RopeScheme> embed{StandardRope{}};
  std::uint64_t trained_window = 512;   // W for the linear interpolation factor
  std::uint64_t adaptive_window = 512;  // W for adaptive delta selection
  std::vector<Dyadic> compression{};  // pooling ratios for the compression baseline
  AttentionSection attention{};
};

struct ExperimentConfig {
  ModelConfig model{};
  GenConfig data{};
  SuiteConfig suite{};
  TrainSection train{};
  EvalSection eval{};
  std::filesystem::path out_dir = "out";

  // Cross-field checks (vocab sizes, window, seeds); throws ConfigError.
  void validate() const;
};

// YAML text <-> config. Unknown keys are rejected; missing keys keep their
// defaults. Parsing throws ConfigError with the offending key.
ExperimentConfig parse_config(const std::string& yaml_text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string emit_config(const ExperimentConfig& cfg);

// Comma separated lists as accepted on the command line.
std::vector<IndexScheme> parse_index_list(std::string_view text, std::uint64_t window);
std::vector<RopeScheme> parse_embed_list(std::string_view text);

}  // namespace v2pe
