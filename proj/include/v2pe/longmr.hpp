#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "v2pe/posindex.hpp"
#include "v2pe/rng.hpp"
#include "v2pe/tinyformer.hpp"
#include "v2pe/tokenstream.hpp"

namespace v2pe {

// Symbol ranges of the synthetic retrieval vocabulary, in order:
// [bos, query, keys..., answers..., text filler..., visual filler...].
// Needle keys and answers never collide with filler symbols.
struct VocabLayout {
  std::uint32_t n_keys = 16;
  std::uint32_t n_answers = 16;
  std::uint32_t n_text_filler = 14;
  std::uint32_t n_visual_filler = 16;

  static constexpr std::uint32_t bos() { return 0; }
  static constexpr std::uint32_t query() { return 1; }
  std::uint32_t key(std::uint32_t i) const { return 2 + i; }
  std::uint32_t answer(std::uint32_t i) const { return 2 + n_keys + i; }
  std::uint32_t text_filler(std::uint32_t i) const { return 2 + n_keys + n_answers + i; }
  std::uint32_t visual_filler(std::uint32_t i) const {
    return 2 + n_keys + n_answers + n_text_filler + i;
  }
  std::uint32_t vocab_size() const { return 2 + n_keys + n_answers + n_text_filler + n_visual_filler; }
  bool is_key(std::uint32_t s) const { return s >= key(0) && s < key(0) + n_keys; }
  bool is_answer(std::uint32_t s) const { return s >= answer(0) && s < answer(0) + n_answers; }

  friend bool operator==(const VocabLayout&, const VocabLayout&) = default;
};

enum class NeedleKind : std::uint8_t { kVisual, kTextual, kMixed };
std::string to_string(NeedleKind k);
NeedleKind parse_needle_kind(std::string_view s);

struct SizeRange {
  std::uint32_t min = 1;
  std::uint32_t max = 1;
  friend bool operator==(const SizeRange&, const SizeRange&) = default;
};

struct GenConfig {
  VocabLayout vocab{};
  std::uint64_t length_bucket = 512;
  std::uint32_t n_negatives = 3;
  NeedleKind needle_kind = NeedleKind::kMixed;
  SizeRange text_segment{2, 10};
  SizeRange image_size{16, 64};

  // Throws ConfigError on empty ranges or more needles than keys/answers.
  void validate() const;
  friend bool operator==(const GenConfig&, const GenConfig&) = default;
};

struct Span {
  std::size_t start = 0;
  std::size_t length = 0;
  std::size_t end() const noexcept { return start + length; }
  friend bool operator==(const Span&, const Span&) = default;
};

// A key -> answer association planted in the haystack as two adjacent tokens
// of one segment (textual span or image).
struct Needle {
  Span span;
  bool is_target = false;
  std::uint32_t key = 0;     // symbol id
  std::uint32_t answer = 0;  // symbol id
  Modality modality = Modality::kTextual;
  friend bool operator==(const Needle&, const Needle&) = default;
};

// [bos, interleaved filler + needles..., query, target key, target answer]
struct NeedleSample {
  TokenStream haystack;
  std::vector<Needle> needles;
  Span question;  // query marker + key
  Span answer;    // the answer symbol(s)
  std::uint64_t length_bucket = 0;
  std::uint64_t seed = 0;

  const Needle& target() const;
  friend bool operator==(const NeedleSample&, const NeedleSample&) = default;
};

// Deterministic in (config, seed); integer-only generation path.
// Throws CapacityError when the bucket cannot hold the needles and question.
NeedleSample gen_sample(const GenConfig& config, std::uint64_t seed);

// per_bucket samples for each bucket (strictly increasing), bucket-major.
std::vector<NeedleSample> make_suite(const std::vector<std::uint64_t>& buckets,
                                     std::size_t per_bucket, const GenConfig& config,
                                     std::uint64_t seed);

nlohmann::json to_json(const NeedleSample& s);
NeedleSample sample_from_json(const nlohmann::json& j);
void write_suite(const std::vector<NeedleSample>& suite, std::ostream& out);
void write_suite(const std::vector<NeedleSample>& suite, const std::filesystem::path& path);
std::vector<NeedleSample> read_suite(std::istream& in);
std::vector<NeedleSample> read_suite(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Training data.

struct CurriculumConfig {
  GenConfig gen{};                   // final-stage generator (length_bucket ignored)
  std::size_t batch_size = 16;
  std::size_t warmup_steps = 1500;   // stage 1: needles only, fixed short length
  std::uint64_t warmup_length = 13;
  std::size_t ramp_steps = 1500;     // stage 2: length and image size grow linearly
  std::uint64_t max_length = 512;
  std::uint64_t seed = 0;

  friend bool operator==(const CurriculumConfig&, const CurriculumConfig&) = default;
};

// Generates retrieval sequences on the fly. Short needle-only sequences come
// first so the retrieval circuit forms cheaply; lengths then ramp up to
// max_length with lengths drawn from [max(short, hi/4), hi].
class CurriculumSource : public TrainingSource {
 public:
  explicit CurriculumSource(CurriculumConfig cfg);
  std::vector<TrainingSequence> batch(std::size_t step) override;
  // Generator configuration in effect at `step` (length_bucket included).
  GenConfig stage_config(std::size_t step, Rng& rng) const;

 private:
  CurriculumConfig cfg_;
};

// Cycles through a fixed list of samples, batch_size at a time.
class FixedSource : public TrainingSource {
 public:
  FixedSource(std::vector<NeedleSample> samples, std::size_t batch_size);
  std::vector<TrainingSequence> batch(std::size_t step) override;

 private:
  std::vector<NeedleSample> samples_;
  std::size_t batch_size_;
};

TrainingSequence to_training_sequence(const NeedleSample& s);

// ---------------------------------------------------------------------------
// Scoring.

class LogitModel {
 public:
  virtual ~LogitModel() = default;
  // Logits (rows.size() x vocab) for the given rows; row i predicts token i+1.
  virtual RowMatrix<float> logits_at(const TokenStream& stream, const PositionSequence& positions,
                                     std::span<const Eigen::Index> rows) const = 0;
};

class TinyModelScorer : public LogitModel {
 public:
  explicit TinyModelScorer(const Model& model) : model_(model), rope_(model.config().rope) {}
  TinyModelScorer(const Model& model, RopeConfig rope) : model_(model), rope_(std::move(rope)) {}
  RowMatrix<float> logits_at(const TokenStream& stream, const PositionSequence& positions,
                             std::span<const Eigen::Index> rows) const override;

 private:
  const Model& model_;
  RopeConfig rope_;
};

// One forward pass; correct iff at every answer position the argmax of the
// preceding row's logits is the ground-truth symbol. ConfigError on an empty
// answer span.
bool score_sample(const LogitModel& model, const NeedleSample& sample,
                  const PositionSequence& positions);

// Token-compression baseline: visual embedding runs are mean-pooled at
// `ratio`, positions are uniform over the reduced stream.
bool score_sample_compressed(const Model& model, const NeedleSample& sample, const Dyadic& ratio);

// ---------------------------------------------------------------------------
// Sweeps.

struct IndexScheme {
  enum class Kind : std::uint8_t { kUniform, kFixed, kAdaptive };
  Kind kind = Kind::kUniform;
  Dyadic delta{1};               // kFixed
  std::uint64_t window = 512;    // kAdaptive
  std::vector<Dyadic> delta_set = default_delta_set();  // kAdaptive

  static IndexScheme uniform() { return {}; }
  static IndexScheme fixed(Dyadic d) { return {Kind::kFixed, d, 512, default_delta_set()}; }
  static IndexScheme adaptive(std::uint64_t w) { return {Kind::kAdaptive, Dyadic(1), w, default_delta_set()}; }

  std::string label() const;  // "uniform", "adaptive" or the delta ("1/16")
  DeltaPolicy policy() const;
};

// "uniform", "adaptive" or a rational such as "1/16".
IndexScheme parse_index_scheme(std::string_view text, std::uint64_t window);

struct EvalRecord {
  std::string scheme;  // embedding scheme: standard | linear | ntk
  std::string delta;   // index scheme label
  std::uint64_t bucket = 0;
  std::size_t n = 0;
  std::size_t correct = 0;
  double accuracy() const { return n == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(n); }
};

struct SweepGrid {
  std::vector<IndexScheme> index;
  std::vector<RopeScheme> embed{StandardRope{}};
  std::uint64_t trained_window = 512;
};

// RoPE configuration used for `bucket`: linear interpolation gets factor
// ceil(bucket / trained_window); other schemes pass through.
RopeConfig rope_for_bucket(const RopeConfig& base, const RopeScheme& scheme, std::uint64_t bucket,
                           std::uint64_t trained_window);

// One record per (embed scheme, index scheme, bucket), in that nesting order.
// `workers` > 1 scores samples on that many threads.
std::vector<EvalRecord> sweep(const Model& model, const std::vector<NeedleSample>& suite,
                              const SweepGrid& grid, std::size_t workers = 1);

// Accuracy of one (index scheme, rope) combination over samples.
EvalRecord evaluate(const Model& model, const std::vector<NeedleSample>& samples,
                    const IndexScheme& index, const RopeScheme& embed,
                    std::uint64_t trained_window, std::size_t workers = 1);

void write_records_csv(const std::vector<EvalRecord>& records, std::ostream& out);
void write_records_csv(const std::vector<EvalRecord>& records, const std::filesystem::path& path);

}  // namespace v2pe
