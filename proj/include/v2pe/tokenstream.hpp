#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace v2pe {

enum class Modality : std::uint8_t { kTextual, kVisual };

struct Token {
  Modality modality = Modality::kTextual;
  std::optional<std::uint32_t> image_id;  // set iff modality == kVisual
  std::uint32_t symbol = 0;

  static Token text(std::uint32_t symbol) { return {Modality::kTextual, std::nullopt, symbol}; }
  static Token visual(std::uint32_t image, std::uint32_t symbol) {
    return {Modality::kVisual, image, symbol};
  }
  bool is_visual() const noexcept { return modality == Modality::kVisual; }

  friend bool operator==(const Token&, const Token&) = default;
};

struct ImageRun {
  std::uint32_t image_id = 0;
  std::size_t start = 0;
  std::size_t count = 0;

  friend bool operator==(const ImageRun&, const ImageRun&) = default;
};

struct ModalityCounts {
  std::size_t textual = 0;
  std::size_t visual = 0;

  friend bool operator==(const ModalityCounts&, const ModalityCounts&) = default;
};

// Interleaved textual / visual token sequence. Validated on construction and
// immutable afterwards:
//   - image_id is present exactly on visual tokens,
//   - every symbol is below vocab_size,
//   - each image's tokens form one contiguous run,
//   - image ids appear in order 0, 1, 2, ... without gaps.
// Violations throw StructureError.
class TokenStream {
 public:
  TokenStream(std::vector<Token> tokens, std::uint32_t vocab_size);

  std::span<const Token> tokens() const noexcept { return tokens_; }
  const Token& operator[](std::size_t i) const { return tokens_[i]; }
  std::size_t size() const noexcept { return tokens_.size(); }
  bool empty() const noexcept { return tokens_.empty(); }
  std::uint32_t vocab_size() const noexcept { return vocab_size_; }
  std::size_t image_count() const noexcept { return runs_.size(); }

  // One entry per image, in image-id order (cached at construction).
  std::span<const ImageRun> image_runs() const noexcept { return runs_; }

  friend bool operator==(const TokenStream& a, const TokenStream& b) {
    return a.vocab_size_ == b.vocab_size_ && a.tokens_ == b.tokens_;
  }

 private:
  std::vector<Token> tokens_;
  std::uint32_t vocab_size_;
  std::vector<ImageRun> runs_;
};

// Builds streams segment by segment, numbering images automatically.
class TokenStreamBuilder {
 public:
  explicit TokenStreamBuilder(std::uint32_t vocab_size) : vocab_size_(vocab_size) {}

  TokenStreamBuilder& text(std::uint32_t symbol);
  TokenStreamBuilder& text(std::span<const std::uint32_t> symbols);
  // Appends one whole image; returns its image id through `image_id` if given.
  TokenStreamBuilder& image(std::span<const std::uint32_t> symbols,
                            std::uint32_t* image_id = nullptr);

  std::size_t size() const noexcept { return tokens_.size(); }
  TokenStream build() &&;

 private:
  std::uint32_t vocab_size_;
  std::uint32_t next_image_ = 0;
  std::vector<Token> tokens_;
};

std::vector<ImageRun> image_runs(const TokenStream& stream);
ModalityCounts count_by_modality(const TokenStream& stream);

// JSONL wire form: {"tokens":[{"m":"T","id":3},{"m":"V","img":0,"id":9}],"vocab_size":64}
void to_json(nlohmann::json& j, const TokenStream& stream);
TokenStream stream_from_json(const nlohmann::json& j);
std::string to_jsonl_line(const TokenStream& stream);
TokenStream parse_jsonl_line(std::string_view line);

}  // namespace v2pe
