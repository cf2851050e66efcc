#include "v2pe/tokenstream.hpp"

#include <nlohmann/json.hpp>

#include "v2pe/errors.hpp"

namespace v2pe {
namespace {

std::vector<ImageRun> validate(std::span<const Token> tokens, std::uint32_t vocab_size) {
  if (vocab_size == 0) throw StructureError("vocab_size must be positive");
  std::vector<ImageRun> runs;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const Token& t = tokens[i];
    if (t.symbol >= vocab_size) {
      throw StructureError("token " + std::to_string(i) + ": symbol " + std::to_string(t.symbol) +
                           " >= vocab_size " + std::to_string(vocab_size));
    }
    if (t.is_visual() != t.image_id.has_value()) {
      throw StructureError("token " + std::to_string(i) +
                           ": image_id must be present exactly on visual tokens");
    }
    if (!t.is_visual()) continue;

    const std::uint32_t id = *t.image_id;
    if (!runs.empty() && runs.back().image_id == id && runs.back().start + runs.back().count == i) {
      ++runs.back().count;
      continue;
    }
    if (id != runs.size()) {
      // Either a gap in numbering or an image resumed after other tokens.
      throw StructureError("token " + std::to_string(i) + ": image " + std::to_string(id) +
                           (id < runs.size() ? " is not contiguous" : " skips an image id"));
    }
    runs.push_back({id, i, 1});
  }
  return runs;
}

}  // namespace

TokenStream::TokenStream(std::vector<Token> tokens, std::uint32_t vocab_size)
    : tokens_(std::move(tokens)), vocab_size_(vocab_size), runs_(validate(tokens_, vocab_size)) {}

TokenStreamBuilder& TokenStreamBuilder::text(std::uint32_t symbol) {
  tokens_.push_back(Token::text(symbol));
  return *this;
}

TokenStreamBuilder& TokenStreamBuilder::text(std::span<const std::uint32_t> symbols) {
  for (auto s : symbols) tokens_.push_back(Token::text(s));
  return *this;
}

TokenStreamBuilder& TokenStreamBuilder::image(std::span<const std::uint32_t> symbols,
                                              std::uint32_t* image_id) {
  if (symbols.empty()) throw StructureError("an image needs at least one token");
  const std::uint32_t id = next_image_++;
  for (auto s : symbols) tokens_.push_back(Token::visual(id, s));
  if (image_id != nullptr) *image_id = id;
  return *this;
}

TokenStream TokenStreamBuilder::build() && { return TokenStream(std::move(tokens_), vocab_size_); }

std::vector<ImageRun> image_runs(const TokenStream& stream) {
  const auto runs = stream.image_runs();
  return {runs.begin(), runs.end()};
}

ModalityCounts count_by_modality(const TokenStream& stream) {
  ModalityCounts c;
  for (const Token& t : stream.tokens()) (t.is_visual() ? c.visual : c.textual)++;
  return c;
}

void to_json(nlohmann::json& j, const TokenStream& stream) {
  auto arr = nlohmann::json::array();
  for (const Token& t : stream.tokens()) {
    nlohmann::json o;
    o["m"] = t.is_visual() ? "V" : "T";
    if (t.image_id) o["img"] = *t.image_id;
    o["id"] = t.symbol;
    arr.push_back(std::move(o));
  }
  j = nlohmann::json{{"tokens", std::move(arr)}, {"vocab_size", stream.vocab_size()}};
}

TokenStream stream_from_json(const nlohmann::json& j) {
  try {
    std::vector<Token> tokens;
    const auto& arr = j.at("tokens");
    tokens.reserve(arr.size());
    for (const auto& o : arr) {
      const auto m = o.at("m").get<std::string>();
      Token t;
      if (m == "V") {
        t.modality = Modality::kVisual;
      } else if (m != "T") {
        throw FormatError("unknown modality '" + m + "'");
      }
      if (o.contains("img")) t.image_id = o.at("img").get<std::uint32_t>();
      t.symbol = o.at("id").get<std::uint32_t>();
      tokens.push_back(t);
    }
    return TokenStream(std::move(tokens), j.at("vocab_size").get<std::uint32_t>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed token stream: ") + e.what());
  }
}

std::string to_jsonl_line(const TokenStream& stream) {
  nlohmann::json j;
  to_json(j, stream);
  return j.dump();
}

TokenStream parse_jsonl_line(std::string_view line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("invalid JSON: ") + e.what());
  }
  return stream_from_json(j);
}

}  // namespace v2pe
