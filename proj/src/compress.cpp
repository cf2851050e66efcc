#include "v2pe/errors.hpp"
#include "v2pe/tinyformer.hpp"

namespace v2pe {

CompressedInput compress_visual_tokens(const TokenStream& stream,
                                       const RowMatrix<float>& embeddings, const Dyadic& ratio) {
  if (ratio <= Dyadic(0) || ratio > Dyadic(1)) {
    throw ConfigError("compression ratio " + ratio.to_string() + " outside (0, 1]");
  }
  if (static_cast<std::size_t>(embeddings.rows()) != stream.size()) {
    throw ShapeError("embeddings rows != stream length");
  }
  // group = ceil(1 / ratio) = ceil(2^e / numerator)
  const std::int64_t den = ratio.denominator();
  const std::int64_t num = ratio.numerator();
  const auto group = static_cast<std::size_t>((den + num - 1) / num);

  std::vector<Token> tokens;
  std::vector<Eigen::Index> first;   // source row of each output token
  std::vector<std::size_t> counts;   // rows pooled into it
  tokens.reserve(stream.size());
  const auto src = stream.tokens();
  std::size_t i = 0;
  while (i < src.size()) {
    const Token& t = src[i];
    if (!t.is_visual()) {
      tokens.push_back(t);
      first.push_back(static_cast<Eigen::Index>(i));
      counts.push_back(1);
      ++i;
      continue;
    }
    const auto& run = stream.image_runs()[*t.image_id];
    for (std::size_t g = 0; g < run.count; g += group) {
      const std::size_t size = std::min(group, run.count - g);
      tokens.push_back(src[run.start + g]);
      first.push_back(static_cast<Eigen::Index>(run.start + g));
      counts.push_back(size);
    }
    i = run.start + run.count;
  }

  RowMatrix<float> pooled(static_cast<Eigen::Index>(tokens.size()), embeddings.cols());
  for (std::size_t o = 0; o < tokens.size(); ++o) {
    const auto n = static_cast<Eigen::Index>(counts[o]);
    pooled.row(static_cast<Eigen::Index>(o)) =
        embeddings.middleRows(first[o], n).colwise().sum() / static_cast<float>(n);
  }
  return {TokenStream(std::move(tokens), stream.vocab_size()), std::move(pooled)};
}

}  // namespace v2pe
