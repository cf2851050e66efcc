#include "v2pe/longmr.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>
#include <cstdio>
#include <thread>

#include <nlohmann/json.hpp>

#include "v2pe/errors.hpp"
#include "v2pe/rng.hpp"

namespace v2pe {

std::string to_string(NeedleKind k) {
  switch (k) {
    case NeedleKind::kVisual: return "visual";
    case NeedleKind::kTextual: return "textual";
    case NeedleKind::kMixed: return "mixed";
  }
  return "?";
}

NeedleKind parse_needle_kind(std::string_view s) {
  if (s == "visual") return NeedleKind::kVisual;
  if (s == "textual") return NeedleKind::kTextual;
  if (s == "mixed") return NeedleKind::kMixed;
  throw ConfigError("unknown needle kind '" + std::string(s) + "'");
}

void GenConfig::validate() const {
  const std::uint32_t needles = n_negatives + 1;
  if (needles > vocab.n_keys || needles > vocab.n_answers) {
    throw ConfigError("more needles than distinct keys/answers");
  }
  if (vocab.n_text_filler == 0 || vocab.n_visual_filler == 0) {
    throw ConfigError("filler vocabularies must be non-empty");
  }
  for (const SizeRange* r : {&text_segment, &image_size}) {
    if (r->min == 0 || r->min > r->max) throw ConfigError("invalid segment size range");
  }
}

const Needle& NeedleSample::target() const {
  for (const auto& n : needles) {
    if (n.is_target) return n;
  }
  throw StructureError("sample has no target needle");
}

namespace {

struct Segment {
  Modality modality;
  std::uint32_t length;
  int needle;  // index into the needle list, -1 for filler
};

std::uint32_t draw(Rng& rng, const SizeRange& r) {
  return static_cast<std::uint32_t>(rng.between(r.min, r.max));
}

// First k entries of a seeded permutation of [0, n).
std::vector<std::uint32_t> distinct(Rng& rng, std::uint32_t n, std::uint32_t k) {
  std::vector<std::uint32_t> all(n);
  for (std::uint32_t i = 0; i < n; ++i) all[i] = i;
  for (std::uint32_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::uint32_t>(rng.below(n - i));
    std::swap(all[i], all[j]);
  }
  all.resize(k);
  return all;
}

}  // namespace

NeedleSample gen_sample(const GenConfig& config, std::uint64_t seed) {
  config.validate();
  const VocabLayout& vocab = config.vocab;
  const std::uint32_t n_needles = config.n_negatives + 1;
  constexpr std::uint64_t kQuestionAndAnswer = 3;
  const std::uint64_t length = config.length_bucket;
  if (length < 1 + kQuestionAndAnswer + 2ULL * n_needles) {
    throw CapacityError("bucket " + std::to_string(length) + " cannot hold " +
                        std::to_string(n_needles) + " needles and the question");
  }

  Rng rng(seed);
  const auto keys = distinct(rng, vocab.n_keys, n_needles);
  const auto answers = distinct(rng, vocab.n_answers, n_needles);

  std::vector<Segment> needle_segments;
  for (std::uint32_t i = 0; i < n_needles; ++i) {
    Modality m = config.needle_kind == NeedleKind::kVisual ? Modality::kVisual : Modality::kTextual;
    if (config.needle_kind == NeedleKind::kMixed) {
      m = rng.below(2) == 1 ? Modality::kVisual : Modality::kTextual;
    }
    const auto& range = m == Modality::kVisual ? config.image_size : config.text_segment;
    needle_segments.push_back({m, std::max<std::uint32_t>(2, draw(rng, range)), int(i)});
  }

  std::int64_t budget = static_cast<std::int64_t>(length - 1 - kQuestionAndAnswer);
  for (const auto& s : needle_segments) budget -= s.length;
  while (budget < 0) {
    // Shrink the longest needle segment one token at a time (never below 2).
    auto longest = std::max_element(needle_segments.begin(), needle_segments.end(),
                                    [](const Segment& a, const Segment& b) { return a.length < b.length; });
    --longest->length;
    ++budget;
  }

  std::vector<Segment> segments;
  std::int64_t filled = 0;
  Modality next = Modality::kTextual;
  while (filled < budget) {
    const auto& range = next == Modality::kVisual ? config.image_size : config.text_segment;
    const auto len = static_cast<std::uint32_t>(
        std::min<std::int64_t>(draw(rng, range), budget - filled));
    segments.push_back({next, len, -1});
    filled += len;
    next = next == Modality::kVisual ? Modality::kTextual : Modality::kVisual;
  }
  for (const auto& s : needle_segments) {
    const auto at = static_cast<std::ptrdiff_t>(rng.below(segments.size() + 1));
    segments.insert(segments.begin() + at, s);
  }

  TokenStreamBuilder builder(vocab.vocab_size());
  builder.text(VocabLayout::bos());
  std::vector<Needle> needles(n_needles);
  std::vector<std::uint32_t> symbols;
  for (const Segment& seg : segments) {
    symbols.resize(seg.length);
    for (auto& s : symbols) {
      s = seg.modality == Modality::kVisual
              ? vocab.visual_filler(static_cast<std::uint32_t>(rng.below(vocab.n_visual_filler)))
              : vocab.text_filler(static_cast<std::uint32_t>(rng.below(vocab.n_text_filler)));
    }
    const std::size_t start = builder.size();
    if (seg.needle >= 0) {
      const auto i = static_cast<std::size_t>(seg.needle);
      const auto offset = static_cast<std::size_t>(rng.below(seg.length - 1));
      symbols[offset] = vocab.key(keys[i]);
      symbols[offset + 1] = vocab.answer(answers[i]);
      needles[i] = {{start + offset, 2}, false, vocab.key(keys[i]), vocab.answer(answers[i]),
                    seg.modality};
    }
    if (seg.modality == Modality::kVisual) {
      builder.image(symbols);
    } else {
      builder.text(symbols);
    }
  }

  const auto target = static_cast<std::size_t>(rng.below(n_needles));
  needles[target].is_target = true;
  const std::size_t question_start = builder.size();
  builder.text(VocabLayout::query()).text(needles[target].key).text(needles[target].answer);

  return NeedleSample{std::move(builder).build(), std::move(needles), {question_start, 2},
                      {question_start + 2, 1}, length, seed};
}

std::vector<NeedleSample> make_suite(const std::vector<std::uint64_t>& buckets,
                                     std::size_t per_bucket, const GenConfig& config,
                                     std::uint64_t seed) {
  for (std::size_t i = 1; i < buckets.size(); ++i) {
    if (buckets[i] <= buckets[i - 1]) throw ConfigError("buckets must be strictly increasing");
  }
  std::vector<NeedleSample> suite;
  suite.reserve(buckets.size() * per_bucket);
  for (const std::uint64_t bucket : buckets) {
    GenConfig c = config;
    c.length_bucket = bucket;
    for (std::size_t i = 0; i < per_bucket; ++i) {
      suite.push_back(gen_sample(c, derive_seed(seed, {bucket, i})));
    }
  }
  return suite;
}

nlohmann::json to_json(const NeedleSample& s) {
  nlohmann::json needles = nlohmann::json::array();
  for (const auto& n : s.needles) {
    needles.push_back({{"start", n.span.start},
                       {"length", n.span.length},
                       {"target", n.is_target},
                       {"key", n.key},
                       {"answer", n.answer},
                       {"m", n.modality == Modality::kVisual ? "V" : "T"}});
  }
  nlohmann::json haystack;
  to_json(haystack, s.haystack);
  return {{"haystack", std::move(haystack)},
          {"needles", std::move(needles)},
          {"question", {s.question.start, s.question.length}},
          {"answer", {s.answer.start, s.answer.length}},
          {"bucket", s.length_bucket},
          {"seed", s.seed}};
}

NeedleSample sample_from_json(const nlohmann::json& j) {
  try {
    std::vector<Needle> needles;
    for (const auto& n : j.at("needles")) {
      needles.push_back({{n.at("start").get<std::size_t>(), n.at("length").get<std::size_t>()},
                         n.at("target").get<bool>(),
                         n.at("key").get<std::uint32_t>(),
                         n.at("answer").get<std::uint32_t>(),
                         n.at("m").get<std::string>() == "V" ? Modality::kVisual
                                                             : Modality::kTextual});
    }
    const auto& q = j.at("question");
    const auto& a = j.at("answer");
    NeedleSample s{stream_from_json(j.at("haystack")),
                   std::move(needles),
                   {q.at(0).get<std::size_t>(), q.at(1).get<std::size_t>()},
                   {a.at(0).get<std::size_t>(), a.at(1).get<std::size_t>()},
                   j.at("bucket").get<std::uint64_t>(),
                   j.at("seed").get<std::uint64_t>()};
    if (s.answer.end() > s.haystack.size() || s.question.end() > s.haystack.size()) {
      throw FormatError("question/answer span outside the haystack");
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed sample: ") + e.what());
  }
}

void write_suite(const std::vector<NeedleSample>& suite, std::ostream& out) {
  for (const auto& s : suite) out << to_json(s).dump() << '\n';
}

void write_suite(const std::vector<NeedleSample>& suite, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_suite(suite, out);
}

std::vector<NeedleSample> read_suite(std::istream& in) {
  std::vector<NeedleSample> suite;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      suite.push_back(sample_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("line " + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      throw FormatError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return suite;
}

std::vector<NeedleSample> read_suite(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open suite " + path.string());
  return read_suite(in);
}

// ---------------------------------------------------------------------------

TrainingSequence to_training_sequence(const NeedleSample& s) {
  std::vector<std::size_t> targets;
  for (std::size_t i = s.answer.start; i < s.answer.end(); ++i) targets.push_back(i);
  return {s.haystack, std::move(targets)};
}

CurriculumSource::CurriculumSource(CurriculumConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.gen.validate();
  if (cfg_.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (cfg_.max_length < cfg_.warmup_length) throw ConfigError("max_length < warmup_length");
}

GenConfig CurriculumSource::stage_config(std::size_t step, Rng& rng) const {
  GenConfig g = cfg_.gen;
  const std::uint64_t shortest = cfg_.warmup_length;
  if (step < cfg_.warmup_steps) {
    g.length_bucket = shortest;
    g.text_segment = {2, 2};
    g.image_size = {2, 2};
    return g;
  }
  // Integer arithmetic keeps the schedule identical across platforms.
  const std::uint64_t done = std::min<std::uint64_t>(step - cfg_.warmup_steps, cfg_.ramp_steps);
  const std::uint64_t ramp = std::max<std::uint64_t>(cfg_.ramp_steps, 1);
  const std::uint64_t frac_num = cfg_.ramp_steps == 0 ? 1 : done;
  const std::uint64_t frac_den = cfg_.ramp_steps == 0 ? 1 : ramp;
  const std::uint64_t hi = shortest + (cfg_.max_length - shortest) * frac_num / frac_den;
  const std::uint64_t lo = std::max(shortest, hi / 4);
  g.length_bucket = static_cast<std::uint64_t>(rng.between(static_cast<std::int64_t>(lo),
                                                           static_cast<std::int64_t>(hi)));
  auto scaled = [&](std::uint32_t v) {
    return std::max<std::uint32_t>(2, static_cast<std::uint32_t>(v * frac_num / frac_den));
  };
  g.image_size = {scaled(cfg_.gen.image_size.min), scaled(cfg_.gen.image_size.max)};
  return g;
}

std::vector<TrainingSequence> CurriculumSource::batch(std::size_t step) {
  Rng rng(derive_seed(cfg_.seed, {step}));
  const GenConfig g = stage_config(step, rng);
  std::vector<TrainingSequence> out;
  out.reserve(cfg_.batch_size);
  for (std::size_t i = 0; i < cfg_.batch_size; ++i) {
    out.push_back(to_training_sequence(gen_sample(g, derive_seed(cfg_.seed, {step, i, 1}))));
  }
  return out;
}

FixedSource::FixedSource(std::vector<NeedleSample> samples, std::size_t batch_size)
    : samples_(std::move(samples)), batch_size_(batch_size) {
  if (samples_.empty()) throw ConfigError("training dataset is empty");
  if (batch_size_ == 0) throw ConfigError("batch_size must be positive");
}

std::vector<TrainingSequence> FixedSource::batch(std::size_t step) {
  std::vector<TrainingSequence> out;
  for (std::size_t i = 0; i < batch_size_; ++i) {
    out.push_back(to_training_sequence(samples_[(step * batch_size_ + i) % samples_.size()]));
  }
  return out;
}

// ---------------------------------------------------------------------------

RowMatrix<float> TinyModelScorer::logits_at(const TokenStream& stream,
                                            const PositionSequence& positions,
                                            std::span<const Eigen::Index> rows) const {
  return v2pe::logits_at<float>(model_, stream, positions, rows, &rope_);
}

namespace {

std::vector<Eigen::Index> answer_rows(const NeedleSample& sample) {
  if (sample.answer.length == 0) throw ConfigError("answer span is empty");
  if (sample.answer.start == 0 || sample.answer.end() > sample.haystack.size()) {
    throw RangeError("answer span outside the sample");
  }
  std::vector<Eigen::Index> rows;
  for (std::size_t i = sample.answer.start; i < sample.answer.end(); ++i) {
    rows.push_back(static_cast<Eigen::Index>(i) - 1);
  }
  return rows;
}

bool argmax_matches(const RowMatrix<float>& logits, const TokenStream& stream, std::size_t first) {
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index best = 0;
    logits.row(r).maxCoeff(&best);
    if (static_cast<std::uint32_t>(best) != stream[first + static_cast<std::size_t>(r)].symbol) {
      return false;
    }
  }
  return true;
}

}  // namespace

bool score_sample(const LogitModel& model, const NeedleSample& sample,
                  const PositionSequence& positions) {
  const auto rows = answer_rows(sample);
  const auto logits = model.logits_at(sample.haystack, positions, rows);
  return argmax_matches(logits, sample.haystack, sample.answer.start);
}

bool score_sample_compressed(const Model& model, const NeedleSample& sample, const Dyadic& ratio) {
  answer_rows(sample);
  const auto reduced = compress_visual_tokens(sample.haystack, embed_tokens(model, sample.haystack),
                                              ratio);
  // Question and answer are trailing textual tokens, so they keep their
  // distance from the end of the stream.
  const std::size_t tail = sample.haystack.size() - sample.answer.start;
  const std::size_t first = reduced.stream.size() - tail;
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < sample.answer.length; ++i) {
    rows.push_back(static_cast<Eigen::Index>(first + i) - 1);
  }
  const auto logits = logits_from_embeddings<float>(model, reduced.embeddings,
                                                    uniform_positions(reduced.stream.size()), rows);
  return argmax_matches(logits, reduced.stream, first);
}

// ---------------------------------------------------------------------------

std::string IndexScheme::label() const {
  switch (kind) {
    case Kind::kUniform: return "uniform";
    case Kind::kAdaptive: return "adaptive";
    case Kind::kFixed: return delta.to_string();
  }
  return "?";
}

DeltaPolicy IndexScheme::policy() const {
  DeltaPolicy p;
  switch (kind) {
    case Kind::kUniform: p.mode = UniformDeltas{}; break;
    case Kind::kFixed: p.mode = FixedDelta{delta}; break;
    case Kind::kAdaptive: p.mode = AdaptiveDelta{window, delta_set}; break;
  }
  return p;
}

IndexScheme parse_index_scheme(std::string_view text, std::uint64_t window) {
  if (text == "uniform") return IndexScheme::uniform();
  if (text == "adaptive") return IndexScheme::adaptive(window);
  const Dyadic d = Dyadic::parse(text);
  if (d <= Dyadic(0) || d > Dyadic(1)) throw ConfigError("delta " + d.to_string() + " outside (0, 1]");
  return IndexScheme::fixed(d);
}

RopeConfig rope_for_bucket(const RopeConfig& base, const RopeScheme& scheme, std::uint64_t bucket,
                           std::uint64_t trained_window) {
  RopeConfig r = base;
  r.scheme = scheme;
  if (std::holds_alternative<LinearInterpRope>(scheme)) {
    const std::uint64_t factor = std::max<std::uint64_t>(
        1, (bucket + trained_window - 1) / trained_window);
    r.scheme = LinearInterpRope{static_cast<double>(factor)};
  }
  return r;
}

EvalRecord evaluate(const Model& model, const std::vector<NeedleSample>& samples,
                    const IndexScheme& index, const RopeScheme& embed,
                    std::uint64_t trained_window, std::size_t workers) {
  EvalRecord rec;
  rec.scheme = scheme_name(embed);
  rec.delta = index.label();
  rec.bucket = samples.empty() ? 0 : samples.front().length_bucket;
  rec.n = samples.size();
  const DeltaPolicy policy = index.policy();

  std::vector<char> verdict(samples.size(), 0);
  auto work = [&](std::size_t begin, std::size_t step) {
    for (std::size_t i = begin; i < samples.size(); i += step) {
      const auto& s = samples[i];
      try {
        const TinyModelScorer scorer(
            model, rope_for_bucket(model.config().rope, embed, s.length_bucket, trained_window));
        verdict[i] = score_sample(scorer, s, derive_positions(s.haystack, policy)) ? 1 : 0;
      } catch (const Error& e) {
        throw Error("sample " + std::to_string(i) + " (bucket " +
                    std::to_string(s.length_bucket) + ", seed " + std::to_string(s.seed) +
                    "): " + e.what());
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, samples.size()));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          work(w, workers);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  for (char v : verdict) rec.correct += static_cast<std::size_t>(v);
  return rec;
}

std::vector<EvalRecord> sweep(const Model& model, const std::vector<NeedleSample>& suite,
                              const SweepGrid& grid, std::size_t workers) {
  if (grid.index.empty() || grid.embed.empty()) throw ConfigError("sweep grids must be non-empty");
  std::vector<std::uint64_t> buckets;
  for (const auto& s : suite) {
    if (std::find(buckets.begin(), buckets.end(), s.length_bucket) == buckets.end()) {
      buckets.push_back(s.length_bucket);
    }
  }
  std::sort(buckets.begin(), buckets.end());
  std::vector<EvalRecord> out;
  for (const auto& embed : grid.embed) {
    for (const auto& index : grid.index) {
      for (const std::uint64_t bucket : buckets) {
        std::vector<NeedleSample> subset;
        for (const auto& s : suite) {
          if (s.length_bucket == bucket) subset.push_back(s);
        }
        out.push_back(evaluate(model, subset, index, embed, grid.trained_window, workers));
      }
    }
  }
  return out;
}

void write_records_csv(const std::vector<EvalRecord>& records, std::ostream& out) {
  out << "scheme,delta,bucket,n,accuracy\n";
  for (const auto& r : records) {
    char acc[32];
    std::snprintf(acc, sizeof(acc), "%.6f", r.accuracy());
    out << r.scheme << ',' << r.delta << ',' << r.bucket << ',' << r.n << ',' << acc << '\n';
  }
}

void write_records_csv(const std::vector<EvalRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_records_csv(records, out);
}

}  // namespace v2pe
