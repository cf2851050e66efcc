#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "v2pe/errors.hpp"
#include "v2pe/longmr.hpp"
#include "v2pe/tinyformer.hpp"

using namespace v2pe;

namespace {

ModelConfig small(std::uint64_t seed = 1) {
  ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.head_dim = 8;
  c.vocab_size = 64;
  c.rope.head_dim = 8;
  c.seed = seed;
  return c;
}

PositionSequence quarter(const TokenStream& s) {
  return derive_positions(s, DeltaPolicy{FixedDelta{Dyadic::parse("1/4")}, ModalityTarget::kVisualOnly});
}

std::vector<std::size_t> all_targets(const TokenStream& s) {
  std::vector<std::size_t> t;
  for (std::size_t i = 1; i < s.size(); ++i) t.push_back(i);
  return t;
}

}  // namespace

TEST_CASE("logit shapes") {
  const Model m(small());
  const auto one = oracle::pattern("T");
  const auto l = forward<float>(m, one, uniform_positions(1));
  CHECK(l.rows() == 1);
  CHECK(l.cols() == 64);
  const auto s = oracle::pattern("TTV0V0V0T");
  CHECK(forward<float>(m, s, quarter(s)).rows() == 6);
  CHECK_THROWS_AS(forward<float>(m, s, uniform_positions(5)), ShapeError);
}

TEST_CASE("unit deltas give bit-identical logits") {
  const Model m(small());
  std::mt19937_64 g(1);
  for (int i = 0; i < 20; ++i) {
    const auto s = oracle::random_stream(g, 8, 20);
    const auto d1 = derive_positions(s, DeltaPolicy{FixedDelta{Dyadic(1)}, ModalityTarget::kBoth});
    CHECK(forward<float>(m, s, d1) == forward<float>(m, s, uniform_positions(s.size())));
  }
}

TEST_CASE("shifting every position leaves the logits in place") {
  const Model m(small(3));
  std::mt19937_64 g(2);
  for (double c : {1.0, 0.375, 37.5, 200.0}) {
    const auto s = oracle::random_stream(g, 8, 20);
    auto p = quarter(s);
    const auto base = forward<float>(m, s, p);
    for (auto& v : p.values) v += c;
    const auto shifted = forward<float>(m, s, p);
    CHECK((base - shifted).cwiseAbs().maxCoeff() <= 1e-3f);
  }
}

TEST_CASE("selected rows agree with the full forward pass") {
  const Model m(small(4));
  std::mt19937_64 g(3);
  const auto s = oracle::random_stream(g, 12, 30);
  const auto p = quarter(s);
  const auto full = forward<float>(m, s, p);
  const std::vector<Eigen::Index> rows{0, static_cast<Eigen::Index>(s.size() / 2),
                                       static_cast<Eigen::Index>(s.size() - 1)};
  const auto part = logits_at<float>(m, s, p, rows);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    CHECK((part.row(r) - full.row(rows[r])).cwiseAbs().maxCoeff() <= 1e-5f);
  }
}

TEST_CASE("attention is causal") {
  const Model m(small(5));
  std::mt19937_64 g(4);
  const auto s = oracle::random_stream(g, 10, 20);
  const auto p = quarter(s);
  const auto before = forward<float>(m, s, p);
  const std::size_t j = s.size() / 2;
  std::vector<Token> tokens(s.tokens().begin(), s.tokens().end());
  tokens[j].symbol = (tokens[j].symbol + 1) % 64;
  const TokenStream changed(tokens, 64);
  const auto after = forward<float>(m, changed, p);
  CHECK(before.topRows(j) == after.topRows(j));
  CHECK(before.row(j) != after.row(j));
}

TEST_CASE("analytic gradients match central differences on every parameter") {
  ModelConfig c = small(6);
  c.heads = 2;
  c.head_dim = 4;
  c.rope.head_dim = 4;
  c.vocab_size = 12;
  c.mlp_hidden = 12;
  const TinyModel<double> base(c);
  std::mt19937_64 g(5);
  const auto s = oracle::random_stream(g, 4, 4, 12);
  const std::vector<TrainingExample> batch{{s, quarter(s), all_targets(s)}};
  const auto lg = loss_and_grads<double>(base, batch);
  TinyModel<double> m = base;
  auto flat = m.params().flat();
  const auto grad = lg.grads.flat();
  const double h = 1e-4;
  std::size_t bad = 0;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const double keep = flat[i];
    flat[i] = keep + h;
    const double up = loss_only<double>(m, batch);
    flat[i] = keep - h;
    const double down = loss_only<double>(m, batch);
    flat[i] = keep;
    const double fd = (up - down) / (2 * h);
    // absolute floor for gradients that are zero up to rounding
    if (std::abs(fd - grad[i]) > 1e-3 * std::max(std::abs(fd), std::abs(grad[i])) + 1e-8) {
      ++bad;
      MESSAGE("parameter " << i << ": analytic " << grad[i] << " numeric " << fd);
    }
  }
  CHECK(flat.size() > 1000);
  CHECK(bad == 0);
}

TEST_CASE("fresh model loss is close to ln(vocab)") {
  double total = 0;
  std::mt19937_64 g(6);
  const int n = 200;
  for (int i = 0; i < n; ++i) {
    const Model m(small(100 + i));
    const auto s = oracle::random_stream(g, 6, 10);
    const std::vector<TrainingExample> batch{{s, quarter(s), {s.size() - 1 > 0 ? s.size() - 1 : 1}}};
    if (s.size() < 2) continue;
    total += loss_only<float>(m, batch);
  }
  const double mean = total / n;
  CHECK(mean == doctest::Approx(std::log(64.0)).epsilon(0.10));
}

TEST_CASE("loss errors") {
  const Model m(small());
  const auto s = oracle::pattern("TTT");
  const std::vector<TrainingExample> none{{s, uniform_positions(3), {}}};
  CHECK_THROWS_AS(loss_only<float>(m, none), ConfigError);
  const std::vector<TrainingExample> zero{{s, uniform_positions(3), {0}}};
  CHECK_THROWS_AS(loss_only<float>(m, zero), RangeError);
  const std::vector<TrainingExample> far{{s, uniform_positions(3), {3}}};
  CHECK_THROWS_AS(loss_only<float>(m, far), RangeError);
}

namespace {

CurriculumConfig tiny_curriculum(std::uint64_t seed) {
  CurriculumConfig c;
  c.batch_size = 8;
  c.warmup_steps = 300;
  c.ramp_steps = 200;
  c.max_length = 64;
  c.gen.image_size = {4, 16};
  c.seed = seed;
  return c;
}

double mean_loss(const std::vector<TrainLogEntry>& log, std::size_t from, std::size_t to) {
  double s = 0;
  for (std::size_t i = from; i < to; ++i) s += log[i].loss;
  return s / static_cast<double>(to - from);
}

}  // namespace

TEST_CASE("zero learning rate and zero steps leave the model alone") {
  CurriculumSource src(tiny_curriculum(1));
  TrainConfig tc;
  tc.steps = 0;
  const DeltaPolicy pol{VariableDeltas{}, ModalityTarget::kVisualOnly};
  CHECK(train(small(9), tc, src, pol).model == Model(small(9)));

  tc.steps = 3;
  tc.adam.learning_rate = 0;
  const auto r = train(small(9), tc, src, pol);
  CHECK(r.model == Model(small(9)));
  const auto batch0 = src.batch(0);
  std::vector<TrainingExample> ex;
  for (const auto& b : batch0) ex.push_back({b.stream, uniform_positions(b.stream.size()), b.targets});
  CHECK(loss_only<float>(r.model, ex) == loss_only<float>(Model(small(9)), ex));
}

TEST_CASE("training reduces the retrieval loss and is deterministic") {
  for (std::uint64_t seed : {1, 2, 3}) {
    CurriculumSource src(tiny_curriculum(seed));
    TrainConfig tc;
    tc.steps = 500;
    tc.seed = seed;
    const DeltaPolicy pol{VariableDeltas{}, ModalityTarget::kVisualOnly};
    const auto r = train(small(seed), tc, src, pol);
    REQUIRE(r.log.size() == 500);
    const double start = r.log[0].loss, end = mean_loss(r.log, 450, 500);
    MESSAGE("seed " << seed << ": " << start << " -> " << end);
    CHECK(end < start);
    if (seed == 1) {
      CurriculumSource again(tiny_curriculum(seed));
      CHECK(train(small(seed), tc, again, pol).model == r.model);
      std::size_t images = 0;
      for (const auto& [d, n] : r.log[0].sampled_deltas) images += n;
      CHECK(images > 0);
    }
  }
}

TEST_CASE("non-finite loss raises a training error with the step") {
  Model m(small());
  m.params().flat()[0] = std::numeric_limits<float>::quiet_NaN();
  CurriculumSource src(tiny_curriculum(1));
  TrainConfig tc;
  tc.steps = 5;
  try {
    train_in_place(m, tc, src, DeltaPolicy{});
    FAIL("no error");
  } catch (const TrainingError& e) {
    CHECK(e.step() == 0);
  }
}

TEST_CASE("compression pools image runs") {
  const Model m(small());
  std::string p = "T";
  for (int i = 0; i < 8; ++i) p += "V0";
  p += "T";
  for (int i = 0; i < 7; ++i) p += "V1";
  const auto s = oracle::pattern(p);
  const auto e = embed_tokens<float>(m, s);

  const auto same = compress_visual_tokens(s, e, Dyadic(1));
  CHECK(same.stream == s);
  CHECK(same.embeddings == e);

  const auto c = compress_visual_tokens(s, e, Dyadic::parse("1/4"));
  REQUIRE(c.stream.size() == 6);
  CHECK(image_runs(c.stream) == std::vector<ImageRun>{{0, 1, 2}, {1, 4, 2}});
  CHECK(c.embeddings.row(0) == e.row(0));
  CHECK(c.embeddings.row(3) == e.row(9));
  auto mean = [&](int from, int n) {
    RowMatrix<float> r = e.middleRows(from, n).colwise().sum() / static_cast<float>(n);
    return r;
  };
  CHECK((c.embeddings.row(1) - mean(1, 4)).cwiseAbs().maxCoeff() <= 1e-6f);
  CHECK((c.embeddings.row(2) - mean(5, 4)).cwiseAbs().maxCoeff() <= 1e-6f);
  CHECK((c.embeddings.row(4) - mean(10, 4)).cwiseAbs().maxCoeff() <= 1e-6f);
  CHECK((c.embeddings.row(5) - mean(14, 3)).cwiseAbs().maxCoeff() <= 1e-6f);
  CHECK_THROWS_AS(compress_visual_tokens(s, e, Dyadic(2)), ConfigError);
}

TEST_CASE("attention dumps") {
  const Model m(small(7));
  const auto one = oracle::pattern("T");
  const auto a1 = dump_attention<float>(m, one, uniform_positions(1), 0, 1);
  CHECK(a1.rows() == 1);
  CHECK(a1.cols() == 1);
  CHECK(a1(0, 0) == doctest::Approx(1.0));

  std::mt19937_64 g(8);
  const auto s = oracle::random_stream(g, 10, 40);
  const auto p = quarter(s);
  const std::size_t tail = std::min<std::size_t>(8, s.size());
  for (int layer = 0; layer < 2; ++layer) {
    const auto heads = attention_probs<float>(m, s, p, layer, tail);
    const auto dump = dump_attention<float>(m, s, p, layer, tail);
    CHECK(dump.rows() == static_cast<Eigen::Index>(tail));
    CHECK(dump.cols() == static_cast<Eigen::Index>(s.size()));
    CHECK(dump.minCoeff() >= 0.0f);
    CHECK(dump.maxCoeff() <= 1.0f);
    RowMatrix<float> mx = heads[0];
    for (const auto& h : heads) {
      for (Eigen::Index r = 0; r < h.rows(); ++r) CHECK(h.row(r).sum() == doctest::Approx(1.0).epsilon(1e-5));
      mx = mx.cwiseMax(h);
      // causal: row r of the tail is query N - tail + r
      for (Eigen::Index r = 0; r < h.rows(); ++r) {
        const auto q = static_cast<Eigen::Index>(s.size() - tail) + r;
        if (q + 1 < h.cols()) CHECK(h.row(r).tail(h.cols() - q - 1).maxCoeff() == 0.0f);
      }
    }
    CHECK(mx == dump);
  }
  CHECK_THROWS_AS(dump_attention<float>(m, s, p, 2, 1), RangeError);
  CHECK_THROWS_AS(dump_attention<float>(m, s, p, 0, s.size() + 1), RangeError);
}

TEST_CASE("checkpoints") {
  const auto dir = std::filesystem::temp_directory_path() / "v2pe_test_ckpt";
  std::filesystem::create_directories(dir);
  ModelConfig c = small(11);
  c.rope.scheme = LinearInterpRope{4};
  const Model m(c);
  save_checkpoint(m, dir / "m.ckpt");
  const Model back = load_checkpoint(dir / "m.ckpt");
  CHECK(back == m);
  CHECK(to_json(back.config()) == to_json(m.config()));

  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), FormatError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), FormatError);
  const auto size = std::filesystem::file_size(dir / "m.ckpt");
  std::filesystem::copy_file(dir / "m.ckpt", dir / "cut.ckpt",
                             std::filesystem::copy_options::overwrite_existing);
  std::filesystem::resize_file(dir / "cut.ckpt", size - 4);
  CHECK_THROWS_AS(load_checkpoint(dir / "cut.ckpt"), FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("config validation") {
  ModelConfig c = small();
  c.rope.head_dim = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small();
  c.head_dim = 7;
  c.rope.head_dim = 7;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(model_config_from_json(to_json(small(3))).seed == 3);
}
