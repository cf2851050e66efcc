#include <cmath>
#include <filesystem>
#include <functional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "v2pe/cli.hpp"
#include "v2pe/errors.hpp"
#include "v2pe/longmr.hpp"
#include "v2pe/rng.hpp"

namespace v2pe {
namespace {

TokenStream random_stream(Rng& rng, std::size_t max_segments, std::uint32_t vocab,
                          bool lead_text = false) {
  TokenStreamBuilder b(vocab);
  if (lead_text) b.text(0);
  const auto segments = 1 + rng.below(max_segments);
  std::vector<std::uint32_t> symbols;
  for (std::uint64_t s = 0; s < segments; ++s) {
    symbols.resize(1 + rng.below(24));
    for (auto& x : symbols) x = static_cast<std::uint32_t>(rng.below(vocab));
    if (rng.below(2) == 0) {
      b.text(symbols);
    } else {
      b.image(symbols);
    }
  }
  return std::move(b).build();
}

using Check = std::function<std::string()>;  // empty string = pass

std::string degeneration(std::uint64_t seed) {
  Rng rng(seed);
  ModelConfig mc;
  mc.layers = 1;
  mc.heads = 2;
  mc.head_dim = 8;
  mc.vocab_size = 32;
  mc.rope.head_dim = 8;
  const Model model(mc);
  for (int i = 0; i < 100; ++i) {
    const auto s = random_stream(rng, 6, 32);
    const auto a = derive_positions(s, DeltaPolicy{FixedDelta{Dyadic(1)}, ModalityTarget::kBoth});
    const auto u = uniform_positions(s.size());
    if (a.values != u.values) return "positions differ on stream " + std::to_string(i);
    if (i < 10 && forward<float>(model, s, a) != forward<float>(model, s, u)) {
      return "logits differ on stream " + std::to_string(i);
    }
  }
  return {};
}

std::string closed_form(std::uint64_t seed) {
  Rng rng(seed);
  for (int i = 0; i < 500; ++i) {
    const auto s = random_stream(rng, 8, 16);
    const DeltaPolicy p{VariableDeltas{default_delta_set(), rng.next_u64()}, ModalityTarget::kVisualOnly};
    const auto a = assign_deltas(s, p);
    const auto pos = derive_positions(s, a, p.target);
    if (max_position(s, a, p.target).to_double() != pos.back()) {
      return "closed form differs on stream " + std::to_string(i);
    }
  }
  return {};
}

std::string adaptive_bound(std::uint64_t seed) {
  Rng rng(seed);
  for (int i = 0; i < 500; ++i) {
    const auto s = random_stream(rng, 40, 16, true);
    const auto text = count_by_modality(s).textual;
    const std::uint64_t w = text + rng.below(200);
    const DeltaPolicy p{AdaptiveDelta{w, default_delta_set()}, ModalityTarget::kVisualOnly};
    if (derive_positions(s, p).back() > static_cast<double>(w)) {
      return "window " + std::to_string(w) + " exceeded on stream " + std::to_string(i);
    }
  }
  return {};
}

std::string rope_relative(std::uint64_t seed) {
  Rng rng(seed);
  RopeConfig cfg;
  cfg.head_dim = 16;
  for (int i = 0; i < 500; ++i) {
    std::vector<double> q(16), k(16);
    for (auto& x : q) x = rng.normal();
    for (auto& x : k) x = rng.normal();
    const double a = rng.uniform() * 500, b = rng.uniform() * 500, c = rng.uniform() * 500;
    auto dot = [&](double pa, double pb) {
      const auto rq = apply_rope<double>(q, cfg, pa);
      const auto rk = apply_rope<double>(k, cfg, pb);
      double d = 0;
      for (int j = 0; j < 16; ++j) d += rq[j] * rk[j];
      return d;
    };
    const double lhs = dot(a, b), rhs = dot(a + c, b + c);
    if (std::abs(lhs - rhs) > 1e-6 * std::max(1.0, std::abs(lhs))) {
      return "shift changed the score at trial " + std::to_string(i);
    }
  }
  RopeConfig ntk = cfg;
  ntk.scheme = NtkScaledRope{1.0};
  if (ntk.inverse_frequencies() != cfg.inverse_frequencies()) return "NTK(1) differs from standard";
  return {};
}

std::string gradients(std::uint64_t seed) {
  ModelConfig mc;
  mc.layers = 2;
  mc.heads = 2;
  mc.head_dim = 4;
  mc.vocab_size = 12;
  mc.mlp_hidden = 12;
  mc.rope.head_dim = 4;
  mc.seed = seed;
  TinyModel<double> model(mc);
  Rng rng(seed);
  const auto s = random_stream(rng, 3, 12);
  std::vector<TrainingExample> batch{{s, derive_positions(s, DeltaPolicy{FixedDelta{Dyadic::parse("1/4")}, ModalityTarget::kVisualOnly}), {}}};
  for (std::size_t t = 1; t < s.size(); ++t) batch[0].targets.push_back(t);
  const auto lg = loss_and_grads<double>(model, batch);
  auto flat = model.params().flat();
  const auto g = lg.grads.flat();
  for (int probe = 0; probe < 40; ++probe) {
    const auto i = static_cast<std::size_t>(rng.below(flat.size()));
    const double keep = flat[i], h = 1e-5;
    flat[i] = keep + h;
    const double up = loss_only<double>(model, batch);
    flat[i] = keep - h;
    const double down = loss_only<double>(model, batch);
    flat[i] = keep;
    const double fd = (up - down) / (2 * h);
    if (std::abs(fd - g[i]) > 1e-4 * std::max(1e-3, std::abs(fd) + std::abs(g[i]))) {
      std::ostringstream os;
      os << "parameter " << i << ": analytic " << g[i] << " vs numeric " << fd;
      return os.str();
    }
  }
  return {};
}

std::string checkpoint(std::uint64_t seed) {
  ModelConfig mc;
  mc.seed = seed;
  mc.rope.scheme = NtkScaledRope{5.0};
  const Model model(mc);
  const auto path = std::filesystem::temp_directory_path() /
                    ("v2pe_selftest_" + std::to_string(seed) + ".ckpt");
  save_checkpoint(model, path);
  const Model back = load_checkpoint(path);
  std::filesystem::remove(path);
  if (!(back == model)) return "parameters changed";
  if (scheme_spec(back.config().rope.scheme) != "ntk:5") return "rope scheme lost";
  return {};
}

std::string generator(std::uint64_t seed) {
  GenConfig g;
  g.length_bucket = 256;
  for (std::uint64_t i = 0; i < 50; ++i) {
    const auto a = gen_sample(g, derive_seed(seed, {i}));
    if (!(a == gen_sample(g, derive_seed(seed, {i})))) return "generation is not deterministic";
    if (a.haystack.size() != g.length_bucket) return "length differs from the bucket";
    int targets = 0;
    for (const auto& n : a.needles) targets += n.is_target ? 1 : 0;
    if (targets != 1) return "expected exactly one target";
    const auto& t = a.target();
    if (a.haystack[a.question.start + 1].symbol != t.key ||
        a.haystack[a.answer.start].symbol != t.answer) {
      return "question does not name the target";
    }
    if (!(sample_from_json(to_json(a)) == a)) return "JSON round trip changed the sample";
  }
  return {};
}

// Emits a one-hot logit on the symbol that actually follows each row.
class Oracle : public LogitModel {
 public:
  RowMatrix<float> logits_at(const TokenStream& stream, const PositionSequence&,
                             std::span<const Eigen::Index> rows) const override {
    RowMatrix<float> out = RowMatrix<float>::Zero(static_cast<Eigen::Index>(rows.size()),
                                                  stream.vocab_size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      out(static_cast<Eigen::Index>(r), stream[static_cast<std::size_t>(rows[r]) + 1].symbol) = 1;
    }
    return out;
  }
};

std::string scoring(std::uint64_t seed) {
  GenConfig g;
  g.length_bucket = 128;
  const Oracle oracle;
  for (std::uint64_t i = 0; i < 50; ++i) {
    const auto s = gen_sample(g, derive_seed(seed, {i, 7}));
    if (!score_sample(oracle, s, uniform_positions(s.haystack.size()))) return "oracle missed";
  }
  return {};
}

}  // namespace

std::vector<SelfTestResult> run_selftest(std::uint64_t seed) {
  const std::vector<std::pair<std::string, Check>> checks{
      {"unit increments reproduce uniform positions", [&] { return degeneration(seed); }},
      {"closed-form max position", [&] { return closed_form(seed); }},
      {"adaptive delta respects the window", [&] { return adaptive_bound(seed); }},
      {"rotary scores depend on relative position", [&] { return rope_relative(seed); }},
      {"analytic gradients match finite differences", [&] { return gradients(seed); }},
      {"checkpoint round trip", [&] { return checkpoint(seed); }},
      {"needle generator invariants", [&] { return generator(seed); }},
      {"oracle model scores every sample", [&] { return scoring(seed); }},
  };
  std::vector<SelfTestResult> out;
  for (const auto& [name, fn] : checks) {
    SelfTestResult r{name, false, {}};
    try {
      r.detail = fn();
      r.ok = r.detail.empty();
    } catch (const std::exception& e) {
      r.detail = e.what();
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace v2pe
