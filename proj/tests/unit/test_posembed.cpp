#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "v2pe/posembed.hpp"

using namespace v2pe;

namespace {

RopeConfig cfg_with(int d, RopeScheme s = StandardRope{}) {
  RopeConfig c;
  c.head_dim = d;
  c.scheme = s;
  return c;
}

std::vector<double> random_vec(std::mt19937_64& g, int d) {
  std::normal_distribution<double> n;
  std::vector<double> v(d);
  for (auto& x : v) x = n(g);
  return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

}  // namespace

TEST_CASE("angles") {
  CHECK(rope_angles<double>(cfg_with(4), 1.0) == std::vector<double>{1.0, 0.01});
  for (const auto& a : rope_angles<double>(cfg_with(16, NtkScaledRope{5}), 0.0)) CHECK(a == 0.0);
  CHECK(rope_angles<double>(cfg_with(16, LinearInterpRope{2}), 64.0) ==
        rope_angles<double>(cfg_with(16), 32.0));
}

TEST_CASE("ntk base") {
  const auto c = cfg_with(16, NtkScaledRope{5});
  CHECK(c.effective_base() == doctest::Approx(10000.0 * std::pow(5.0, 16.0 / 14.0)).epsilon(1e-12));
  CHECK(cfg_with(16, NtkScaledRope{1}).inverse_frequencies() == cfg_with(16).inverse_frequencies());
  CHECK(cfg_with(2, NtkScaledRope{5}).inverse_frequencies() == std::vector<double>{1.0});
}

TEST_CASE("rotation matches a long double oracle") {
  std::mt19937_64 g(2);
  std::uniform_real_distribution<double> pos(0, 4096);
  for (int trial = 0; trial < 300; ++trial) {
    const auto h = random_vec(g, 16);
    const double p = pos(g);
    const auto got = apply_rope<double>(h, cfg_with(16), p);
    const auto want = oracle::rotate(std::vector<long double>(h.begin(), h.end()), p, 10000.0L);
    for (int i = 0; i < 16; ++i) CHECK(got[i] == doctest::Approx(static_cast<double>(want[i])).epsilon(1e-9));
  }
}

TEST_CASE("identity, norm and the two-dimensional case") {
  std::mt19937_64 g(3);
  std::uniform_real_distribution<double> pos(0, 1000);
  for (int trial = 0; trial < 200; ++trial) {
    const auto h = random_vec(g, 16);
    CHECK(apply_rope<double>(h, cfg_with(16), 0.0) == h);
    const auto r = apply_rope<double>(h, cfg_with(16), pos(g));
    CHECK(norm(r) == doctest::Approx(norm(h)).epsilon(1e-5));
    std::vector<float> hf(h.begin(), h.end());
    const auto rf = apply_rope<float>(hf, cfg_with(16), pos(g));
    double nf = 0;
    for (float x : rf) nf += double(x) * x;
    CHECK(std::sqrt(nf) == doctest::Approx(norm(h)).epsilon(1e-5));
  }
  const std::vector<double> e1{1, 0};
  for (double p : {0.3, 1.0, 2.5, 7.75}) {
    const auto r = apply_rope<double>(e1, cfg_with(2), p);
    CHECK(r[0] == doctest::Approx(std::cos(p)));
    CHECK(r[1] == doctest::Approx(std::sin(p)));
  }
}

TEST_CASE("scores depend only on relative position, fractional offsets included") {
  std::mt19937_64 g(4);
  std::uniform_real_distribution<double> pos(0, 600);
  for (auto scheme : {RopeScheme{StandardRope{}}, RopeScheme{LinearInterpRope{4}}, RopeScheme{NtkScaledRope{5}}}) {
    const auto c = cfg_with(16, scheme);
    for (int trial = 0; trial < 300; ++trial) {
      const auto q = random_vec(g, 16), k = random_vec(g, 16);
      const double a = pos(g), b = pos(g), s = pos(g);
      const double lhs = dot(apply_rope<double>(q, c, a), apply_rope<double>(k, c, b));
      const double rhs = dot(apply_rope<double>(q, c, a + s), apply_rope<double>(k, c, b + s));
      CHECK(std::abs(lhs - rhs) <= 1e-4 * std::max(std::abs(lhs), 1e-2 * norm(q) * norm(k)));
    }
  }
}

TEST_CASE("errors") {
  const std::vector<double> h(6, 1.0);
  CHECK_THROWS_AS(apply_rope<double>(h, cfg_with(16), 1.0), ShapeError);
  CHECK_THROWS_AS(cfg_with(7).validate(), ConfigError);
  CHECK_THROWS_AS(cfg_with(16, LinearInterpRope{0.5}).validate(), ConfigError);
  CHECK_THROWS_AS(parse_scheme("cubic"), ConfigError);
}

TEST_CASE("scheme text round trips") {
  for (const char* s : {"standard", "linear:2", "linear:32", "ntk:5", "ntk:1.5"}) {
    CHECK(scheme_spec(parse_scheme(s)) == s);
  }
  CHECK(scheme_spec(parse_scheme("ntk")) == "ntk:5");
  CHECK(scheme_spec(parse_scheme("linear")) == "linear:2");
}

TEST_CASE("table agrees with direct rotation") {
  const auto c = cfg_with(8, NtkScaledRope{5});
  const std::vector<double> ps{0, 0.25, 3.5, 511.0};
  const auto t = make_rope_table<double>(c, ps);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto ang = rope_angles<double>(c, ps[i]);
    for (int j = 0; j < 4; ++j) {
      CHECK(t.cos[i * 4 + j] == std::cos(ang[j]));
      CHECK(t.sin[i * 4 + j] == std::sin(ang[j]));
    }
  }
}
