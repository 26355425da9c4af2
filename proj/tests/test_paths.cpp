#include "rankprobe/errors.hpp"
#include "rankprobe/paths.hpp"
#include "rankprobe/rng.hpp"
#include "support.hpp"

#include <doctest.h>


#include <set>

using namespace rankprobe;
using rankprobe::testing::random_params;
using rankprobe::testing::rel_diff;
using rankprobe::testing::small_config;

TEST_SUITE("paths") {
  TEST_CASE("enumeration counts and order") {
    CHECK(enumerate_paths(2, 3, false).size() == 9);
    CHECK(enumerate_paths(2, 3, true).size() == 16);
    const auto tiny = enumerate_paths(1, 1, true);
    REQUIRE(tiny.size() == 2);
    CHECK(tiny[0].hops == std::vector<int>{0});
    CHECK(tiny[1].hops == std::vector<int>{1});
    const auto all = enumerate_paths(3, 2, true);
    CHECK(std::is_sorted(all.begin(), all.end()));
    CHECK(std::set<PathId>(all.begin(), all.end()).size() == all.size());
    for (const auto& p : enumerate_paths(3, 2, false)) {
      for (int h : p.hops) CHECK(h >= 1);
    }
  }

  TEST_CASE("enumeration guard") {
    CHECK_NOTHROW(check_enumeration_guard(8, 4, true));
    CHECK_THROWS_AS(check_enumeration_guard(13, 4, true), GuardError);
    try {
      check_enumeration_guard(13, 4, true);
    } catch (const GuardError& e) {
      CHECK(std::string(e.what()).find("(H+1)^L") != std::string::npos);
    }
    CHECK_THROWS_AS(enumerate_paths(30, 2, false), GuardError);
  }

  TEST_CASE("census examples") {
    const auto c = path_census(3, 2);
    CHECK(c.counts[2] == 12);
    CHECK(c.counts[0] == 1);
    CHECK(c.total == 27);
    CHECK_THROWS_AS(path_census(3, 0), ValidationError);
    CHECK_THROWS_AS(path_census(0, 2), ValidationError);
  }

  TEST_CASE("census matches brute force") {
    for (int L = 1; L <= 6; ++L) {
      for (int H = 1; H <= 4; ++H) {
        std::vector<BigInt> brute(static_cast<std::size_t>(L) + 1, 0);
        for (PathEnumerator e(L, H, true); !e.done(); e.advance()) ++brute[static_cast<std::size_t>(e.current().length())];
        const auto c = path_census(L, H);
        for (int l = 0; l <= L; ++l) CHECK(c.counts[static_cast<std::size_t>(l)] == brute[static_cast<std::size_t>(l)]);
      }
    }
  }

  TEST_CASE("large census is exact") {
    const auto c = path_census(96, 96);
    BigInt sum = 0;
    for (const auto& n : c.counts) sum += n;
    CHECK(sum == boost::multiprecision::pow(BigInt(97), 96));
    BigInt binom = 1;
    for (int i = 0; i < 48; ++i) binom = binom * (96 - i) / (i + 1);
    CHECK(c.counts[48] == binom * boost::multiprecision::pow(BigInt(96), 48));
    double total = 0.0;
    for (double f : c.fractions()) total += f;
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }

  TEST_CASE("eval_path examples") {
    const auto c = small_config("san+skip", 0, 3, 2, 5, 4);
    const auto p = init_params(c);
    Rng rng(1);
    const Matrix x = rng.gaussian(4, 5);
    const auto trace = forward(x, p).trace;
    CHECK(eval_path(trace, p, PathId{{0, 0, 0}}, x) == x);

    const auto c1 = small_config("san", 1, 1, 1, 5, 4);
    const auto p1 = init_params(c1);
    const auto r1 = forward(x, p1);
    CHECK(rel_diff(eval_path(r1.trace, p1, PathId{{1}}, x), r1.output) < 1e-14);

    const auto pure = init_params(small_config("san", 0, 3, 2, 5, 4));
    const auto pure_trace = forward(x, pure).trace;
    CHECK_THROWS_AS(eval_path(pure_trace, pure, PathId{{0, 1, 1}}, x), ValidationError);
    CHECK_THROWS_AS(eval_path(pure_trace, pure, PathId{{1, 3, 1}}, x), ValidationError);
    CHECK_THROWS_AS(eval_path(pure_trace, pure, PathId{{1, 1}}, x), ValidationError);
  }

  TEST_CASE("decomposition identity without biases") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      for (const char* v : {"san", "san+skip"}) {
        Rng pick(seed);
        const int L = static_cast<int>(pick.integer(1, 3)), H = static_cast<int>(pick.integer(1, 3));
        const int n = static_cast<int>(pick.integer(2, 6)), d = static_cast<int>(pick.integer(2, 8));
        const auto p = init_params(small_config(v, seed, L, H, d, n));
        const Matrix x = pick.gaussian(n, d);
        const auto dec = decompose(x, p);
        CHECK(norm_composite(dec.aggregate_bias) <= 1e-9 * norm_composite(dec.forward_output));
      }
    }
  }

  TEST_CASE("aggregate bias is token uniform and input independent") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      for (const char* v : {"san", "san+skip"}) {
        const auto p = random_params(small_config(v, seed, 3, 2, 6, 5), 1.0);
        Rng rng(seed + 77);
        const auto a = decompose(rng.gaussian(5, 6), p);
        const auto b = decompose(rng.gaussian(5, 6), p);
        const double mag = std::max(a.forward_output.cwiseAbs().maxCoeff(), a.aggregate_bias.cwiseAbs().maxCoeff());
        CHECK(row_spread(a.aggregate_bias) <= 1e-8 * mag);
        CHECK(rel_diff(a.aggregate_bias, b.aggregate_bias) <= 1e-8);
        CHECK(a.aggregate_bias.cwiseAbs().maxCoeff() > 0.0);
      }
    }
  }

  TEST_CASE("decompose rejects mlp and layernorm") {
    const auto p = init_params(small_config("san+mlp", 0));
    CHECK_THROWS_AS(decompose(Matrix::Ones(5, 8), p), ValidationError);
  }

  TEST_CASE("path attention products are stochastic") {
    const auto p = init_params(small_config("san", 2, 3, 2, 5, 4));
    Rng rng(2);
    const auto tr = forward(rng.gaussian(4, 5), p).trace;
    for (const auto& path : enumerate_paths(3, 2, false)) {
      StochasticMatrix prod = tr.attention[0][static_cast<std::size_t>(path.hops[0] - 1)];
      for (std::size_t l = 1; l < 3; ++l) prod = tr.attention[l][static_cast<std::size_t>(path.hops[l] - 1)] * prod;
      CHECK(is_row_stochastic(prod.matrix()));
    }
  }

  TEST_CASE("sample_paths properties") {
    const auto zero = sample_paths(4, 3, 0, 1, 0);
    REQUIRE(zero.size() == 1);
    CHECK(zero[0].hops == std::vector<int>(4, 0));
    const auto full = sample_paths(5, 1, 5, 1, 0);
    REQUIRE(full.size() == 1);
    CHECK(full[0].hops == std::vector<int>(5, 1));

    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto s = sample_paths(6, 2, 3, 10, seed);
      CHECK(s.size() == 10);
      CHECK(std::set<PathId>(s.begin(), s.end()).size() == 10);
      for (const auto& p : s) CHECK(p.length() == 3);
      CHECK(sample_paths(6, 2, 3, 10, seed).front() == s.front());
    }
    const auto big = sample_paths(30, 4, 15, 50, 1);
    CHECK(std::set<PathId>(big.begin(), big.end()).size() == 50);
    for (const auto& p : big) CHECK(p.length() == 15);
    CHECK_THROWS_AS(sample_paths(3, 2, 3, 9, 0), ValidationError);
    CHECK_THROWS_AS(sample_paths(3, 2, 4, 1, 0), ValidationError);
  }

  TEST_CASE("sampling covers every path of a length") {
    std::set<PathId> seen;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      for (const auto& p : sample_paths(4, 2, 2, 3, seed)) seen.insert(p);
    }
    CHECK(seen.size() == 24);
  }

  TEST_CASE("subset_output") {
    const auto c = small_config("san", 3, 2, 2, 5, 4);
    const auto p = init_params(c);
    Rng rng(3);
    const Matrix x = rng.gaussian(4, 5);
    const auto r = forward(x, p);
    const PathId one{{2, 1}};
    CHECK(subset_output(r.trace, p, {one}, x) == eval_path(r.trace, p, one, x));

    const auto all = enumerate_paths(2, 2, false);
    CHECK(rel_diff(subset_output(r.trace, p, all, x) * 4.0, r.output) < 1e-9);

    const std::vector<PathId> a{all[0]}, b{all[1], all[2], all[3]};
    const Matrix mixed = (subset_output(r.trace, p, a, x) * 1.0 + subset_output(r.trace, p, b, x) * 3.0) / 4.0;
    CHECK(rel_diff(mixed, subset_output(r.trace, p, all, x)) < 1e-13);
    CHECK_THROWS_AS(subset_output(r.trace, p, {}, x), ValidationError);
  }

  TEST_CASE("path json round trip") {
    const auto s = sample_paths(6, 2, 3, 10, 4);
    CHECK(paths_from_json(paths_to_json(s)) == s);
    CHECK(paths_to_json({PathId{{0, 2}}}).dump() == "[[0,2]]");
  }
}
