#include "rankprobe/bounds.hpp"
#include "rankprobe/errors.hpp"
#include "rankprobe/params_io.hpp"
#include "rankprobe/paths.hpp"
#include "rankprobe/rng.hpp"
#include "rankprobe/san.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace rankprobe;
using rankprobe::testing::mat;
using rankprobe::testing::random_params;
using rankprobe::testing::rel_diff;
using rankprobe::testing::small_config;

namespace {

const char* kVariants[] = {"san", "san+skip", "san+mlp", "san+ln", "transformer", "san+skip+ln", "san+mlp+ln"};

bool same_params(const SanParams& a, const SanParams& b) {
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    for (std::size_t h = 0; h < a.layers[l].heads.size(); ++h) {
      const auto &x = a.layers[l].heads[h], &y = b.layers[l].heads[h];
      if (x.w_qk != y.w_qk || x.b_qk != y.b_qk || x.w_v != y.w_v || x.w_o != y.w_o) return false;
    }
  }
  return true;
}

}  // namespace

TEST_SUITE("san") {
  TEST_CASE("init scheme parsing") {
    CHECK(InitScheme::parse("gaussian(0.02)").value == 0.02);
    CHECK(InitScheme::parse("scaled(0.25)").kind == InitKind::scaled);
    CHECK(InitScheme::parse("factored(1)").kind == InitKind::factored);
    CHECK_THROWS_AS(InitScheme::parse("xavier(1)"), ValidationError);
    CHECK_THROWS_AS(InitScheme::parse("gaussian"), ValidationError);
    CHECK(InitScheme::parse(InitScheme::parse("gaussian(0.1)").to_string()).value == 0.1);
  }

  TEST_CASE("variant names") {
    for (const char* v : kVariants) {
      SanConfig c;
      c.apply_variant(v);
      CHECK(c.variant_name() == v);
    }
    SanConfig c;
    CHECK_THROWS_AS(c.apply_variant("san+dropout"), ValidationError);
  }

  TEST_CASE("init is deterministic per seed") {
    const auto c = small_config("transformer", 4);
    CHECK(same_params(init_params(c), init_params(c)));
    auto c2 = c;
    c2.seed = 5;
    CHECK_FALSE(same_params(init_params(c), init_params(c2)));
  }

  TEST_CASE("scaled init hits beta exactly") {
    for (double target : {1.0, 0.25, 3.5}) {
      auto c = small_config("san", 2, 3, 3);
      c.init = InitScheme{InitKind::scaled, target};
      CHECK(std::abs(beta(init_params(c)) - target) <= 1e-9);
    }
  }

  TEST_CASE("gaussian(0) gives zero weights") {
    auto c = small_config("transformer", 0);
    c.init = InitScheme::parse("gaussian(0)");
    const auto p = init_params(c);
    for (const auto& layer : p.layers) {
      for (const auto& h : layer.heads) {
        CHECK(h.w_qk.isZero(0));
        CHECK(h.w_v.isZero(0));
        CHECK(h.w_o.isZero(0));
      }
      CHECK(layer.mlp->w1.isZero(0));
    }
  }

  TEST_CASE("config validation") {
    auto c = small_config("san", 0);
    c.heads = 0;
    CHECK_THROWS_AS(init_params(c), ValidationError);
    auto p = init_params(small_config("san", 0));
    p.layers[0].heads[0].w_v = Matrix::Zero(3, 3);
    CHECK_THROWS_AS(p.validate(), ShapeError);
  }

  TEST_CASE("attention_matrix examples") {
    HeadParams h;
    h.w_qk = Matrix::Zero(2, 2);
    h.b_qk = Vector::Zero(2);
    Rng rng(1);
    const Matrix x = rng.gaussian(4, 2);
    CHECK((attention_matrix(x, h, 1).matrix().array() - 0.25).abs().maxCoeff() < 1e-15);

    h.w_qk = rng.gaussian(2, 2);
    h.b_qk = rng.gaussian(2, 1);
    const Matrix uniform = x.row(0).replicate(4, 1);
    CHECK(row_spread(attention_matrix(uniform, h, 2).matrix()) == 0.0);

    h.w_qk = Matrix::Identity(2, 2);
    h.b_qk = Vector::Zero(2);
    const Matrix expected = softmax_rows(mat({{1, 0}, {0, 1}})).matrix();
    CHECK((attention_matrix(Matrix::Identity(2, 2), h, 1).matrix() - expected).cwiseAbs().maxCoeff() < 1e-15);
  }

  TEST_CASE("attention bias enters through X b_QK") {
    Rng rng(2);
    HeadParams h{rng.gaussian(3, 3), rng.gaussian(3, 1), rng.gaussian(3, 2), rng.gaussian(3, 2)};
    const Matrix x = rng.gaussian(4, 3);
    Matrix scores = x * h.w_qk * x.transpose();
    scores.rowwise() += (x * h.b_qk).transpose();
    const Matrix expected = softmax_rows(scores / 2.0).matrix();
    CHECK((attention_matrix(x, h, 4).matrix() - expected).cwiseAbs().maxCoeff() < 1e-14);
  }

  TEST_CASE("sa_layer examples") {
    LayerParams layer;
    layer.heads.push_back({Matrix::Zero(3, 3), Vector::Zero(3), Matrix::Identity(3, 3), Matrix::Identity(3, 3)});
    layer.b_o = Vector::Zero(3);
    Rng rng(3);
    const Matrix x = rng.gaussian(5, 3);
    const Matrix out = sa_layer(x, layer, 3);
    for (Eigen::Index i = 0; i < 5; ++i) CHECK((out.row(i) - x.colwise().mean()).norm() < 1e-14);

    layer.heads[0].w_qk = rng.gaussian(3, 3);
    layer.heads[0].w_v.setZero();
    layer.b_o = rng.gaussian(3, 1);
    const Matrix bias_only = sa_layer(x, layer, 3);
    for (Eigen::Index i = 0; i < 5; ++i) CHECK(bias_only.row(i) == layer.b_o.transpose());
  }

  TEST_CASE("sa_layer equals single-layer path sum") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      auto c = small_config("san", seed, 1, 2, 6, 4);
      const auto p = init_params(c);
      Rng rng(seed);
      const Matrix x = rng.gaussian(4, 6);
      const auto d = decompose(x, p);
      Matrix sum = Matrix::Zero(4, 6);
      for (const auto& o : d.outputs) sum += o;
      CHECK(rel_diff(sa_layer(x, p.layers[0], c.d_qk), sum) < 1e-12);
    }
  }

  TEST_CASE("mlp examples") {
    MlpParams m{Matrix::Identity(3, 3), Vector::Zero(3), Matrix::Identity(3, 3), Vector::Zero(3)};
    Rng rng(4);
    const Matrix x = rng.gaussian(4, 3).cwiseAbs();
    CHECK(mlp(x, m) == x);
    m = {rng.gaussian(3, 5), rng.gaussian(5, 1), rng.gaussian(5, 3), rng.gaussian(3, 1)};
    CHECK(row_spread(mlp(x.row(1).replicate(4, 1), m)) == 0.0);

    MlpParams tiny{mat({{1}}), Vector::Constant(1, 0.5), mat({{2}}), Vector::Zero(1)};
    CHECK(mlp(mat({{-1}}), tiny)(0, 0) == 0.0);
  }

  TEST_CASE("layernorm examples") {
    Rng rng(5);
    const Vector ones = Vector::Ones(4), zeros = Vector::Zero(4);
    const Matrix uniform = rng.gaussian(1, 4).replicate(6, 1);
    CHECK(row_spread(layernorm(uniform, ones, zeros)) == 0.0);

    Matrix x = rng.gaussian(6, 4);
    const Matrix y = layernorm(x, ones, zeros);
    CHECK(y.colwise().mean().cwiseAbs().maxCoeff() < 1e-14);
    const Matrix again = layernorm(y, ones, zeros);
    CHECK((again - y).cwiseAbs().maxCoeff() < 1e-4);

    for (int t = 0; t < 20; ++t) {
      const Matrix r = rng.gaussian(6, 2) * rng.gaussian(2, 5);
      CHECK(numerical_rank(layernorm(r, Vector::Ones(5), Vector::Zero(5)), 1e-9) <= numerical_rank(r, 1e-9) + 1);
    }
  }

  TEST_CASE("layernorm of an attention layer is an attention layer") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto c = small_config("san+ln", seed, 1, 2, 5, 6);
      const auto p = random_params(c);
      const auto& layer = p.layers[0];
      Rng rng(seed);
      const Matrix x = rng.gaussian(6, 5);
      std::vector<StochasticMatrix> ps;
      const Matrix a = sa_layer(x, layer, c.d_qk, &ps);
      LayerNormStats stats;
      const Matrix lhs = layernorm(a, *layer.ln_attention, &stats);

      const Eigen::ArrayXd g = layer.ln_attention->gain.array() / stats.scale.transpose().array();
      Matrix rhs = Matrix::Zero(6, 5);
      for (std::size_t h = 0; h < layer.heads.size(); ++h) {
        const Matrix w_tilde = layer.heads[h].value_output() * g.matrix().asDiagonal();
        rhs += ps[h].matrix() * x * w_tilde;
      }
      const Vector b_tilde =
          (layer.b_o - stats.mean.transpose()).cwiseProduct(g.matrix()) + layer.ln_attention->bias;
      rhs.rowwise() += b_tilde.transpose();
      CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-10);
    }
  }

  TEST_CASE("forward trace and stochastic attention for every variant") {
    for (const char* v : kVariants) {
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto c = small_config(v, seed, 3, 2, 6, 5);
        const auto p = random_params(c);
        Rng rng(seed);
        const auto r = forward(rng.gaussian(5, 6), p);
        REQUIRE(r.trace.relative_residual.size() == 3);
        REQUIRE(r.trace.inputs.size() == 3);
        for (const auto& layer : r.trace.attention) {
          REQUIRE(layer.size() == 2);
          for (const auto& pm : layer) CHECK(is_row_stochastic(pm.matrix()));
        }
        for (double rr : r.trace.relative_residual) CHECK(std::isfinite(rr));
      }
    }
  }

  TEST_CASE("token-uniform inputs stay token-uniform") {
    for (const char* v : kVariants) {
      const auto c = small_config(v, 1, 3, 2, 6, 5);
      const auto p = random_params(c);
      Rng rng(9);
      const Matrix x = rng.gaussian(1, 6).replicate(5, 1);
      CHECK(row_spread(forward(x, p).output) < 1e-12);
    }
  }

  TEST_CASE("pure SAN is permutation equivariant") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto c = small_config("san", seed, 3, 2, 6, 5);
      const auto p = random_params(c);
      Rng rng(seed);
      const Matrix x = rng.gaussian(5, 6);
      Eigen::PermutationMatrix<Eigen::Dynamic> perm(5);
      perm.setIdentity();
      std::shuffle(perm.indices().data(), perm.indices().data() + 5, rng.engine());
      CHECK(rel_diff(forward(perm * x, p).output, perm * forward(x, p).output) < 1e-12);
    }
  }

  TEST_CASE("skip with zero values is the identity") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      auto c = small_config("san+skip", seed, 4, 3, 6, 5);
      auto p = init_params(c);
      for (auto& layer : p.layers)
        for (auto& h : layer.heads) h.w_v.setZero();
      Rng rng(seed);
      const Matrix x = rng.gaussian(5, 6);
      const auto r = forward(x, p);
      CHECK(r.output == x);
      for (double rr : r.trace.relative_residual) CHECK(std::abs(rr - relative_residual(x)) <= 1e-12);
      for (double res : r.trace.residual) CHECK(std::abs(res - residual(x).composite_norm) <= 1e-12);
    }
  }

  TEST_CASE("forward rejects bad shapes and reports non-finite layers") {
    const auto c = small_config("san", 0, 2, 1, 4, 3);
    auto p = init_params(c);
    CHECK_THROWS_AS(forward(Matrix::Ones(3, 5), p), ShapeError);
    p.layers[1].b_o(0) = INFINITY;
    try {
      forward(Matrix::Ones(3, 4), p);
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      REQUIRE(e.where().has_value());
      CHECK(*e.where() == 1);
    }
  }

  TEST_CASE("params json round trip is bit identical") {
    for (const char* v : kVariants) {
      const auto p = random_params(small_config(v, 3));
      const auto j = params_to_json(p);
      const auto back = params_from_json(json::parse(j.dump()));
      CHECK(params_to_json(back) == j);
      CHECK(same_params(p, back));
    }
    auto j = params_to_json(init_params(small_config("san", 0)));
    j["layers"][0]["heads"][0]["W_V"] = json::array({json::array({1.0})});
    CHECK_THROWS_AS(params_from_json(j), ValidationError);
  }
}
