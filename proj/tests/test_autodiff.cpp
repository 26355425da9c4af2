#include "rankprobe/autodiff.hpp"
#include "rankprobe/errors.hpp"
#include "rankprobe/rng.hpp"
#include "support.hpp"

#include <doctest.h>

#include <functional>

using namespace rankprobe;

namespace {

using Build = std::function<Var(Tape&, const std::vector<Var>&)>;

// Contracts the op output with a fixed random weight so every output entry
// contributes, then compares tape gradients with central differences.
double op_gradient_error(const std::vector<Matrix>& inputs, const Build& build, std::uint64_t seed) {
  Matrix weight;
  auto loss_of = [&](const std::vector<Matrix>& xs, Tape& tape, std::vector<Var>& vars) {
    vars.clear();
    for (const auto& x : xs) vars.push_back(tape.variable(x));
    const Var out = build(tape, vars);
    if (weight.size() == 0) weight = Rng(seed).gaussian(out.rows(), out.cols());
    return sum(matmul(tape.constant(weight.transpose()), out));
  };
  Tape tape;
  std::vector<Var> vars;
  const Var loss = loss_of(inputs, tape, vars);
  Matrix trace_loss = loss.value();
  tape.backward(loss);

  double worst = 0.0;
  const double h = 1e-6;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Matrix g = tape.grad_or_zero(vars[k]);
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      auto xs = inputs;
      xs[k].data()[i] += h;
      Tape up_tape;
      std::vector<Var> v2;
      const double up = loss_of(xs, up_tape, v2).value()(0, 0);
      xs[k].data()[i] -= 2 * h;
      Tape down_tape;
      const double down = loss_of(xs, down_tape, v2).value()(0, 0);
      const double numeric = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(numeric - g.data()[i]) / std::max(1.0, std::abs(numeric)));
    }
  }
  return worst;
}

}  // namespace

TEST_SUITE("autodiff") {
  TEST_CASE("sum of a product") {
    Rng rng(1);
    const Matrix x = rng.gaussian(3, 4), w = rng.gaussian(4, 2);
    Tape t;
    const Var vx = t.constant(x), vw = t.variable(w);
    t.backward(sum(matmul(vx, vw)));
    CHECK((t.grad(vw) - x.transpose() * Matrix::Ones(3, 2)).cwiseAbs().maxCoeff() < 1e-14);
  }

  TEST_CASE("mse of a matrix with itself has zero gradient") {
    Rng rng(2);
    const Matrix x = rng.gaussian(3, 3);
    Tape t;
    const Var v = t.variable(x);
    const Var l = mse(v, x);
    t.backward(l);
    CHECK(l.value()(0, 0) == 0.0);
    CHECK(t.grad(v).isZero(0));
  }

  TEST_CASE("backward errors") {
    Tape t, other;
    const Var v = t.variable(Matrix::Ones(2, 2));
    CHECK_THROWS_AS(t.backward(v), ValidationError);
    const Var w = other.variable(Matrix::Ones(1, 1));
    CHECK_THROWS_AS(t.backward(w), ValidationError);
    CHECK_THROWS_AS(matmul(v, t.variable(Matrix::Ones(3, 1))), ValidationError);
  }

  TEST_CASE("gradients accumulate over shared inputs and reset between passes") {
    Tape t;
    const Var v = t.variable(Matrix::Constant(1, 1, 3.0));
    const Var l = sum(add(matmul(v, v), v));
    t.backward(l);
    CHECK(t.grad(v)(0, 0) == 7.0);
    t.backward(l);
    CHECK(t.grad(v)(0, 0) == 7.0);
  }

  TEST_CASE("elementwise and structural ops") {
    Rng rng(3);
    const Matrix a = rng.gaussian(4, 3), b = rng.gaussian(4, 3), r = rng.gaussian(1, 3);
    CHECK(op_gradient_error({a, b}, [](Tape&, auto& v) { return add(v[0], v[1]); }, 1) < 1e-7);
    CHECK(op_gradient_error({a, b}, [](Tape&, auto& v) { return sub(v[0], v[1]); }, 2) < 1e-7);
    CHECK(op_gradient_error({a, r}, [](Tape&, auto& v) { return add_row(v[0], v[1]); }, 3) < 1e-7);
    CHECK(op_gradient_error({a}, [](Tape&, auto& v) { return scale(v[0], -2.5); }, 4) < 1e-7);
    CHECK(op_gradient_error({a}, [](Tape&, auto& v) { return transpose(v[0]); }, 5) < 1e-7);
    CHECK(op_gradient_error({a}, [](Tape&, auto& v) { return relu(v[0]); }, 6) < 1e-7);
    CHECK(op_gradient_error({a}, [](Tape&, auto& v) { return softmax_rows(v[0]); }, 7) < 1e-7);
    CHECK(op_gradient_error({a, rng.gaussian(3, 5)}, [](Tape&, auto& v) { return matmul(v[0], v[1]); }, 8) < 1e-7);
    CHECK(op_gradient_error({a}, [](Tape&, auto& v) { return gather_rows(v[0], {3, 0, 0, 2, 1}); }, 9) < 1e-7);
    CHECK(op_gradient_error({r}, [](Tape&, auto& v) { return tile_rows(v[0], 4); }, 10) < 1e-7);
    CHECK(op_gradient_error({a}, [](Tape&, auto& v) { return slice_rows(v[0], 1, 2); }, 11) < 1e-7);
    CHECK(op_gradient_error({a, r}, [](Tape&, auto& v) { return concat_rows({v[1], v[0], v[1]}); }, 12) < 1e-7);
  }

  TEST_CASE("relu subgradient at zero is zero") {
    Tape t;
    const Var v = t.variable(Matrix::Zero(2, 2));
    t.backward(sum(relu(v)));
    CHECK(t.grad(v).isZero(0));
  }

  TEST_CASE("segment ops") {
    Rng rng(4);
    const Matrix x = rng.gaussian(6, 3);
    const Matrix w = rng.gaussian(3, 3), b = rng.gaussian(3, 1);
    CHECK(op_gradient_error({x, w, b},
                            [](Tape&, auto& v) { return attention_scores(v[0], v[1], v[2], 3, 0.7); }, 1) < 1e-7);
    const Matrix p = rng.gaussian(6, 3), val = rng.gaussian(6, 2);
    CHECK(op_gradient_error({p, val}, [](Tape&, auto& v) { return mix_tokens(v[0], v[1], 3); }, 2) < 1e-7);
    const Matrix gain = rng.gaussian(1, 3), bias = rng.gaussian(1, 3);
    CHECK(op_gradient_error({x, gain, bias},
                            [](Tape&, auto& v) { return layernorm_columns(v[0], v[1], v[2], 3, 1e-5); }, 3) < 1e-6);
  }

  TEST_CASE("segments are independent") {
    Rng rng(5);
    const Matrix x = rng.gaussian(6, 3), w = rng.gaussian(3, 3), b = rng.gaussian(3, 1);
    Tape t;
    const Var s = attention_scores(t.constant(x), t.constant(w), t.constant(b), 3, 1.0);
    Matrix first = x.topRows(3) * w * x.topRows(3).transpose();
    const RowVector xb = (x.topRows(3) * b).transpose();
    first.rowwise() += xb;
    CHECK((s.value().topRows(3) - first).cwiseAbs().maxCoeff() < 1e-14);
    Tape t2;
    Matrix x2 = x;
    x2.topRows(3).setRandom();
    const Var s2 = attention_scores(t2.constant(x2), t2.constant(w), t2.constant(b), 3, 1.0);
    CHECK(s2.value().bottomRows(3) == s.value().bottomRows(3));
  }

  TEST_CASE("softmax cross entropy gradient is (softmax - onehot) / rows") {
    Rng rng(6);
    const Matrix logits = rng.gaussian(5, 4, 2.0);
    const std::vector<int> labels{0, 3, 1, 1, 2};
    Tape t;
    const Var v = t.variable(logits);
    const Var loss = softmax_cross_entropy(v, labels);
    t.backward(loss);
    Matrix expected = generic::softmax_rows(logits);
    double total = 0.0;
    for (int i = 0; i < 5; ++i) {
      total -= std::log(expected(i, labels[static_cast<std::size_t>(i)]));
      expected(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
    }
    CHECK((t.grad(v) - expected / 5.0).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(loss.value()(0, 0) == doctest::Approx(total / 5.0).epsilon(1e-14));
    CHECK_THROWS_AS(softmax_cross_entropy(v, {0, 1}), ValidationError);
    CHECK_THROWS_AS(softmax_cross_entropy(v, {0, 1, 4, 0, 0}), ValidationError);
  }
}
