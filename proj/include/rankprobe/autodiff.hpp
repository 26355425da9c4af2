#pragma once

// Reverse-mode differentiation over dense matrices.
//
// A batch of B sequences with n tokens each is stacked into one (B*n) x d
// matrix; the token-mixing ops (attention scores, mixing, column layernorm)
// take the segment length n and act on each block of n rows separately.
// Every other op is row-wise and ignores segments.

#include "rankprobe/linalg.hpp"

#include <cstddef>
#include <functional>
#include <vector>

namespace rankprobe {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // A leaf whose gradient is tracked.
  Var variable(Matrix value);
  // A leaf with no gradient.
  Var constant(Matrix value);

  const Matrix& value(Var v) const;
  // Zero-sized until backward() has reached the node; use grad_or_zero.
  const Matrix& grad(Var v) const;
  Matrix grad_or_zero(Var v) const;

  // Reverse accumulation from a 1x1 node. Throws ValidationError for a
  // non-scalar loss or a node that belongs to another tape.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Used by the op implementations.
  Var push(Matrix value, std::vector<std::size_t> inputs, std::function<void(Tape&, std::size_t)> back);
  void accumulate(std::size_t id, const Matrix& g);
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  const Matrix& grad_at(std::size_t id) const { return nodes_[id].grad; }
  const Matrix& value_at(std::size_t id) const { return nodes_[id].value; }
  void check_owned(Var v) const;

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    std::vector<std::size_t> inputs;
    std::function<void(Tape&, std::size_t)> back;
  };
  std::vector<Node> nodes_;
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
// a + 1 rowᵀ, `row` is 1 x cols.
Var add_row(Var a, Var row);
Var scale(Var a, double s);
Var transpose(Var a);
Var relu(Var a);
// Row-wise exp-normalisation (any shape).
Var softmax_rows(Var a);
// out row i = table row indices[i].
Var gather_rows(Var table, const std::vector<int>& indices);
// `a` stacked `times` times vertically.
Var tile_rows(Var a, int times);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var concat_rows(const std::vector<Var>& parts);
Var sum(Var a);

// Per segment b: scale * (X_b W X_bᵀ + 1 (X_b bias)ᵀ). `bias` is d x 1.
// Output is (B*n) x n.
Var attention_scores(Var x, Var w, Var bias, Eigen::Index segment, double scale);
// Per segment b: P_b V_b, with P (B*n) x n and V (B*n) x d.
Var mix_tokens(Var p, Var v, Eigen::Index segment);
// Per segment, each column standardised over its n rows with eps inside
// the square root, then scaled by gain and shifted by bias (both 1 x d).
Var layernorm_columns(Var x, Var gain, Var bias, Eigen::Index segment, double eps);

// mean of squared entries of (pred - target)
Var mse(Var pred, const Matrix& target);
// mean over rows of -log softmax(logits)[label]
Var softmax_cross_entropy(Var logits, const std::vector<int>& labels);

}  // namespace rankprobe
