#pragma once

// Dense matrix primitives used throughout the rank-collapse analysis.
//
// Conventions: a token matrix has one token per row. `norm_l1` is the induced
// 1-norm (max absolute column sum), `norm_linf` the induced infinity-norm (max
// absolute row sum). Their geometric mean, `norm_composite`, is absolutely
// homogeneous and positive definite but does not satisfy the triangle
// inequality.
//
// The kernels in `generic::` are templated on the scalar type; the extended
// precision audit instantiates them as well.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>

namespace rankprobe {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// n x d, row = token.
using TokenMatrix = Matrix;

template <class Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

namespace generic {

template <class Derived>
typename Derived::Scalar norm_l1(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  Scalar best(0);
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    Scalar sum(0);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      using std::abs;
      sum += abs(m(i, j));
    }
    if (sum > best) best = sum;
  }
  return best;
}

template <class Derived>
typename Derived::Scalar norm_linf(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  Scalar best(0);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Scalar sum(0);
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      using std::abs;
      sum += abs(m(i, j));
    }
    if (sum > best) best = sum;
  }
  return best;
}

template <class Derived>
typename Derived::Scalar norm_composite(const Eigen::MatrixBase<Derived>& m) {
  using std::sqrt;
  return sqrt(norm_l1(m) * norm_linf(m));
}

// Row-wise exp-normalisation; each row's max is subtracted first.
template <class Derived>
MatrixT<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  MatrixT<Scalar> out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Scalar row_max = m(i, 0);
    for (Eigen::Index j = 1; j < m.cols(); ++j) {
      if (m(i, j) > row_max) row_max = m(i, j);
    }
    Scalar total(0);
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      using std::exp;
      out(i, j) = exp(Scalar(m(i, j) - row_max));
      total += out(i, j);
    }
    for (Eigen::Index j = 0; j < m.cols(); ++j) out(i, j) /= total;
  }
  return out;
}

// Column means, i.e. the center of the residual.
template <class Derived>
Eigen::Matrix<typename Derived::Scalar, 1, Eigen::Dynamic> column_mean(
    const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> mean(m.cols());
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    Scalar sum(0);
    for (Eigen::Index i = 0; i < m.rows(); ++i) sum += m(i, j);
    mean(j) = sum / Scalar(static_cast<double>(m.rows()));
  }
  return mean;
}

template <class Derived>
MatrixT<typename Derived::Scalar> centered(const Eigen::MatrixBase<Derived>& m) {
  MatrixT<typename Derived::Scalar> out = m;
  const auto mean = column_mean(m);
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) -= mean;
  return out;
}

template <class Derived>
typename Derived::Scalar residual_norm(const Eigen::MatrixBase<Derived>& m) {
  return norm_composite(centered(m));
}

}  // namespace generic

double norm_l1(const Matrix& m);
double norm_linf(const Matrix& m);
double norm_composite(const Matrix& m);

// Square, entrywise nonnegative, every row sums to one.
class StochasticMatrix {
 public:
  static constexpr double kRowSumTolerance = 1e-12;

  // Validates the invariants; throws ValidationError when they fail.
  static StochasticMatrix from_matrix(Matrix m, double tol = kRowSumTolerance);

  const Matrix& matrix() const { return m_; }
  Eigen::Index size() const { return m_.rows(); }

  StochasticMatrix operator*(const StochasticMatrix& other) const;

 private:
  friend StochasticMatrix softmax_rows(const Matrix& m);
  explicit StochasticMatrix(Matrix m) : m_(std::move(m)) {}
  Matrix m_;
};

bool is_row_stochastic(const Matrix& m, double tol = StochasticMatrix::kRowSumTolerance);

StochasticMatrix softmax_rows(const Matrix& m);

// X = 1 xᵀ + remainder, with x the column mean (the Frobenius-optimal
// rank-one token-uniform approximation).
struct Residual {
  RowVector center;
  TokenMatrix remainder;
  double composite_norm = 0.0;
};

Residual residual(const TokenMatrix& m);

// ‖res(M)‖_{1,∞} / ‖M‖_{1,∞}; DegenerateInputError when M = 0.
double relative_residual(const TokenMatrix& m);

// Number of singular values above tol * sigma_max.
int numerical_rank(const Matrix& m, double tol);

bool all_finite(const Matrix& m);

// Adds `row` to every row of `m` (m + 1 rowᵀ).
Matrix add_row_broadcast(const Matrix& m, const RowVector& row);

// Max over row pairs of the l-inf deviation, i.e. how far `m` is from
// having identical rows.
double row_spread(const Matrix& m);

}  // namespace rankprobe
