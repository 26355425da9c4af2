#include "rankprobe/linalg.hpp"

#include "rankprobe/errors.hpp"

#include <algorithm>
#include <string>

namespace rankprobe {

double norm_l1(const Matrix& m) { return generic::norm_l1(m); }

double norm_linf(const Matrix& m) { return generic::norm_linf(m); }

double norm_composite(const Matrix& m) { return generic::norm_composite(m); }

bool is_row_stochastic(const Matrix& m, double tol) {
  if (m.rows() != m.cols() || m.rows() == 0) return false;
  if ((m.array() < 0.0).any() || !all_finite(m)) return false;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    if (std::abs(m.row(i).sum() - 1.0) > tol) return false;
  }
  return true;
}

StochasticMatrix StochasticMatrix::from_matrix(Matrix m, double tol) {
  if (!is_row_stochastic(m, tol)) {
    throw ValidationError("matrix is not row-stochastic (" + std::to_string(m.rows()) + "x" +
                          std::to_string(m.cols()) + ")");
  }
  return StochasticMatrix(std::move(m));
}

StochasticMatrix StochasticMatrix::operator*(const StochasticMatrix& other) const {
  if (size() != other.size()) throw ShapeError("stochastic product size mismatch");
  return StochasticMatrix(m_ * other.m_);
}

StochasticMatrix softmax_rows(const Matrix& m) {
  if (m.rows() != m.cols()) throw ShapeError("softmax_rows expects a square matrix");
  return StochasticMatrix(generic::softmax_rows(m));
}

Residual residual(const TokenMatrix& m) {
  Residual r;
  r.center = generic::column_mean(m);
  r.remainder = add_row_broadcast(m, -r.center);
  r.composite_norm = norm_composite(r.remainder);
  return r;
}

double relative_residual(const TokenMatrix& m) {
  const double denom = norm_composite(m);
  if (!(denom > 0.0)) throw DegenerateInputError("relative residual of a zero matrix");
  return residual(m).composite_norm / denom;
}

int numerical_rank(const Matrix& m, double tol) {
  if (!(tol > 0.0)) throw ValidationError("numerical_rank tolerance must be positive");
  if (m.size() == 0) return 0;
  const Vector sv = Eigen::JacobiSVD<Matrix>(m).singularValues();
  const double top = sv.size() > 0 ? sv(0) : 0.0;
  if (top == 0.0) return 0;
  return static_cast<int>((sv.array() > tol * top).count());
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

Matrix add_row_broadcast(const Matrix& m, const RowVector& row) {
  if (row.size() != m.cols()) throw ShapeError("row broadcast width mismatch");
  Matrix out = m;
  out.rowwise() += row;
  return out;
}

double row_spread(const Matrix& m) {
  if (m.rows() == 0) return 0.0;
  return (m.colwise().maxCoeff() - m.colwise().minCoeff()).maxCoeff();
}

}  // namespace rankprobe
