#include "rankprobe/bounds.hpp"
#include "rankprobe/errors.hpp"

#include <boost/multiprecision/cpp_bin_float.hpp>
#include <boost/multiprecision/eigen.hpp>

#include <cmath>
#include <limits>

namespace rankprobe {

namespace {

namespace mp = boost::multiprecision;

template <unsigned Digits>
using Float = mp::number<mp::cpp_bin_float<Digits>, mp::et_off>;

template <class S>
MatrixT<S> lift(const Matrix& m) {
  MatrixT<S> out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out(i, j) = S(m(i, j));
  return out;
}

template <class S>
MatrixT<S> row_broadcast(Eigen::Index rows, const Vector& v) {
  MatrixT<S> out(rows, v.size());
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < v.size(); ++j) out(i, j) = S(v(j));
  return out;
}

template <class S>
double log_of(const S& v) {
  if (v == 0) return -std::numeric_limits<double>::infinity();
  using std::log;
  return static_cast<double>(log(v));
}

template <unsigned Digits>
PreciseTrace run(const TokenMatrix& x, const SanParams& params) {
  using S = Float<Digits>;
  const auto& cfg = params.config;
  const S inv_sqrt_dqk = S(1) / mp::sqrt(S(cfg.d_qk));
  // Anything below this, relative to the matrix itself, is rounding noise.
  const S floor_ratio = mp::pow(S(10), -static_cast<int>(Digits) + 20);

  PreciseTrace trace;
  trace.digits = Digits;
  MatrixT<S> cur = lift<S>(x);
  auto record = [&](const MatrixT<S>& m) {
    const S res = generic::residual_norm(m);
    trace.residual_log.push_back(log_of(res));
    trace.resolved.push_back(res == 0 || res > floor_ratio * generic::norm_composite(m));
  };
  record(cur);

  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& layer = params.layers[l];
    MatrixT<S> out = row_broadcast<S>(cur.rows(), layer.b_o);
    for (const auto& head : layer.heads) {
      MatrixT<S> scores = cur * lift<S>(head.w_qk) * cur.transpose();
      const MatrixT<S> key_bias = cur * lift<S>(head.b_qk);
      for (Eigen::Index i = 0; i < scores.rows(); ++i)
        for (Eigen::Index j = 0; j < scores.cols(); ++j) scores(i, j) += key_bias(j, 0);
      scores *= inv_sqrt_dqk;
      const MatrixT<S> p = generic::softmax_rows(scores);
      out += p * (cur * lift<S>(head.w_v)) * lift<S>(head.w_o).transpose();
    }
    if (cfg.use_mlp) {
      MatrixT<S> hidden = out * lift<S>(layer.mlp->w1) + row_broadcast<S>(out.rows(), layer.mlp->b1);
      for (Eigen::Index i = 0; i < hidden.size(); ++i) {
        if (hidden.data()[i] < 0) hidden.data()[i] = S(0);
      }
      out = hidden * lift<S>(layer.mlp->w2) + row_broadcast<S>(out.rows(), layer.mlp->b2);
    }
    for (Eigen::Index i = 0; i < out.size(); ++i) {
      if (!mp::isfinite(out.data()[i])) {
        throw NumericalError("non-finite value in extended-precision forward at layer " +
                                 std::to_string(l),
                             l);
      }
    }
    cur = std::move(out);
    record(cur);
  }
  return trace;
}

bool all_resolved(const PreciseTrace& t) {
  for (bool r : t.resolved)
    if (!r) return false;
  return true;
}

}  // namespace

PreciseTrace precise_residuals(const TokenMatrix& x, const SanParams& params) {
  params.validate();
  const auto& cfg = params.config;
  if (cfg.use_skip || cfg.use_layernorm) {
    throw ValidationError("extended-precision trace covers pure SAN and SAN+MLP only");
  }
  if (x.cols() != cfg.d_model || x.rows() < 1) throw ShapeError("audit input has the wrong shape");
  if (!all_finite(x)) throw NumericalError("non-finite audit input", 0);

  PreciseTrace t = run<100>(x, params);
  if (all_resolved(t)) return t;
  t = run<400>(x, params);
  if (all_resolved(t)) return t;
  return run<1600>(x, params);
}

}  // namespace rankprobe
