#include "rankprobe/autodiff.hpp"

#include "rankprobe/errors.hpp"

#include <cmath>
#include <string>

namespace rankprobe {

const Matrix& Var::value() const {
  if (!tape) throw ValidationError("detached variable");
  return tape->value(*this);
}

Var Tape::variable(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

void Tape::check_owned(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) throw ValidationError("variable is detached from this tape");
}

const Matrix& Tape::value(Var v) const {
  check_owned(v);
  return nodes_[v.id].value;
}

const Matrix& Tape::grad(Var v) const {
  check_owned(v);
  return nodes_[v.id].grad;
}

Matrix Tape::grad_or_zero(Var v) const {
  check_owned(v);
  const Node& n = nodes_[v.id];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Var Tape::push(Matrix value, std::vector<std::size_t> inputs,
               std::function<void(Tape&, std::size_t)> back) {
  Node n;
  n.value = std::move(value);
  for (auto i : inputs) n.needs_grad = n.needs_grad || nodes_[i].needs_grad;
  n.inputs = std::move(inputs);
  if (n.needs_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

void Tape::accumulate(std::size_t id, const Matrix& g) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var loss) {
  check_owned(loss);
  const Node& root = nodes_[loss.id];
  if (root.value.rows() != 1 || root.value.cols() != 1) {
    throw ValidationError("backward needs a scalar loss, got " + std::to_string(root.value.rows()) +
                          "x" + std::to_string(root.value.cols()));
  }
  for (auto& n : nodes_) n.grad.resize(0, 0);
  nodes_[loss.id].grad = Matrix::Ones(1, 1);
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.back && n.grad.size() != 0) n.back(*this, id);
  }
}

namespace {

Tape& same_tape(Var a, Var b) {
  if (!a.tape || a.tape != b.tape) throw ValidationError("variables live on different tapes");
  a.tape->check_owned(a);
  a.tape->check_owned(b);
  return *a.tape;
}

void expect(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

void check_segments(Eigen::Index rows, Eigen::Index segment, const char* op) {
  expect(segment >= 1 && rows % segment == 0,
         std::string(op) + ": rows must be a positive multiple of the segment length");
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  expect(a.cols() == b.rows(), "matmul: inner dimensions differ");
  return t.push(a.value() * b.value(), {a.id, b.id}, [a = a.id, b = b.id](Tape& t, std::size_t id) {
    const Matrix& g = t.grad_at(id);
    if (t.needs_grad(a)) t.accumulate(a, g * t.value_at(b).transpose());
    if (t.needs_grad(b)) t.accumulate(b, t.value_at(a).transpose() * g);
  });
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  expect(a.rows() == b.rows() && a.cols() == b.cols(), "add: shapes differ");
  return t.push(a.value() + b.value(), {a.id, b.id}, [a = a.id, b = b.id](Tape& t, std::size_t id) {
    t.accumulate(a, t.grad_at(id));
    t.accumulate(b, t.grad_at(id));
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  expect(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shapes differ");
  return t.push(a.value() - b.value(), {a.id, b.id}, [a = a.id, b = b.id](Tape& t, std::size_t id) {
    t.accumulate(a, t.grad_at(id));
    t.accumulate(b, -t.grad_at(id));
  });
}

Var add_row(Var a, Var row) {
  Tape& t = same_tape(a, row);
  expect(row.rows() == 1 && row.cols() == a.cols(), "add_row: expected a 1 x cols row");
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return t.push(std::move(out), {a.id, row.id}, [a = a.id, r = row.id](Tape& t, std::size_t id) {
    const Matrix& g = t.grad_at(id);
    t.accumulate(a, g);
    if (t.needs_grad(r)) t.accumulate(r, g.colwise().sum());
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  t.check_owned(a);
  return t.push(a.value() * s, {a.id}, [a = a.id, s](Tape& t, std::size_t id) {
    t.accumulate(a, t.grad_at(id) * s);
  });
}

Var transpose(Var a) {
  Tape& t = *a.tape;
  t.check_owned(a);
  return t.push(a.value().transpose(), {a.id}, [a = a.id](Tape& t, std::size_t id) {
    t.accumulate(a, t.grad_at(id).transpose());
  });
}

Var relu(Var a) {
  Tape& t = *a.tape;
  t.check_owned(a);
  return t.push(a.value().cwiseMax(0.0), {a.id}, [a = a.id](Tape& t, std::size_t id) {
    // subgradient 0 at 0
    const Matrix mask = (t.value_at(a).array() > 0.0).cast<double>();
    t.accumulate(a, t.grad_at(id).cwiseProduct(mask));
  });
}

Var softmax_rows(Var a) {
  Tape& t = *a.tape;
  t.check_owned(a);
  expect(a.cols() >= 1, "softmax_rows: no columns");
  return t.push(generic::softmax_rows(a.value()), {a.id}, [a = a.id](Tape& t, std::size_t id) {
    const Matrix& y = t.value_at(id);
    const Matrix& g = t.grad_at(id);
    const Vector dot = g.cwiseProduct(y).rowwise().sum();
    Matrix d = g;
    d.colwise() -= dot;
    t.accumulate(a, y.cwiseProduct(d));
  });
}

Var gather_rows(Var table, const std::vector<int>& indices) {
  Tape& t = *table.tape;
  t.check_owned(table);
  const Matrix& tv = table.value();
  Matrix out(static_cast<Eigen::Index>(indices.size()), tv.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    expect(indices[i] >= 0 && indices[i] < tv.rows(), "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(indices[i]);
  }
  return t.push(std::move(out), {table.id}, [tb = table.id, indices](Tape& t, std::size_t id) {
    const Matrix& g = t.grad_at(id);
    Matrix d = Matrix::Zero(t.value_at(tb).rows(), g.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) d.row(indices[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(tb, d);
  });
}

Var tile_rows(Var a, int times) {
  Tape& t = *a.tape;
  t.check_owned(a);
  expect(times >= 1, "tile_rows: times must be >= 1");
  const Matrix& v = a.value();
  Matrix out(v.rows() * times, v.cols());
  for (int k = 0; k < times; ++k) out.middleRows(k * v.rows(), v.rows()) = v;
  return t.push(std::move(out), {a.id}, [a = a.id, times](Tape& t, std::size_t id) {
    const Matrix& g = t.grad_at(id);
    const Eigen::Index r = t.value_at(a).rows();
    Matrix d = Matrix::Zero(r, g.cols());
    for (int k = 0; k < times; ++k) d += g.middleRows(k * r, r);
    t.accumulate(a, d);
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  Tape& t = *a.tape;
  t.check_owned(a);
  expect(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows: range out of bounds");
  return t.push(a.value().middleRows(start, count), {a.id}, [a = a.id, start, count](Tape& t, std::size_t id) {
    Matrix d = Matrix::Zero(t.value_at(a).rows(), t.value_at(a).cols());
    d.middleRows(start, count) = t.grad_at(id);
    t.accumulate(a, d);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  expect(!parts.empty(), "concat_rows: nothing to concatenate");
  Tape& t = *parts.front().tape;
  Eigen::Index rows = 0;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    same_tape(parts.front(), p);
    expect(p.cols() == parts.front().cols(), "concat_rows: column counts differ");
    rows += p.rows();
    ids.push_back(p.id);
  }
  Matrix out(rows, parts.front().cols());
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return t.push(std::move(out), ids, [ids](Tape& t, std::size_t id) {
    const Matrix& g = t.grad_at(id);
    Eigen::Index at = 0;
    for (auto i : ids) {
      const Eigen::Index r = t.value_at(i).rows();
      t.accumulate(i, g.middleRows(at, r));
      at += r;
    }
  });
}

Var sum(Var a) {
  Tape& t = *a.tape;
  t.check_owned(a);
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t.push(std::move(out), {a.id}, [a = a.id](Tape& t, std::size_t id) {
    const Matrix& v = t.value_at(a);
    t.accumulate(a, Matrix::Constant(v.rows(), v.cols(), t.grad_at(id)(0, 0)));
  });
}

Var attention_scores(Var x, Var w, Var bias, Eigen::Index segment, double scale) {
  Tape& t = same_tape(x, w);
  same_tape(x, bias);
  const Eigen::Index d = x.cols();
  expect(w.rows() == d && w.cols() == d, "attention_scores: W must be d x d");
  expect(bias.rows() == d && bias.cols() == 1, "attention_scores: bias must be d x 1");
  check_segments(x.rows(), segment, "attention_scores");
  const Matrix& xv = x.value();
  const Matrix& wv = w.value();
  const Matrix key_bias = xv * bias.value();  // (B*n) x 1
  Matrix out(xv.rows(), segment);
  for (Eigen::Index s0 = 0; s0 < xv.rows(); s0 += segment) {
    const auto xb = xv.middleRows(s0, segment);
    Matrix block = xb * wv * xb.transpose();
    block.rowwise() += key_bias.middleRows(s0, segment).col(0).transpose();
    out.middleRows(s0, segment) = block * scale;
  }
  return t.push(std::move(out), {x.id, w.id, bias.id},
                [x = x.id, w = w.id, b = bias.id, segment, scale](Tape& t, std::size_t id) {
                  const Matrix& g = t.grad_at(id);
                  const Matrix& xv = t.value_at(x);
                  const Matrix& wv = t.value_at(w);
                  const Matrix& bv = t.value_at(b);
                  Matrix dx = Matrix::Zero(xv.rows(), xv.cols());
                  Matrix dw = Matrix::Zero(wv.rows(), wv.cols());
                  Matrix db = Matrix::Zero(bv.rows(), 1);
                  for (Eigen::Index s0 = 0; s0 < xv.rows(); s0 += segment) {
                    const auto xb = xv.middleRows(s0, segment);
                    const Matrix gb = g.middleRows(s0, segment) * scale;
                    const Vector c = gb.colwise().sum().transpose();
                    if (t.needs_grad(x)) {
                      dx.middleRows(s0, segment) = gb * xb * wv.transpose() + gb.transpose() * xb * wv +
                                                   c * bv.transpose();
                    }
                    if (t.needs_grad(w)) dw += xb.transpose() * gb * xb;
                    if (t.needs_grad(b)) db += xb.transpose() * c;
                  }
                  t.accumulate(x, dx);
                  t.accumulate(w, dw);
                  t.accumulate(b, db);
                });
}

Var mix_tokens(Var p, Var v, Eigen::Index segment) {
  Tape& t = same_tape(p, v);
  expect(p.cols() == segment && p.rows() == v.rows(), "mix_tokens: P must be (B*n) x n matching V");
  check_segments(p.rows(), segment, "mix_tokens");
  const Matrix& pv = p.value();
  const Matrix& vv = v.value();
  Matrix out(vv.rows(), vv.cols());
  for (Eigen::Index s0 = 0; s0 < vv.rows(); s0 += segment) {
    out.middleRows(s0, segment) = pv.middleRows(s0, segment) * vv.middleRows(s0, segment);
  }
  return t.push(std::move(out), {p.id, v.id}, [p = p.id, v = v.id, segment](Tape& t, std::size_t id) {
    const Matrix& g = t.grad_at(id);
    const Matrix& pv = t.value_at(p);
    const Matrix& vv = t.value_at(v);
    Matrix dp(pv.rows(), pv.cols());
    Matrix dv(vv.rows(), vv.cols());
    for (Eigen::Index s0 = 0; s0 < vv.rows(); s0 += segment) {
      const auto gb = g.middleRows(s0, segment);
      dp.middleRows(s0, segment) = gb * vv.middleRows(s0, segment).transpose();
      dv.middleRows(s0, segment) = pv.middleRows(s0, segment).transpose() * gb;
    }
    t.accumulate(p, dp);
    t.accumulate(v, dv);
  });
}

Var layernorm_columns(Var x, Var gain, Var bias, Eigen::Index segment, double eps) {
  Tape& t = same_tape(x, gain);
  same_tape(x, bias);
  expect(gain.rows() == 1 && gain.cols() == x.cols() && bias.rows() == 1 && bias.cols() == x.cols(),
         "layernorm_columns: gain and bias must be 1 x d");
  check_segments(x.rows(), segment, "layernorm_columns");
  const Matrix& xv = x.value();
  Matrix xhat(xv.rows(), xv.cols());
  Matrix inv_scale(xv.rows() / segment, xv.cols());
  const double n = static_cast<double>(segment);
  for (Eigen::Index s0 = 0, k = 0; s0 < xv.rows(); s0 += segment, ++k) {
    const auto xb = xv.middleRows(s0, segment);
    const RowVector mean = xb.colwise().sum() / n;
    Matrix c = xb.rowwise() - mean;
    const RowVector inv = ((c.array().square().colwise().sum() / n + eps).sqrt()).inverse().matrix();
    c.array().rowwise() *= inv.array();
    xhat.middleRows(s0, segment) = c;
    inv_scale.row(k) = inv;
  }
  Matrix out = xhat;
  out.array().rowwise() *= gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  return t.push(std::move(out), {x.id, gain.id, bias.id},
                [x = x.id, gn = gain.id, b = bias.id, segment, xhat = std::move(xhat),
                 inv_scale = std::move(inv_scale)](Tape& t, std::size_t id) {
                  const Matrix& g = t.grad_at(id);
                  const RowVector gain = t.value_at(gn).row(0);
                  if (t.needs_grad(gn)) t.accumulate(gn, g.cwiseProduct(xhat).colwise().sum());
                  if (t.needs_grad(b)) t.accumulate(b, g.colwise().sum());
                  if (!t.needs_grad(x)) return;
                  const double n = static_cast<double>(segment);
                  Matrix dx(g.rows(), g.cols());
                  for (Eigen::Index s0 = 0, k = 0; s0 < g.rows(); s0 += segment, ++k) {
                    Matrix dh = g.middleRows(s0, segment);
                    dh.array().rowwise() *= gain.array();
                    const auto hb = xhat.middleRows(s0, segment);
                    const RowVector mean_dh = dh.colwise().sum() / n;
                    const RowVector mean_dh_h = dh.cwiseProduct(hb).colwise().sum() / n;
                    Matrix r = dh.rowwise() - mean_dh;
                    Matrix hm = hb;
                    hm.array().rowwise() *= mean_dh_h.array();
                    r -= hm;
                    r.array().rowwise() *= inv_scale.row(k).array();
                    dx.middleRows(s0, segment) = r;
                  }
                  t.accumulate(x, dx);
                });
}

Var mse(Var pred, const Matrix& target) {
  Tape& t = *pred.tape;
  t.check_owned(pred);
  expect(pred.rows() == target.rows() && pred.cols() == target.cols(), "mse: shapes differ");
  expect(target.size() > 0, "mse: empty input");
  Matrix out(1, 1);
  out(0, 0) = (pred.value() - target).squaredNorm() / static_cast<double>(target.size());
  return t.push(std::move(out), {pred.id}, [p = pred.id, target](Tape& t, std::size_t id) {
    const double g = t.grad_at(id)(0, 0);
    t.accumulate(p, (t.value_at(p) - target) * (2.0 * g / static_cast<double>(target.size())));
  });
}

Var softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
  Tape& t = *logits.tape;
  t.check_owned(logits);
  const Matrix& z = logits.value();
  expect(static_cast<Eigen::Index>(labels.size()) == z.rows() && z.rows() > 0,
         "softmax_cross_entropy: one label per row required");
  Matrix probs = generic::softmax_rows(z);
  double total = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    expect(y >= 0 && y < z.cols(), "softmax_cross_entropy: label out of range");
    const double m = z.row(i).maxCoeff();
    const double lse = m + std::log((z.row(i).array() - m).exp().sum());
    total += lse - z(i, y);
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(z.rows());
  return t.push(std::move(out), {logits.id},
                [l = logits.id, labels, probs = std::move(probs)](Tape& t, std::size_t id) {
                  Matrix d = probs;
                  for (std::size_t i = 0; i < labels.size(); ++i) d(static_cast<Eigen::Index>(i), labels[i]) -= 1.0;
                  t.accumulate(l, d * (t.grad_at(id)(0, 0) / static_cast<double>(labels.size())));
                });
}

}  // namespace rankprobe
