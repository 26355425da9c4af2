#include "rankprobe/trainer.hpp"

#include "rankprobe/errors.hpp"
#include "rankprobe/rng.hpp"
#include "rankprobe/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rankprobe {

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ValidationError("learning rate must be finite and >= 0");
  if (steps < 1) throw ValidationError("steps must be >= 1");
  if (batch_size < 0) throw ValidationError("batch size must be >= 0");
  if (!(target_loss >= 0.0)) throw ValidationError("target loss must be >= 0");
  if (!teacher_forcing) throw ValidationError("training without teacher forcing is not supported");
}

std::vector<Matrix> gradients(TaskModel& model, const Batch& batch, LossKind loss, double* loss_value) {
  Tape tape;
  const BoundModel bound = bind(tape, model);
  const Var l = model_loss(tape, model, bound, batch, loss);
  tape.backward(l);
  if (loss_value) *loss_value = l.value()(0, 0);
  std::vector<Matrix> out;
  out.reserve(bound.vars.size());
  for (const auto& v : bound.vars) out.push_back(tape.grad_or_zero(v));
  return out;
}

TrainResult train(TaskModel& model, const Batch& data, const TrainConfig& config) {
  config.validate();
  model.validate();
  const auto count = static_cast<std::size_t>(data.sequences());
  if (count == 0) throw ValidationError("training data is empty");
  const bool full = config.batch_size == 0 || static_cast<std::size_t>(config.batch_size) >= count;

  Rng rng(config.seed);
  auto views = param_views(model);
  Optimizer opt(OptimizerConfig{config.optimizer, config.lr}, views);
  TrainResult result;
  result.loss.reserve(static_cast<std::size_t>(config.steps));
  std::vector<std::size_t> pick(full ? 0 : static_cast<std::size_t>(config.batch_size));
  for (int step = 0; step < config.steps; ++step) {
    Batch sub;
    if (!full) {
      for (auto& p : pick) p = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(count) - 1));
      sub = select_sequences(data, pick);
    }
    double loss = 0.0;
    const auto grads = gradients(model, full ? data : sub, config.loss, &loss);
    if (!std::isfinite(loss)) {
      throw NumericalError("training loss is not finite at step " + std::to_string(step),
                           static_cast<std::size_t>(step));
    }
    result.loss.push_back(loss);
    if (config.target_loss > 0.0 && loss <= config.target_loss) {
      result.reached_target = true;
      break;
    }
    opt.step(views, grads);
    model.sync_factors();
  }
  return result;
}

Rollout rollout_recurrent(const TaskModel& model, const TokenMatrix& start, int steps,
                          const RolloutOptions& options) {
  if (model.san.config.depth != 1) throw ValidationError("recurrent rollout expects a single-layer model");
  if (model.token_embedding || model.readout) throw ValidationError("recurrent rollout needs a token-to-token model");
  if (steps < 0) throw ValidationError("rollout steps must be >= 0");
  Rollout r;
  r.states.push_back(start);
  for (int t = 0; t < steps; ++t) {
    try {
      r.states.push_back(forward(r.states.back(), model.san).output);
    } catch (const NumericalError& e) {
      if (!options.stop_on_nonfinite) {
        throw NumericalError("rollout state is not finite at step " + std::to_string(t + 1),
                             static_cast<std::size_t>(t + 1));
      }
      r.diverged_at = t + 1;
      break;
    }
  }
  return r;
}

namespace {

using Real = long double;
using RMatrix = MatrixT<Real>;

// Column-wise standardisation of each block of `segment` rows.
RMatrix reference_layernorm(const RMatrix& x, const RMatrix& gain, const RMatrix& bias, Eigen::Index segment) {
  RMatrix out(x.rows(), x.cols());
  const Real n = static_cast<Real>(segment);
  for (Eigen::Index s0 = 0; s0 < x.rows(); s0 += segment) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      Real mean = 0;
      for (Eigen::Index i = 0; i < segment; ++i) mean += x(s0 + i, j);
      mean /= n;
      Real var = 0;
      for (Eigen::Index i = 0; i < segment; ++i) var += (x(s0 + i, j) - mean) * (x(s0 + i, j) - mean);
      const Real sd = std::sqrt(var / n + static_cast<Real>(kLayerNormEpsilon));
      for (Eigen::Index i = 0; i < segment; ++i) {
        out(s0 + i, j) = (x(s0 + i, j) - mean) / sd * gain(0, j) + bias(0, j);
      }
    }
  }
  return out;
}

RMatrix add_row(RMatrix m, const RMatrix& row) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) m.row(i) += row.row(0);
  return m;
}

// Same layout walk as model_forward, over lifted copies of the parameters.
Real reference_loss(const TaskModel& model, const std::vector<RMatrix>& p, const Batch& batch, LossKind loss) {
  const auto& cfg = model.san.config;
  const Eigen::Index n = batch.segment;
  const Eigen::Index count = batch.sequences();
  const bool factored = !model.qk_factors.empty();
  std::size_t k = 0;
  auto next = [&]() -> const RMatrix& { return p.at(k++); };

  struct Head {
    RMatrix w_qk, b_qk, w_v, w_o;
  };
  struct Layer {
    std::vector<Head> heads;
    RMatrix b_o, w1, b1, w2, b2, lag, lab, lmg, lmb;
  };
  std::vector<Layer> layers(model.san.layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& src = model.san.layers[l];
    for (std::size_t h = 0; h < src.heads.size(); ++h) {
      Head hd;
      if (factored) {
        const RMatrix& wq = next();
        const RMatrix& wk = next();
        hd.w_qk = wq * wk.transpose();
      } else {
        hd.w_qk = next();
      }
      hd.b_qk = next();
      hd.w_v = next();
      hd.w_o = next();
      layers[l].heads.push_back(std::move(hd));
    }
    layers[l].b_o = next();
    if (src.mlp) {
      layers[l].w1 = next();
      layers[l].b1 = next();
      layers[l].w2 = next();
      layers[l].b2 = next();
    }
    if (src.ln_attention) {
      layers[l].lag = next();
      layers[l].lab = next();
    }
    if (src.ln_mlp) {
      layers[l].lmg = next();
      layers[l].lmb = next();
    }
  }

  RMatrix cur;
  if (model.token_embedding) {
    const RMatrix& emb = next();
    cur.resize(static_cast<Eigen::Index>(batch.tokens.size()), emb.cols());
    for (std::size_t i = 0; i < batch.tokens.size(); ++i) cur.row(static_cast<Eigen::Index>(i)) = emb.row(batch.tokens[i]);
    if (model.position_embedding) {
      const RMatrix& pos = next();
      for (Eigen::Index b = 0; b < count; ++b) cur.middleRows(b * n, n) += pos;
    }
  } else {
    cur = batch.inputs.cast<Real>();
  }

  const Real inv_sqrt = 1 / std::sqrt(static_cast<Real>(cfg.d_qk));
  for (const auto& layer : layers) {
    RMatrix attn = RMatrix::Zero(cur.rows(), layer.b_o.cols());
    for (Eigen::Index s0 = 0; s0 < cur.rows(); s0 += n) {
      const RMatrix xb = cur.middleRows(s0, n);
      for (const auto& hd : layer.heads) {
        RMatrix scores = xb * hd.w_qk * xb.transpose();
        const RMatrix kb = xb * hd.b_qk;
        for (Eigen::Index i = 0; i < n; ++i)
          for (Eigen::Index j = 0; j < n; ++j) scores(i, j) = (scores(i, j) + kb(j, 0)) * inv_sqrt;
        attn.middleRows(s0, n) += generic::softmax_rows(scores) * xb * hd.w_v * hd.w_o.transpose();
      }
    }
    RMatrix a = add_row(attn, layer.b_o);
    if (cfg.use_skip) a += cur;
    if (cfg.use_layernorm) a = reference_layernorm(a, layer.lag, layer.lab, n);
    if (cfg.use_mlp) {
      RMatrix hidden = add_row(a * layer.w1, layer.b1).cwiseMax(Real(0));
      RMatrix b = add_row(hidden * layer.w2, layer.b2);
      if (cfg.use_skip) b += a;
      if (cfg.use_layernorm) b = reference_layernorm(b, layer.lmg, layer.lmb, n);
      cur = std::move(b);
    } else {
      cur = std::move(a);
    }
  }
  if (model.readout) {
    const RMatrix& w = next();
    const RMatrix& bias = next();
    cur = add_row(cur * w, bias);
  }

  Real total = 0;
  if (loss == LossKind::mse) {
    const RMatrix diff = cur - batch.targets.cast<Real>();
    for (Eigen::Index i = 0; i < diff.size(); ++i) total += diff.data()[i] * diff.data()[i];
    return total / static_cast<Real>(diff.size());
  }
  for (Eigen::Index i = 0; i < cur.rows(); ++i) {
    const Real m = cur.row(i).maxCoeff();
    Real z = 0;
    for (Eigen::Index j = 0; j < cur.cols(); ++j) z += std::exp(cur(i, j) - m);
    total += m + std::log(z) - cur(i, batch.labels[static_cast<std::size_t>(i)]);
  }
  return total / static_cast<Real>(cur.rows());
}

}  // namespace

FiniteDiffReport finite_diff_check(TaskModel& model, const Batch& batch, LossKind loss, double h,
                                   std::uint64_t seed, double fraction) {
  if (!(h > 0.0)) throw ValidationError("finite-difference step must be positive");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("sample fraction must be in (0, 1]");
  model.validate();
  const auto views = param_views(model);
  const auto grads = gradients(model, batch, loss);

  std::vector<RMatrix> lifted;
  std::vector<std::pair<std::size_t, Eigen::Index>> entries;
  for (std::size_t k = 0; k < views.size(); ++k) {
    lifted.push_back(views[k].map().cast<Real>());
    for (Eigen::Index e = 0; e < views[k].size(); ++e) entries.emplace_back(k, e);
  }
  Rng rng(seed);
  std::shuffle(entries.begin(), entries.end(), rng.engine());
  const auto take = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * entries.size())));
  entries.resize(std::min(take, entries.size()));

  FiniteDiffReport report;
  for (const auto& [k, e] : entries) {
    Real& slot = lifted[k].data()[e];
    const Real orig = slot;
    slot = orig + static_cast<Real>(h);
    const Real up = reference_loss(model, lifted, batch, loss);
    slot = orig - static_cast<Real>(h);
    const Real down = reference_loss(model, lifted, batch, loss);
    slot = orig;
    const double numeric = static_cast<double>((up - down) / (2 * static_cast<Real>(h)));
    const double analytic = grads[k].data()[e];
    const double err = std::abs(analytic - numeric) / std::max(std::abs(analytic), 1e-8);
    ++report.checked;
    if (report.worst.empty() || err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst = views[k].name + "[" + std::to_string(e) + "]";
    }
  }
  return report;
}

}  // namespace rankprobe
