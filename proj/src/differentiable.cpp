#include "rankprobe/differentiable.hpp"

#include "rankprobe/errors.hpp"

#include <cmath>

namespace rankprobe {

void TaskModel::validate() const {
  san.validate();
  const auto& cfg = san.config;
  const auto d = cfg.d_model;
  if (token_embedding && token_embedding->cols() != d) throw ShapeError("token embedding width != d_model");
  if (position_embedding) {
    if (!token_embedding) throw ShapeError("position embedding needs a token embedding");
    if (position_embedding->cols() != d) throw ShapeError("position embedding width != d_model");
  }
  if (readout.has_value() != readout_bias.has_value()) throw ShapeError("readout needs both weights and bias");
  if (readout && (readout->rows() != d || readout_bias->size() != readout->cols())) {
    throw ShapeError("readout shape mismatch");
  }
  if (!qk_factors.empty()) {
    if (qk_factors.size() != san.layers.size()) throw ShapeError("qk factor layer count mismatch");
    for (const auto& layer : qk_factors) {
      if (layer.size() != static_cast<std::size_t>(cfg.heads)) throw ShapeError("qk factor head count mismatch");
      for (const auto& f : layer) {
        if (f.w_q.rows() != d || f.w_k.rows() != d || f.w_q.cols() != f.w_k.cols()) {
          throw ShapeError("qk factor shape mismatch");
        }
      }
    }
  }
}

void TaskModel::sync_factors() {
  for (std::size_t l = 0; l < qk_factors.size(); ++l)
    for (std::size_t h = 0; h < qk_factors[l].size(); ++h)
      san.layers[l].heads[h].w_qk = qk_factors[l][h].w_q * qk_factors[l][h].w_k.transpose();
}

namespace {

ParamView view(std::string name, Matrix& m) { return ParamView{std::move(name), m.data(), m.rows(), m.cols()}; }

ParamView row_view(std::string name, Vector& v) { return ParamView{std::move(name), v.data(), 1, v.size()}; }

ParamView col_view(std::string name, Vector& v) { return ParamView{std::move(name), v.data(), v.size(), 1}; }

}  // namespace

std::vector<ParamView> param_views(TaskModel& model) {
  std::vector<ParamView> out;
  auto& layers = model.san.layers;
  const bool factored = !model.qk_factors.empty();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string at = "layer" + std::to_string(l) + ".";
    auto& layer = layers[l];
    for (std::size_t h = 0; h < layer.heads.size(); ++h) {
      const std::string hat = at + "head" + std::to_string(h) + ".";
      auto& head = layer.heads[h];
      if (factored) {
        out.push_back(view(hat + "W_Q", model.qk_factors[l][h].w_q));
        out.push_back(view(hat + "W_K", model.qk_factors[l][h].w_k));
      } else {
        out.push_back(view(hat + "W_QK", head.w_qk));
      }
      out.push_back(col_view(hat + "b_QK", head.b_qk));
      out.push_back(view(hat + "W_V", head.w_v));
      out.push_back(view(hat + "W_O", head.w_o));
    }
    out.push_back(row_view(at + "b_O", layer.b_o));
    if (layer.mlp) {
      out.push_back(view(at + "W_1", layer.mlp->w1));
      out.push_back(row_view(at + "b_1", layer.mlp->b1));
      out.push_back(view(at + "W_2", layer.mlp->w2));
      out.push_back(row_view(at + "b_2", layer.mlp->b2));
    }
    if (layer.ln_attention) {
      out.push_back(row_view(at + "ln_attention.gain", layer.ln_attention->gain));
      out.push_back(row_view(at + "ln_attention.bias", layer.ln_attention->bias));
    }
    if (layer.ln_mlp) {
      out.push_back(row_view(at + "ln_mlp.gain", layer.ln_mlp->gain));
      out.push_back(row_view(at + "ln_mlp.bias", layer.ln_mlp->bias));
    }
  }
  if (model.token_embedding) out.push_back(view("token_embedding", *model.token_embedding));
  if (model.position_embedding) out.push_back(view("position_embedding", *model.position_embedding));
  if (model.readout) {
    out.push_back(view("readout", *model.readout));
    out.push_back(row_view("readout_bias", *model.readout_bias));
  }
  return out;
}

std::size_t parameter_count(TaskModel& model) {
  std::size_t n = 0;
  for (const auto& v : param_views(model)) n += static_cast<std::size_t>(v.size());
  return n;
}

Eigen::Index Batch::sequences() const {
  if (segment < 1) throw ValidationError("batch segment length must be >= 1");
  const Eigen::Index rows = tokens.empty() ? inputs.rows() : static_cast<Eigen::Index>(tokens.size());
  if (rows % segment != 0) throw ShapeError("batch rows are not a multiple of the segment length");
  return rows / segment;
}

LossKind parse_loss(const std::string& name) {
  if (name == "mse") return LossKind::mse;
  if (name == "cross-entropy" || name == "cross_entropy") return LossKind::cross_entropy;
  throw ValidationError("unknown loss '" + name + "'");
}

std::string to_string(LossKind loss) { return loss == LossKind::mse ? "mse" : "cross-entropy"; }

BoundModel bind(Tape& tape, TaskModel& model) {
  model.validate();
  BoundModel b;
  for (const auto& v : param_views(model)) b.vars.push_back(tape.variable(v.map()));
  return b;
}

Var model_forward(Tape& tape, TaskModel& model, const BoundModel& bound, const Batch& batch) {
  const auto& cfg = model.san.config;
  const Eigen::Index n = batch.segment;
  const Eigen::Index count = batch.sequences();
  const bool factored = !model.qk_factors.empty();
  std::size_t k = 0;
  auto next = [&]() -> Var {
    if (k >= bound.vars.size()) throw ValidationError("bound model does not match the model layout");
    return bound.vars[k++];
  };

  // Walk the san parameters first (same order as param_views), then apply
  // the embedding, which comes later in that order.
  struct HeadVars {
    Var w_qk, b_qk, w_v, w_o;
  };
  struct LayerVars {
    std::vector<HeadVars> heads;
    Var b_o;
    Var w1, b1, w2, b2;
    Var ln_a_gain, ln_a_bias, ln_m_gain, ln_m_bias;
  };
  std::vector<LayerVars> layers(model.san.layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = model.san.layers[l];
    for (std::size_t h = 0; h < layer.heads.size(); ++h) {
      HeadVars hv;
      if (factored) {
        const Var wq = next();
        const Var wk = next();
        hv.w_qk = matmul(wq, transpose(wk));
      } else {
        hv.w_qk = next();
      }
      hv.b_qk = next();
      hv.w_v = next();
      hv.w_o = next();
      layers[l].heads.push_back(hv);
    }
    layers[l].b_o = next();
    if (layer.mlp) {
      layers[l].w1 = next();
      layers[l].b1 = next();
      layers[l].w2 = next();
      layers[l].b2 = next();
    }
    if (layer.ln_attention) {
      layers[l].ln_a_gain = next();
      layers[l].ln_a_bias = next();
    }
    if (layer.ln_mlp) {
      layers[l].ln_m_gain = next();
      layers[l].ln_m_bias = next();
    }
  }

  Var cur;
  if (model.token_embedding) {
    if (batch.tokens.empty()) throw ValidationError("model expects token ids");
    cur = gather_rows(next(), batch.tokens);
    if (model.position_embedding) {
      const Var pos = next();
      if (pos.rows() != n) throw ShapeError("position embedding rows != sequence length");
      cur = add(cur, tile_rows(pos, static_cast<int>(count)));
    }
  } else {
    if (batch.inputs.cols() != cfg.d_model) throw ShapeError("batch width != d_model");
    cur = tape.constant(batch.inputs);
  }

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.d_qk));
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& lv = layers[l];
    Var attn;
    bool first = true;
    for (const auto& hv : lv.heads) {
      const Var p = softmax_rows(attention_scores(cur, hv.w_qk, hv.b_qk, n, inv_sqrt));
      const Var mixed = matmul(mix_tokens(p, matmul(cur, hv.w_v), n), transpose(hv.w_o));
      attn = first ? mixed : add(attn, mixed);
      first = false;
    }
    Var a = add_row(attn, lv.b_o);
    if (cfg.use_skip) a = add(cur, a);
    if (cfg.use_layernorm) a = layernorm_columns(a, lv.ln_a_gain, lv.ln_a_bias, n, kLayerNormEpsilon);
    if (cfg.use_mlp) {
      const Var hidden = relu(add_row(matmul(a, lv.w1), lv.b1));
      Var b = add_row(matmul(hidden, lv.w2), lv.b2);
      if (cfg.use_skip) b = add(a, b);
      if (cfg.use_layernorm) b = layernorm_columns(b, lv.ln_m_gain, lv.ln_m_bias, n, kLayerNormEpsilon);
      cur = b;
    } else {
      cur = a;
    }
  }

  if (model.readout) {
    const Var w = next();
    const Var bias = next();
    cur = add_row(matmul(cur, w), bias);
  }
  return cur;
}

Var model_loss(Tape& tape, TaskModel& model, const BoundModel& bound, const Batch& batch, LossKind loss) {
  const Var out = model_forward(tape, model, bound, batch);
  if (loss == LossKind::mse) return mse(out, batch.targets);
  return softmax_cross_entropy(out, batch.labels);
}

TokenMatrix embed_sequence(const TaskModel& model, const Batch& batch, Eigen::Index b) {
  const Eigen::Index n = batch.segment;
  if (!model.token_embedding) return batch.inputs.middleRows(b * n, n);
  TokenMatrix x(n, model.token_embedding->cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const int id = batch.tokens[static_cast<std::size_t>(b * n + i)];
    if (id < 0 || id >= model.token_embedding->rows()) throw ValidationError("token id out of range");
    x.row(i) = model.token_embedding->row(id);
  }
  if (model.position_embedding) x += *model.position_embedding;
  return x;
}

Matrix apply_readout(const TaskModel& model, const TokenMatrix& san_output) {
  if (!model.readout) return san_output;
  Matrix out = san_output * *model.readout;
  out.rowwise() += model.readout_bias->transpose();
  return out;
}

Matrix plain_forward(const TaskModel& model, const Batch& batch) {
  const Eigen::Index count = batch.sequences();
  Matrix out;
  for (Eigen::Index b = 0; b < count; ++b) {
    const Matrix y = apply_readout(model, forward(embed_sequence(model, batch, b), model.san).output);
    if (b == 0) out.resize(count * batch.segment, y.cols());
    out.middleRows(b * batch.segment, batch.segment) = y;
  }
  return out;
}

double plain_loss(const TaskModel& model, const Batch& batch, LossKind loss) {
  const Matrix out = plain_forward(model, batch);
  if (loss == LossKind::mse) {
    if (out.rows() != batch.targets.rows() || out.cols() != batch.targets.cols()) {
      throw ShapeError("targets do not match model output");
    }
    return (out - batch.targets).squaredNorm() / static_cast<double>(out.size());
  }
  if (static_cast<Eigen::Index>(batch.labels.size()) != out.rows()) throw ShapeError("one label per row required");
  double total = 0.0;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double m = out.row(i).maxCoeff();
    total += m + std::log((out.row(i).array() - m).exp().sum()) - out(i, batch.labels[static_cast<std::size_t>(i)]);
  }
  return total / static_cast<double>(out.rows());
}

}  // namespace rankprobe
