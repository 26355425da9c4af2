#include "rankprobe/san.hpp"

#include "rankprobe/errors.hpp"
#include "rankprobe/rng.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace rankprobe {

namespace {

void check_finite(const Matrix& m, std::size_t layer, const char* what) {
  if (!all_finite(m)) {
    throw NumericalError(std::string("non-finite ") + what + " at layer " + std::to_string(layer),
                         layer);
  }
}

void expect_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols, const std::string& name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw ShapeError(name + " has shape " + std::to_string(m.rows()) + "x" +
                     std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
}

void expect_size(const Vector& v, Eigen::Index size, const std::string& name) {
  if (v.size() != size) {
    throw ShapeError(name + " has length " + std::to_string(v.size()) + ", expected " +
                     std::to_string(size));
  }
}

}  // namespace

InitScheme InitScheme::parse(const std::string& text) {
  const auto open = text.find('(');
  const auto close = text.rfind(')');
  if (open == std::string::npos || close == std::string::npos || close < open ||
      close != text.size() - 1) {
    throw ValidationError("unknown init scheme '" + text + "'");
  }
  const std::string name = text.substr(0, open);
  const std::string arg = text.substr(open + 1, close - open - 1);
  InitScheme scheme;
  if (name == "gaussian") {
    scheme.kind = InitKind::gaussian;
  } else if (name == "factored") {
    scheme.kind = InitKind::factored;
  } else if (name == "scaled") {
    scheme.kind = InitKind::scaled;
  } else {
    throw ValidationError("unknown init scheme '" + text + "'");
  }
  try {
    std::size_t used = 0;
    scheme.value = std::stod(arg, &used);
    if (used != arg.size()) throw std::invalid_argument(arg);
  } catch (const std::exception&) {
    throw ValidationError("bad init scheme argument in '" + text + "'");
  }
  if (!(scheme.value >= 0.0) || !std::isfinite(scheme.value)) {
    throw ValidationError("init scheme argument must be finite and nonnegative");
  }
  return scheme;
}

std::string InitScheme::to_string() const {
  const char* name = kind == InitKind::gaussian ? "gaussian"
                     : kind == InitKind::factored ? "factored"
                                                  : "scaled";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s(%.17g)", name, value);
  return buf;
}

void SanConfig::validate() const {
  if (depth < 1 || heads < 1 || tokens < 1 || d_model < 1 || d_qk < 1 || d_v < 1 || d_ff < 1) {
    throw ValidationError("all SAN dimensions must be >= 1");
  }
}

std::string SanConfig::variant_name() const {
  if (use_skip && use_mlp && use_layernorm) return "transformer";
  std::string name = "san";
  if (use_skip) name += "+skip";
  if (use_mlp) name += "+mlp";
  if (use_layernorm) name += "+ln";
  return name;
}

void SanConfig::apply_variant(const std::string& name) {
  std::stringstream parts(name);
  std::string part;
  bool first = true;
  bool skip = false, with_mlp = false, ln = false;
  while (std::getline(parts, part, '+')) {
    if (first) {
      if (part == "transformer") {
        skip = with_mlp = ln = true;
      } else if (part != "san") {
        throw ValidationError("invalid variant name '" + name + "'");
      }
      first = false;
    } else if (part == "skip") {
      skip = true;
    } else if (part == "mlp") {
      with_mlp = true;
    } else if (part == "ln") {
      ln = true;
    } else {
      throw ValidationError("invalid variant name '" + name + "'");
    }
  }
  if (first) throw ValidationError("empty variant name");
  use_skip = skip;
  use_mlp = with_mlp;
  use_layernorm = ln;
}

void SanParams::validate() const {
  config.validate();
  if (layers.size() != static_cast<std::size_t>(config.depth)) {
    throw ShapeError("layer count does not match config depth");
  }
  const auto d = config.d_model;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    const std::string at = "layer " + std::to_string(l) + " ";
    if (layer.heads.size() != static_cast<std::size_t>(config.heads)) {
      throw ShapeError(at + "head count does not match config");
    }
    for (const auto& head : layer.heads) {
      expect_shape(head.w_qk, d, d, at + "W_QK");
      expect_size(head.b_qk, d, at + "b_QK");
      expect_shape(head.w_v, d, config.d_v, at + "W_V");
      expect_shape(head.w_o, d, config.d_v, at + "W_O");
    }
    expect_size(layer.b_o, d, at + "b_O");
    if (layer.mlp.has_value() != config.use_mlp) throw ShapeError(at + "mlp presence mismatch");
    if (layer.mlp) {
      expect_shape(layer.mlp->w1, d, config.d_ff, at + "W_1");
      expect_size(layer.mlp->b1, config.d_ff, at + "b_1");
      expect_shape(layer.mlp->w2, config.d_ff, d, at + "W_2");
      expect_size(layer.mlp->b2, d, at + "b_2");
    }
    if (layer.ln_attention.has_value() != config.use_layernorm) {
      throw ShapeError(at + "layernorm presence mismatch");
    }
    if (layer.ln_mlp.has_value() != (config.use_layernorm && config.use_mlp)) {
      throw ShapeError(at + "mlp layernorm presence mismatch");
    }
    for (const auto* ln : {&layer.ln_attention, &layer.ln_mlp}) {
      if (*ln) {
        expect_size((*ln)->gain, d, at + "LN gain");
        expect_size((*ln)->bias, d, at + "LN bias");
      }
    }
  }
}

double head_beta(const HeadParams& head) {
  return norm_l1(head.w_qk) * norm_composite(head.value_output());
}

SanParams init_params(const SanConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const double sigma = config.init.kind == InitKind::scaled
                           ? 1.0 / std::sqrt(static_cast<double>(config.d_model))
                           : config.init.value;
  const auto d = config.d_model;

  SanParams params;
  params.config = config;
  params.layers.resize(static_cast<std::size_t>(config.depth));
  for (auto& layer : params.layers) {
    layer.heads.resize(static_cast<std::size_t>(config.heads));
    for (auto& head : layer.heads) {
      if (config.init.kind == InitKind::factored) {
        const Matrix w_q = rng.gaussian(d, config.d_qk, sigma);
        const Matrix w_k = rng.gaussian(d, config.d_qk, sigma);
        head.w_qk = w_q * w_k.transpose();
      } else {
        head.w_qk = rng.gaussian(d, d, sigma);
      }
      head.b_qk = Vector::Zero(d);
      head.w_v = rng.gaussian(d, config.d_v, sigma);
      head.w_o = rng.gaussian(d, config.d_v, sigma);
    }
    layer.b_o = Vector::Zero(d);
    if (config.use_mlp) {
      MlpParams m;
      m.w1 = rng.gaussian(d, config.d_ff, sigma);
      m.b1 = Vector::Zero(config.d_ff);
      m.w2 = rng.gaussian(config.d_ff, d, sigma);
      m.b2 = Vector::Zero(d);
      layer.mlp = std::move(m);
    }
    if (config.use_layernorm) {
      layer.ln_attention = LayerNormParams{Vector::Ones(d), Vector::Zero(d)};
      if (config.use_mlp) layer.ln_mlp = LayerNormParams{Vector::Ones(d), Vector::Zero(d)};
    }
  }

  if (config.init.kind == InitKind::scaled) {
    double current = 0.0;
    for (const auto& layer : params.layers)
      for (const auto& head : layer.heads) current = std::max(current, head_beta(head));
    if (!(current > 0.0)) throw ValidationError("cannot rescale an all-zero network");
    // beta is bilinear in (W_QK, W_V): scaling both by s scales it by s².
    const double s = std::sqrt(config.init.value / current);
    for (auto& layer : params.layers) {
      for (auto& head : layer.heads) {
        head.w_qk *= s;
        head.w_v *= s;
      }
    }
  }
  return params;
}

StochasticMatrix attention_matrix(const TokenMatrix& x, const HeadParams& head, int d_qk) {
  if (x.cols() != head.w_qk.rows() || head.w_qk.rows() != head.w_qk.cols() ||
      head.b_qk.size() != x.cols()) {
    throw ShapeError("attention_matrix: token width does not match W_QK/b_QK");
  }
  if (d_qk < 1) throw ValidationError("d_qk must be >= 1");
  Matrix scores = x * head.w_qk * x.transpose();
  scores.rowwise() += (x * head.b_qk).transpose();
  scores /= std::sqrt(static_cast<double>(d_qk));
  return softmax_rows(scores);
}

TokenMatrix sa_layer(const TokenMatrix& x, const LayerParams& layer, int d_qk,
                     std::vector<StochasticMatrix>* attention) {
  if (layer.heads.empty()) throw ShapeError("layer has no heads");
  if (layer.b_o.size() != layer.heads.front().w_o.rows()) throw ShapeError("b_O width mismatch");
  if (attention) attention->clear();
  TokenMatrix out = TokenMatrix::Zero(x.rows(), layer.b_o.size());
  for (const auto& head : layer.heads) {
    if (head.w_v.rows() != x.cols() || head.w_o.cols() != head.w_v.cols() ||
        head.w_o.rows() != out.cols()) {
      throw ShapeError("sa_layer: value/output weights do not match token width");
    }
    StochasticMatrix p = attention_matrix(x, head, d_qk);
    out += p.matrix() * (x * head.w_v) * head.w_o.transpose();
    if (attention) attention->push_back(std::move(p));
  }
  out.rowwise() += layer.b_o.transpose();
  return out;
}

TokenMatrix mlp(const TokenMatrix& x, const MlpParams& params) {
  if (x.cols() != params.w1.rows() || params.b1.size() != params.w1.cols() ||
      params.w2.rows() != params.w1.cols() || params.b2.size() != params.w2.cols()) {
    throw ShapeError("mlp: weight shapes do not match");
  }
  Matrix hidden = x * params.w1;
  hidden.rowwise() += params.b1.transpose();
  hidden = hidden.cwiseMax(0.0);
  Matrix out = hidden * params.w2;
  out.rowwise() += params.b2.transpose();
  return out;
}

LayerNormStats layernorm_stats(const TokenMatrix& x) {
  LayerNormStats stats;
  stats.mean = generic::column_mean(x);
  const Matrix centered = add_row_broadcast(x, -stats.mean);
  stats.scale = (centered.array().square().colwise().sum() / static_cast<double>(x.rows()) +
                 kLayerNormEpsilon)
                    .sqrt()
                    .matrix();
  return stats;
}

TokenMatrix layernorm(const TokenMatrix& x, const Vector& gain, const Vector& bias,
                      LayerNormStats* stats_out) {
  if (gain.size() != x.cols() || bias.size() != x.cols()) {
    throw ShapeError("layernorm: gain/bias width mismatch");
  }
  const LayerNormStats stats = layernorm_stats(x);
  Matrix out = add_row_broadcast(x, -stats.mean);
  out.array().rowwise() /= stats.scale.array();
  out.array().rowwise() *= gain.transpose().array();
  out.rowwise() += bias.transpose();
  if (stats_out) *stats_out = stats;
  return out;
}

TokenMatrix layernorm(const TokenMatrix& x, const LayerNormParams& params, LayerNormStats* stats) {
  return layernorm(x, params.gain, params.bias, stats);
}

ForwardResult forward(const TokenMatrix& x, const SanParams& params) {
  params.validate();
  const auto& cfg = params.config;
  if (x.cols() != cfg.d_model) {
    throw ShapeError("forward: input width " + std::to_string(x.cols()) + " != d_model " +
                     std::to_string(cfg.d_model));
  }
  if (x.rows() < 1) throw ShapeError("forward: input has no tokens");
  check_finite(x, 0, "input");

  ForwardResult result;
  auto& trace = result.trace;
  TokenMatrix current = x;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& layer = params.layers[l];
    trace.inputs.push_back(current);

    std::vector<StochasticMatrix> attention;
    TokenMatrix a = sa_layer(current, layer, cfg.d_qk, &attention);
    trace.attention.push_back(std::move(attention));
    if (cfg.use_skip) a += current;
    std::optional<LayerNormStats> ln_stats;
    if (cfg.use_layernorm) {
      LayerNormStats stats;
      a = layernorm(a, *layer.ln_attention, &stats);
      ln_stats = stats;
    }
    trace.ln_attention.push_back(std::move(ln_stats));
    check_finite(a, l, "attention output");

    TokenMatrix b;
    if (cfg.use_mlp) {
      b = mlp(a, *layer.mlp);
      if (cfg.use_skip) b += a;
      if (cfg.use_layernorm) b = layernorm(b, *layer.ln_mlp);
      check_finite(b, l, "mlp output");
    } else {
      b = std::move(a);
    }

    const double res = residual(b).composite_norm;
    const double total = norm_composite(b);
    trace.residual.push_back(res);
    trace.relative_residual.push_back(total > 0.0 ? res / total : 0.0);
    current = std::move(b);
  }
  result.output = std::move(current);
  return result;
}

}  // namespace rankprobe
