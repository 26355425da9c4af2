#include "rankprobe/bounds.hpp"

#include "rankprobe/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace rankprobe {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// exponent * log(base), treating a zero exponent as contributing nothing
// even when the base is zero.
double scaled_log(double exponent, double log_base) {
  if (exponent == 0.0) return 0.0;
  return exponent * log_base;
}

double safe_log(double v) { return v > 0.0 ? std::log(v) : kNegInf; }

double pow3(int l) { return std::pow(3.0, l); }

double log_base(double factor, double beta, int heads, int d_qk, double lambda) {
  return safe_log(factor * beta * heads * lambda / std::sqrt(static_cast<double>(d_qk)));
}

double closed_form_log(const BoundInputs& in, double lambda) {
  const double e = pow3(in.depth);
  return scaled_log((e - 1.0) / 2.0, log_base(4.0, in.beta, in.heads, in.d_qk, lambda)) +
         scaled_log(e, safe_log(in.res0));
}

}  // namespace

void BoundInputs::validate() const {
  if (!(beta >= 0.0) || !(lambda >= 0.0) || !(res0 >= 0.0)) {
    throw ValidationError("bound inputs must be nonnegative");
  }
  if (heads < 1 || d_qk < 1 || depth < 0) throw ValidationError("bound inputs: bad dimensions");
  if (depth > 600) throw ValidationError("bound inputs: depth too large for log-space evaluation");
}

BoundValue BoundValue::from_log(double log_value) {
  return BoundValue{log_value, std::exp(log_value)};
}

double layer_beta(const LayerParams& layer) {
  double best = 0.0;
  for (const auto& head : layer.heads) best = std::max(best, head_beta(head));
  return best;
}

double beta(const SanParams& params) {
  double best = 0.0;
  for (const auto& layer : params.layers) best = std::max(best, layer_beta(layer));
  return best;
}

double mlp_lipschitz_bound(const MlpParams& mlp) {
  return norm_composite(mlp.w1) * norm_composite(mlp.w2);
}

BoundValue bound_pure(const BoundInputs& in) {
  in.validate();
  return BoundValue::from_log(closed_form_log(in, 1.0));
}

BoundValue bound_mlp(const BoundInputs& in) {
  in.validate();
  return BoundValue::from_log(closed_form_log(in, in.lambda));
}

BoundValue bound_skip_term(const BoundInputs& in, int l) {
  in.validate();
  if (l < 0 || l > in.depth) throw ValidationError("skip bound term index outside [0, L]");
  const double e = pow3(l);
  const double log_value = scaled_log((e - 1.0) / 2.0, log_base(8.0, in.beta, in.heads, in.d_qk, 1.0)) +
                           scaled_log(e * (in.depth - l), std::log(2.0 * in.heads)) +
                           scaled_log(e, safe_log(in.res0));
  return BoundValue::from_log(log_value);
}

SkipBound bound_skip(const BoundInputs& in) {
  SkipBound best{bound_skip_term(in, 0), 0};
  for (int l = 1; l <= in.depth; ++l) {
    const BoundValue term = bound_skip_term(in, l);
    if (term.log_value > best.value.log_value) best = SkipBound{term, l};
  }
  return best;
}

double log_bound_single_layer(double beta_lh, int d_qk, double log_res_in, int heads,
                              double lambda) {
  if (d_qk < 1 || heads < 1) throw ValidationError("single-layer bound: bad dimensions");
  return log_base(4.0, beta_lh, heads, d_qk, lambda) + 3.0 * log_res_in;
}

double bound_single_layer(double beta_lh, int d_qk, double res_in, int heads, double lambda) {
  if (res_in == 0.0 || beta_lh == 0.0 || lambda == 0.0) return 0.0;
  return 4.0 * heads * beta_lh * lambda / std::sqrt(static_cast<double>(d_qk)) * res_in * res_in *
         res_in;
}

bool bound_precondition(double beta, int heads, int d_qk, double lambda) {
  return 4.0 * beta * heads * lambda < std::sqrt(static_cast<double>(d_qk));
}

bool BoundReport::all_pass() const {
  return precondition_ok &&
         std::all_of(layers.begin(), layers.end(), [](const AuditLayer& l) { return l.pass.value_or(false); });
}

namespace {

nlohmann::json log_number(double v) {
  // JSON has no infinities.
  if (std::isinf(v)) return v < 0 ? "-inf" : "inf";
  return v;
}

}  // namespace

nlohmann::json BoundReport::to_json() const {
  nlohmann::json out{{"precondition_ok", precondition_ok},
                     {"slack", slack},
                     {"beta", beta},
                     {"lambda", lambda},
                     {"digits", digits}};
  if (!precondition_ok) out["note"] = "bound not guaranteed";
  auto& rows = out["layers"] = nlohmann::json::array();
  for (const auto& l : layers) {
    rows.push_back({{"l", l.l},
                    {"residual", l.residual},
                    {"residual_log", log_number(l.residual_log)},
                    {"recursive_bound_log", log_number(l.recursive_bound_log)},
                    {"closed_form_bound_log", log_number(l.closed_form_bound_log)},
                    {"pass", l.pass ? nlohmann::json(*l.pass) : nlohmann::json(nullptr)},
                    {"resolved", l.resolved}});
  }
  return out;
}

BoundReport audit(const TokenMatrix& x, const SanParams& params, const AuditOptions& opts) {
  params.validate();
  const auto& cfg = params.config;
  if (cfg.use_skip || cfg.use_layernorm) {
    throw ValidationError("bound audit covers pure SAN and SAN+MLP only");
  }
  if (!(opts.slack > 0.0)) throw ValidationError("audit slack must be positive");

  std::vector<double> res_log;
  std::vector<bool> resolved;
  unsigned digits = 0;
  if (opts.precision == AuditPrecision::extended) {
    PreciseTrace t = precise_residuals(x, params);
    res_log = std::move(t.residual_log);
    resolved = std::move(t.resolved);
    digits = t.digits;
  } else {
    const auto fwd = forward(x, params);
    digits = 16;
    res_log.push_back(safe_log(residual(x).composite_norm));
    resolved.push_back(true);
    for (std::size_t l = 0; l < fwd.trace.residual.size(); ++l) {
      const TokenMatrix& out = l + 1 < fwd.trace.inputs.size() ? fwd.trace.inputs[l + 1] : fwd.output;
      res_log.push_back(safe_log(fwd.trace.residual[l]));
      resolved.push_back(fwd.trace.residual[l] > 1e-12 * norm_composite(out));
    }
  }

  BoundReport report;
  report.slack = opts.slack;
  report.digits = digits;
  report.beta = beta(params);
  report.lambda = 1.0;
  if (cfg.use_mlp) {
    report.lambda = 0.0;
    for (const auto& layer : params.layers) {
      report.lambda = std::max(report.lambda, mlp_lipschitz_bound(*layer.mlp));
    }
  }
  report.precondition_ok = bound_precondition(report.beta, cfg.heads, cfg.d_qk, report.lambda);

  const double res0 = std::exp(res_log[0]);
  const double log_slack = std::log(opts.slack);
  for (int l = 0; l <= cfg.depth; ++l) {
    AuditLayer row;
    row.l = l;
    row.residual_log = res_log[static_cast<std::size_t>(l)];
    row.residual = std::exp(row.residual_log);
    row.resolved = resolved[static_cast<std::size_t>(l)];
    if (l == 0) {
      row.recursive_bound_log = row.closed_form_bound_log = row.residual_log;
    } else {
      const auto& layer = params.layers[static_cast<std::size_t>(l - 1)];
      const double lambda_l = cfg.use_mlp ? mlp_lipschitz_bound(*layer.mlp) : 1.0;
      row.recursive_bound_log = log_bound_single_layer(layer_beta(layer), cfg.d_qk,
                                                       res_log[static_cast<std::size_t>(l - 1)],
                                                       cfg.heads, lambda_l);
      BoundInputs in{report.beta, cfg.heads, l, cfg.d_qk, report.lambda, res0};
      row.closed_form_bound_log = bound_mlp(in).log_value;
    }
    if (report.precondition_ok) {
      row.pass = row.residual_log == kNegInf || row.residual_log <= log_slack + row.recursive_bound_log;
    }
    report.layers.push_back(row);
  }
  return report;
}

}  // namespace rankprobe
