#pragma once

// Closed-form residual bounds for SANs and their audit against measured
// residuals. Every bound is evaluated in log space.

#include "rankprobe/san.hpp"

#include <json.hpp>

#include <optional>
#include <vector>

namespace rankprobe {

struct BoundInputs {
  double beta = 0.0;
  int heads = 1;
  int depth = 1;
  int d_qk = 1;
  double lambda = 1.0;  // MLP Lipschitz bound, 1 for pure attention
  double res0 = 0.0;    // ‖res(X)‖_{1,∞} of the input

  void validate() const;
};

// `log_value` is authoritative. `value` is exp(log_value), so it reads 0 or
// +inf once the bound leaves the double range.
struct BoundValue {
  double log_value = 0.0;
  double value = 0.0;

  static BoundValue from_log(double log_value);
};

// max_{l,h} ‖W_QK‖₁ · ‖W_V W_Oᵀ‖_{1,∞}.
double beta(const SanParams& params);
// Per-layer max over heads.
double layer_beta(const LayerParams& layer);

// ‖W_1‖_{1,∞} · ‖W_2‖_{1,∞}.
double mlp_lipschitz_bound(const MlpParams& mlp);

// (4βH/√d_qk)^((3^L-1)/2) · res0^(3^L)
BoundValue bound_pure(const BoundInputs& in);
// Same with base 4βHλ/√d_qk.
BoundValue bound_mlp(const BoundInputs& in);

// One term of the skip-connection bound:
// (8βH/√d_qk)^((3^l-1)/2) · (2H)^(3^l (L-l)) · res0^(3^l)
BoundValue bound_skip_term(const BoundInputs& in, int l);

struct SkipBound {
  BoundValue value;
  int argmax = 0;
};
SkipBound bound_skip(const BoundInputs& in);

// 4Hβλ/√d_qk · res_in³
double bound_single_layer(double beta_lh, int d_qk, double res_in, int heads = 1,
                          double lambda = 1.0);
double log_bound_single_layer(double beta_lh, int d_qk, double log_res_in, int heads = 1,
                              double lambda = 1.0);

// 4βHλ < √d_qk
bool bound_precondition(double beta, int heads, int d_qk, double lambda = 1.0);

enum class AuditPrecision { float64, extended };

struct AuditOptions {
  double slack = 8.0;
  AuditPrecision precision = AuditPrecision::extended;
};

struct AuditLayer {
  int l = 0;
  double residual = 0.0;
  double residual_log = 0.0;
  double recursive_bound_log = 0.0;
  double closed_form_bound_log = 0.0;
  // Empty when the precondition fails: nothing is asserted then.
  std::optional<bool> pass;
  // False when the residual sits at the arithmetic's resolution floor.
  bool resolved = true;
};

struct BoundReport {
  bool precondition_ok = false;
  double slack = 8.0;
  double beta = 0.0;
  double lambda = 1.0;
  unsigned digits = 0;  // decimal digits of the arithmetic used
  std::vector<AuditLayer> layers;  // L+1 entries, 0 = input

  bool all_pass() const;
  nlohmann::json to_json() const;
};

// Pure SAN or SAN+MLP only (no skip). The extended path reruns the forward
// pass in multiprecision and escalates precision until every residual is
// resolved or the last level is reached.
BoundReport audit(const TokenMatrix& x, const SanParams& params, const AuditOptions& opts = {});

// Measured ‖res(X^l)‖ in log form for l = 0..L at the given precision.
struct PreciseTrace {
  std::vector<double> residual_log;
  std::vector<bool> resolved;
  unsigned digits = 0;
};
PreciseTrace precise_residuals(const TokenMatrix& x, const SanParams& params);

}  // namespace rankprobe
