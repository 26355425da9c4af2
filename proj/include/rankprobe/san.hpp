#pragma once

// Self-attention networks and their transformer variants.
//
// Each head is stored in factored-product form: the fused query-key matrix
// W_QK = W_Q W_Kᵀ (d_model x d_model) with the fused bias b_QK = W_K b_Q, and
// the value/output pair W_V (d_model x d_v), W_O (d_model x d_v) whose product
// W_V W_Oᵀ is the head's token-wise map. Query/key terms that are constant
// across a softmax row are dropped.
//
// Variant wiring per layer (post-LN):
//   A = SA(X); if skip: A = X + A; if ln: A = LN(A)
//   if mlp: B = MLP(A); if skip: B = A + B; if ln: B = LN(B); else B = A
//
// Layer normalisation here standardises each *column* over the tokens, not
// each row over the features as common libraries do.

#include "rankprobe/linalg.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace rankprobe {

enum class InitKind {
  gaussian,  // i.i.d. N(0, value²) weights, zero biases
  factored,  // as gaussian, but W_QK = W_Q W_Kᵀ with N(0, value²) factors
  scaled,    // gaussian, then W_QK and W_V rescaled so beta(params) == value
};

struct InitScheme {
  InitKind kind = InitKind::gaussian;
  double value = 0.02;

  // "gaussian(0.02)", "factored(1)", "scaled(0.25)".
  static InitScheme parse(const std::string& text);
  std::string to_string() const;
};

struct SanConfig {
  int depth = 1;
  int heads = 1;
  int tokens = 8;
  int d_model = 8;  // also the input width d_in
  int d_qk = 8;
  int d_v = 8;
  int d_ff = 8;
  bool use_skip = false;
  bool use_mlp = false;
  bool use_layernorm = false;
  InitScheme init;
  std::uint64_t seed = 0;

  void validate() const;

  // One of san, san+skip, san+mlp, san+ln, transformer, or a '+'-joined
  // combination such as san+skip+ln.
  std::string variant_name() const;
  void apply_variant(const std::string& name);
};

struct HeadParams {
  Matrix w_qk;  // d_model x d_model
  Vector b_qk;  // d_model
  Matrix w_v;   // d_model x d_v
  Matrix w_o;   // d_model x d_v

  // W_h = W_V W_Oᵀ.
  Matrix value_output() const { return w_v * w_o.transpose(); }
};

struct MlpParams {
  Matrix w1;  // d_model x d_ff
  Vector b1;
  Matrix w2;  // d_ff x d_model
  Vector b2;
};

struct LayerNormParams {
  Vector gain;
  Vector bias;
};

struct LayerParams {
  std::vector<HeadParams> heads;
  Vector b_o;  // sum of the per-head output biases
  std::optional<MlpParams> mlp;
  std::optional<LayerNormParams> ln_attention;
  std::optional<LayerNormParams> ln_mlp;  // only with both mlp and layernorm
};

struct SanParams {
  SanConfig config;
  std::vector<LayerParams> layers;

  // Throws ShapeError when any tensor disagrees with `config`.
  void validate() const;
};

SanParams init_params(const SanConfig& config);

StochasticMatrix attention_matrix(const TokenMatrix& x, const HeadParams& head, int d_qk);

// Σ_h P_h X W_h + 1 b_Oᵀ. When `attention` is given it receives the P_h.
TokenMatrix sa_layer(const TokenMatrix& x, const LayerParams& layer, int d_qk,
                     std::vector<StochasticMatrix>* attention = nullptr);

TokenMatrix mlp(const TokenMatrix& x, const MlpParams& params);

inline constexpr double kLayerNormEpsilon = 1e-5;

// Per-column statistics: `scale` holds sqrt(var + eps), the diagonal of D_LN.
struct LayerNormStats {
  RowVector mean;
  RowVector scale;
};

LayerNormStats layernorm_stats(const TokenMatrix& x);
TokenMatrix layernorm(const TokenMatrix& x, const LayerNormParams& params,
                      LayerNormStats* stats = nullptr);
TokenMatrix layernorm(const TokenMatrix& x, const Vector& gain, const Vector& bias,
                      LayerNormStats* stats = nullptr);

struct LayerTrace {
  std::vector<TokenMatrix> inputs;                     // X^l for l = 0..L-1
  std::vector<std::vector<StochasticMatrix>> attention;  // [layer][head]
  std::vector<std::optional<LayerNormStats>> ln_attention;
  std::vector<double> residual;           // ‖res(X^{l+1})‖_{1,∞}
  std::vector<double> relative_residual;  // residual / ‖X^{l+1}‖_{1,∞}, 0 for a zero output
};

struct ForwardResult {
  TokenMatrix output;
  LayerTrace trace;
};

// Throws ShapeError on width mismatch and NumericalError (with the layer
// index) when an intermediate is not finite.
ForwardResult forward(const TokenMatrix& x, const SanParams& params);

// beta for one head: ‖W_QK‖₁ · ‖W_V W_Oᵀ‖_{1,∞}.
double head_beta(const HeadParams& head);

}  // namespace rankprobe
