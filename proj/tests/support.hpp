#pragma once

#include "rankprobe/rng.hpp"
#include "rankprobe/san.hpp"

#include <string>

namespace rankprobe::testing {

inline Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    Eigen::Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

inline double rel_diff(const Matrix& a, const Matrix& b) {
  const double scale = std::max(a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff());
  return scale > 0.0 ? (a - b).cwiseAbs().maxCoeff() / scale : 0.0;
}

inline SanConfig small_config(const std::string& variant, std::uint64_t seed, int depth = 2, int heads = 2,
                              int d = 8, int n = 5) {
  SanConfig c;
  c.apply_variant(variant);
  c.depth = depth;
  c.heads = heads;
  c.d_model = d;
  c.d_qk = d;
  c.d_v = d;
  c.d_ff = d;
  c.tokens = n;
  c.init = InitScheme::parse("gaussian(0.5)");
  c.seed = seed;
  return c;
}

// Gaussian params with every bias and LN gain/bias randomised too.
inline SanParams random_params(const SanConfig& c, double bias_scale = 0.3) {
  SanParams p = init_params(c);
  Rng rng(c.seed + 1000);
  for (auto& layer : p.layers) {
    for (auto& head : layer.heads) head.b_qk = rng.gaussian(head.b_qk.size(), 1, bias_scale);
    layer.b_o = rng.gaussian(layer.b_o.size(), 1, bias_scale);
    if (layer.mlp) {
      layer.mlp->b1 = rng.gaussian(layer.mlp->b1.size(), 1, bias_scale);
      layer.mlp->b2 = rng.gaussian(layer.mlp->b2.size(), 1, bias_scale);
    }
    for (auto* ln : {&layer.ln_attention, &layer.ln_mlp}) {
      if (!*ln) continue;
      (*ln)->gain = Vector::Ones((*ln)->gain.size()) + rng.gaussian((*ln)->gain.size(), 1, bias_scale);
      (*ln)->bias = rng.gaussian((*ln)->bias.size(), 1, bias_scale);
    }
  }
  return p;
}

}  // namespace rankprobe::testing
