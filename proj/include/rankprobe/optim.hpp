#pragma once

#include "rankprobe/differentiable.hpp"

#include <string>
#include <vector>

namespace rankprobe {

enum class OptimizerKind { sgd, adam };

OptimizerKind parse_optimizer(const std::string& name);
std::string to_string(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Holds per-parameter state; the views passed to step() must keep the
// layout given at construction.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, const std::vector<ParamView>& params);

  void step(const std::vector<ParamView>& params, const std::vector<Matrix>& grads);
  long steps_taken() const { return t_; }

 private:
  OptimizerConfig config_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long t_ = 0;
};

}  // namespace rankprobe
