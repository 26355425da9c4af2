#include "rankprobe/optim.hpp"

#include "rankprobe/errors.hpp"

#include <cmath>

namespace rankprobe {

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw ValidationError("unknown optimizer '" + name + "'");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::sgd ? "sgd" : "adam"; }

Optimizer::Optimizer(OptimizerConfig config, const std::vector<ParamView>& params) : config_(config) {
  if (!(config_.lr >= 0.0) || !std::isfinite(config_.lr)) throw ValidationError("learning rate must be finite and >= 0");
  if (config_.kind == OptimizerKind::adam) {
    for (const auto& p : params) {
      m_.push_back(Matrix::Zero(p.rows, p.cols));
      v_.push_back(Matrix::Zero(p.rows, p.cols));
    }
  }
}

void Optimizer::step(const std::vector<ParamView>& params, const std::vector<Matrix>& grads) {
  if (params.size() != grads.size()) throw ValidationError("optimizer: gradient count mismatch");
  ++t_;
  if (config_.kind == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i].map() -= config_.lr * grads[i];
    return;
  }
  if (m_.size() != params.size()) throw ValidationError("optimizer: parameter layout changed");
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * grads[i];
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * grads[i].cwiseProduct(grads[i]);
    auto p = params[i].map();
    p.array() -= config_.lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.eps);
  }
}

}  // namespace rankprobe
