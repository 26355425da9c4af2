#pragma once

#include "rankprobe/differentiable.hpp"
#include "rankprobe/optim.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace rankprobe {

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adam;
  double lr = 1e-3;
  int steps = 1000;
  int batch_size = 0;  // sequences per step, 0 = full batch
  std::uint64_t seed = 0;
  LossKind loss = LossKind::mse;
  bool teacher_forcing = true;
  // Stop early once the step loss is at or below this value; 0 disables.
  double target_loss = 0.0;

  void validate() const;
};

struct TrainResult {
  std::vector<double> loss;  // per step, before the update
  bool reached_target = false;
};

// Throws NumericalError carrying the step index when the loss is not finite.
TrainResult train(TaskModel& model, const Batch& data, const TrainConfig& config);

struct RolloutOptions {
  // Stop quietly at the first non-finite state instead of throwing.
  bool stop_on_nonfinite = false;
};

struct Rollout {
  std::vector<TokenMatrix> states;  // states[0] is the start
  std::optional<int> diverged_at;   // step whose output was not finite
};

// Feeds the single-layer model its own output `steps` times.
Rollout rollout_recurrent(const TaskModel& model, const TokenMatrix& start, int steps,
                          const RolloutOptions& options = {});

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // parameter name and entry of the largest error
};

// Tape gradient against central differences of an independent
// extended-precision evaluation of the same model, on a random `fraction`
// of the scalar parameters (at least one). Relative error uses the
// denominator max(|analytic|, 1e-8).
FiniteDiffReport finite_diff_check(TaskModel& model, const Batch& batch, LossKind loss, double h,
                                   std::uint64_t seed, double fraction = 0.05);

// Gradients of `loss` for every parameter view, in param_views order.
std::vector<Matrix> gradients(TaskModel& model, const Batch& batch, LossKind loss, double* loss_value = nullptr);

}  // namespace rankprobe
