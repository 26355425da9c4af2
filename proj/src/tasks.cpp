#include "rankprobe/tasks.hpp"

#include "rankprobe/errors.hpp"
#include "rankprobe/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rankprobe {

CircleTask gen_circle_task(std::uint64_t /*seed*/, const CircleOptions& options) {
  if (!(options.radius > 0.0) || options.points < 2) throw ValidationError("circle task needs radius > 0 and >= 2 points");
  CircleTask task;
  task.options = options;
  task.first.resize(options.points, 2);
  task.second.resize(options.points, 2);
  const double pi = std::acos(-1.0);
  const double r = options.radius;
  for (int t = 0; t < options.points; ++t) {
    const double a = 2.0 * pi * t / options.points;
    task.first(t, 0) = options.center_top_x + r * std::cos(pi + a);
    task.first(t, 1) = options.center_top_y + r * std::sin(pi + a);
    task.second(t, 0) = options.center_bottom_x + r * std::cos(a);
    task.second(t, 1) = options.center_bottom_y + r * std::sin(a);
  }
  return task;
}

TokenMatrix CircleTask::pair(int t) const {
  if (t < 0 || t >= first.rows()) throw ValidationError("circle step out of range");
  TokenMatrix x(2, 2);
  x.row(0) = first.row(t);
  x.row(1) = second.row(t);
  return x;
}

Batch CircleTask::batch() const {
  const auto n = first.rows();
  Batch b;
  b.segment = 2;
  b.inputs.resize(2 * n, 2);
  b.targets.resize(2 * n, 2);
  for (Eigen::Index t = 0; t < n; ++t) {
    const Eigen::Index next = (t + 1) % n;
    b.inputs.row(2 * t) = first.row(t);
    b.inputs.row(2 * t + 1) = second.row(t);
    b.targets.row(2 * t) = first.row(next);
    b.targets.row(2 * t + 1) = second.row(next);
  }
  return b;
}

std::vector<int> sort_positions(const std::vector<int>& sequence) {
  std::vector<int> order(sequence.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return sequence[a] < sequence[b]; });
  std::vector<int> pos(sequence.size());
  for (std::size_t rank = 0; rank < order.size(); ++rank) pos[order[rank]] = static_cast<int>(rank);
  return pos;
}

SortTask gen_sort_task(std::uint64_t seed, const SortOptions& options) {
  if (options.alphabet < 1 || options.length < 1 || options.train < 1 || options.test < 1) {
    throw ValidationError("sort task sizes must be >= 1");
  }
  SortTask task;
  task.options = options;
  Rng rng(seed);
  auto draw = [&](int count, auto& inputs, auto& targets) {
    for (int s = 0; s < count; ++s) {
      std::vector<int> seq(static_cast<std::size_t>(options.length));
      for (auto& v : seq) v = static_cast<int>(rng.integer(0, options.alphabet - 1));
      targets.push_back(sort_positions(seq));
      inputs.push_back(std::move(seq));
    }
  };
  draw(options.train, task.train_inputs, task.train_targets);
  draw(options.test, task.test_inputs, task.test_targets);
  return task;
}

namespace {

Batch sort_batch(const std::vector<std::vector<int>>& inputs, const std::vector<std::vector<int>>& targets,
                 int length) {
  Batch b;
  b.segment = length;
  for (std::size_t s = 0; s < inputs.size(); ++s) {
    b.tokens.insert(b.tokens.end(), inputs[s].begin(), inputs[s].end());
    b.labels.insert(b.labels.end(), targets[s].begin(), targets[s].end());
  }
  return b;
}

}  // namespace

Batch SortTask::train_batch() const { return sort_batch(train_inputs, train_targets, options.length); }

Batch SortTask::test_batch() const { return sort_batch(test_inputs, test_targets, options.length); }

Batch select_sequences(const Batch& full, const std::vector<std::size_t>& which) {
  const Eigen::Index n = full.segment;
  const auto count = static_cast<std::size_t>(full.sequences());
  Batch b;
  b.segment = n;
  const auto rows = static_cast<Eigen::Index>(which.size()) * n;
  if (full.inputs.size() > 0) b.inputs.resize(rows, full.inputs.cols());
  if (full.targets.size() > 0) b.targets.resize(rows, full.targets.cols());
  for (std::size_t k = 0; k < which.size(); ++k) {
    const std::size_t s = which[k];
    if (s >= count) throw ValidationError("sequence index out of range");
    const auto src = static_cast<Eigen::Index>(s) * n;
    const auto dst = static_cast<Eigen::Index>(k) * n;
    if (full.inputs.size() > 0) b.inputs.middleRows(dst, n) = full.inputs.middleRows(src, n);
    if (full.targets.size() > 0) b.targets.middleRows(dst, n) = full.targets.middleRows(src, n);
    if (!full.tokens.empty()) {
      b.tokens.insert(b.tokens.end(), full.tokens.begin() + src, full.tokens.begin() + src + n);
    }
    if (!full.labels.empty()) {
      b.labels.insert(b.labels.end(), full.labels.begin() + src, full.labels.begin() + src + n);
    }
  }
  return b;
}

}  // namespace rankprobe
