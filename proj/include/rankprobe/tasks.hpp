#pragma once

#include "rankprobe/differentiable.hpp"

#include <cstdint>
#include <vector>

namespace rankprobe {

struct CircleOptions {
  double radius = 0.3;
  int points = 1000;  // per arc, one full turn
  // Both arcs share one circle around the origin by default, so the starts
  // (-r, 0) and (r, 0) are antipodal.
  double center_top_x = 0.0, center_top_y = 0.0;
  double center_bottom_x = 0.0, center_bottom_y = 0.0;
};

// Two counter-clockwise arcs sampled at angular step 2π/points. `first`
// starts at center_top + (-r, 0), `second` at center_bottom + (r, 0).
struct CircleTask {
  CircleOptions options;
  Matrix first;   // points x 2, arc starting at (-r, 0)
  Matrix second;  // points x 2, arc starting at (r, 0)

  // Sample t: tokens (first[t], second[t]); target the next pair (wrapping).
  Batch batch() const;
  // The 2 x 2 token matrix of step t.
  TokenMatrix pair(int t) const;
};

CircleTask gen_circle_task(std::uint64_t seed, const CircleOptions& options = {});

struct SortOptions {
  int alphabet = 10;
  int length = 8;
  int train = 1000;
  int test = 200;
};

struct SortTask {
  SortOptions options;
  std::vector<std::vector<int>> train_inputs, train_targets;
  std::vector<std::vector<int>> test_inputs, test_targets;

  Batch train_batch() const;
  Batch test_batch() const;
};

// Position of each letter in the stable ascending sort of its sequence.
std::vector<int> sort_positions(const std::vector<int>& sequence);

SortTask gen_sort_task(std::uint64_t seed, const SortOptions& options = {});

// The sequences `which` of `full`, in that order.
Batch select_sequences(const Batch& full, const std::vector<std::size_t>& which);

}  // namespace rankprobe
