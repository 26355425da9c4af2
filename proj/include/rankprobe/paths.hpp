#pragma once

// Path decomposition of a SAN. A path picks one head per layer (hop h in
// 1..H) or, with skip connections, the identity branch (hop 0). Its value is
// P_{h_L}^L ... P_{h_1}^1 X W_{h_1}^1 ... W_{h_L}^L, with the P's taken from the
// full network's forward trace.

#include "rankprobe/san.hpp"

#include <boost/multiprecision/cpp_int.hpp>
#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace rankprobe {

struct PathId {
  std::vector<int> hops;

  // Number of non-skip hops.
  int length() const;
  std::string to_string() const;

  bool operator==(const PathId& other) const { return hops == other.hops; }
  bool operator<(const PathId& other) const { return hops < other.hops; }
};

inline constexpr std::uint64_t kMaxEnumeratedPaths = 10'000'000;

using BigInt = boost::multiprecision::cpp_int;

// Throws GuardError unless base^L ≤ kMaxEnumeratedPaths, base = H (+1 with skip).
void check_enumeration_guard(int depth, int heads, bool with_skip);

// Lexicographic stream over [H]^L or ({0} ∪ [H])^L.
class PathEnumerator {
 public:
  PathEnumerator(int depth, int heads, bool with_skip);

  bool done() const { return done_; }
  const PathId& current() const { return current_; }
  void advance();

 private:
  int heads_;
  int lowest_;
  bool done_ = false;
  PathId current_;
};

std::vector<PathId> enumerate_paths(int depth, int heads, bool with_skip);

struct PathCensus {
  int depth = 0;
  int heads = 0;
  std::vector<BigInt> counts;  // indexed by length 0..L
  BigInt total;                // (H+1)^L

  // counts[l] / total, each correctly rounded from the exact ratio.
  std::vector<double> fractions() const;
};

PathCensus path_census(int depth, int heads);

// Precondition: `trace` came from forward(x, params).
TokenMatrix eval_path(const LayerTrace& trace, const SanParams& params, const PathId& path,
                      const TokenMatrix& x);

struct Decomposition {
  std::vector<PathId> paths;
  std::vector<TokenMatrix> outputs;
  TokenMatrix forward_output;
  TokenMatrix aggregate_bias;  // forward_output - Σ outputs
};

// Needs a variant without MLP and layernorm; respects the skip flag.
Decomposition decompose(const TokenMatrix& x, const SanParams& params);

// k distinct paths with exactly `length` non-skip hops, uniform without
// replacement, in draw order.
std::vector<PathId> sample_paths(int depth, int heads, int length, std::uint64_t k,
                                 std::uint64_t seed);

// Arithmetic mean of eval_path over `paths`.
TokenMatrix subset_output(const LayerTrace& trace, const SanParams& params,
                          const std::vector<PathId>& paths, const TokenMatrix& x);

nlohmann::json paths_to_json(const std::vector<PathId>& paths);
std::vector<PathId> paths_from_json(const nlohmann::json& j);

}  // namespace rankprobe
