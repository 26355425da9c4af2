#include "rankprobe/paths.hpp"

#include "rankprobe/errors.hpp"
#include "rankprobe/rng.hpp"

#include <boost/multiprecision/cpp_int.hpp>

#include <algorithm>
#include <numeric>
#include <set>

namespace rankprobe {

namespace mp = boost::multiprecision;

int PathId::length() const {
  return static_cast<int>(std::count_if(hops.begin(), hops.end(), [](int h) { return h != 0; }));
}

std::string PathId::to_string() const {
  std::string s = "(";
  for (std::size_t i = 0; i < hops.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(hops[i]);
  }
  return s + ")";
}

void check_enumeration_guard(int depth, int heads, bool with_skip) {
  if (depth < 1 || heads < 1) throw ValidationError("path enumeration needs L >= 1 and H >= 1");
  const int base = heads + (with_skip ? 1 : 0);
  const BigInt count = mp::pow(BigInt(base), static_cast<unsigned>(depth));
  if (count > kMaxEnumeratedPaths) {
    const std::string expr = with_skip ? "(H+1)^L" : "H^L";
    throw GuardError(expr + " = " + std::to_string(base) + "^" + std::to_string(depth) + " = " +
                     count.str() + " paths exceeds the enumeration limit of 10^7");
  }
}

PathEnumerator::PathEnumerator(int depth, int heads, bool with_skip)
    : heads_(heads), lowest_(with_skip ? 0 : 1) {
  check_enumeration_guard(depth, heads, with_skip);
  current_.hops.assign(static_cast<std::size_t>(depth), lowest_);
}

void PathEnumerator::advance() {
  if (done_) return;
  for (auto i = current_.hops.size(); i-- > 0;) {
    if (current_.hops[i] < heads_) {
      ++current_.hops[i];
      return;
    }
    current_.hops[i] = lowest_;
  }
  done_ = true;
}

std::vector<PathId> enumerate_paths(int depth, int heads, bool with_skip) {
  std::vector<PathId> out;
  for (PathEnumerator it(depth, heads, with_skip); !it.done(); it.advance()) {
    out.push_back(it.current());
  }
  return out;
}

std::vector<double> PathCensus::fractions() const {
  std::vector<double> out;
  out.reserve(counts.size());
  for (const auto& c : counts) out.push_back(static_cast<double>(mp::cpp_rational(c, total)));
  return out;
}

PathCensus path_census(int depth, int heads) {
  if (depth < 1) throw ValidationError("path census needs L >= 1");
  if (heads < 1) throw ValidationError("path census needs H >= 1");
  PathCensus census;
  census.depth = depth;
  census.heads = heads;
  BigInt binom = 1;
  BigInt head_power = 1;
  for (int l = 0; l <= depth; ++l) {
    census.counts.push_back(binom * head_power);
    census.total += census.counts.back();
    binom = binom * (depth - l) / (l + 1);
    head_power *= heads;
  }
  return census;
}

namespace {

void check_trace(const LayerTrace& trace, const SanParams& params) {
  const auto depth = params.layers.size();
  if (trace.inputs.size() != depth || trace.attention.size() != depth) {
    throw ValidationError("trace does not match the network depth");
  }
  for (std::size_t l = 0; l < depth; ++l) {
    if (trace.attention[l].size() != params.layers[l].heads.size()) {
      throw ValidationError("trace does not match the head count at layer " + std::to_string(l));
    }
  }
}

}  // namespace

TokenMatrix eval_path(const LayerTrace& trace, const SanParams& params, const PathId& path,
                      const TokenMatrix& x) {
  check_trace(trace, params);
  if (path.hops.size() != params.layers.size()) {
    throw ValidationError("path " + path.to_string() + " has the wrong length");
  }
  TokenMatrix y = x;
  for (std::size_t l = 0; l < path.hops.size(); ++l) {
    const int h = path.hops[l];
    if (h < 0 || h > static_cast<int>(params.layers[l].heads.size())) {
      throw ValidationError("path " + path.to_string() + " has an out-of-range hop");
    }
    if (h == 0) {
      if (!params.config.use_skip) {
        throw ValidationError("skip hop in path " + path.to_string() + " without skip connections");
      }
      continue;
    }
    const auto hi = static_cast<std::size_t>(h - 1);
    const auto& head = params.layers[l].heads[hi];
    y = trace.attention[l][hi].matrix() * (y * head.w_v) * head.w_o.transpose();
  }
  return y;
}

Decomposition decompose(const TokenMatrix& x, const SanParams& params) {
  const auto& cfg = params.config;
  if (cfg.use_mlp || cfg.use_layernorm) {
    throw ValidationError("path decomposition needs a variant without MLP and layernorm");
  }
  check_enumeration_guard(cfg.depth, cfg.heads, cfg.use_skip);
  auto result = forward(x, params);

  Decomposition d;
  d.forward_output = std::move(result.output);
  TokenMatrix sum = TokenMatrix::Zero(d.forward_output.rows(), d.forward_output.cols());
  for (PathEnumerator it(cfg.depth, cfg.heads, cfg.use_skip); !it.done(); it.advance()) {
    TokenMatrix y = eval_path(result.trace, params, it.current(), x);
    sum += y;
    d.paths.push_back(it.current());
    d.outputs.push_back(std::move(y));
  }
  d.aggregate_bias = d.forward_output - sum;
  return d;
}

namespace {

// All paths with exactly `length` head hops, lexicographic.
void paths_of_length(int depth, int heads, int length, std::vector<int>& prefix,
                     std::vector<PathId>& out) {
  const int placed = static_cast<int>(std::count_if(prefix.begin(), prefix.end(),
                                                    [](int h) { return h != 0; }));
  const int left = depth - static_cast<int>(prefix.size());
  if (left == 0) {
    out.push_back(PathId{prefix});
    return;
  }
  if (placed + left > length) {
    prefix.push_back(0);
    paths_of_length(depth, heads, length, prefix, out);
    prefix.pop_back();
  }
  if (placed < length) {
    for (int h = 1; h <= heads; ++h) {
      prefix.push_back(h);
      paths_of_length(depth, heads, length, prefix, out);
      prefix.pop_back();
    }
  }
}

}  // namespace

std::vector<PathId> sample_paths(int depth, int heads, int length, std::uint64_t k,
                                 std::uint64_t seed) {
  if (depth < 1 || heads < 1) throw ValidationError("sample_paths needs L >= 1 and H >= 1");
  if (length < 0 || length > depth) {
    throw ValidationError("path length " + std::to_string(length) + " outside [0, L]");
  }
  const BigInt available = path_census(depth, heads).counts[static_cast<std::size_t>(length)];
  if (BigInt(k) > available) {
    throw ValidationError("cannot sample " + std::to_string(k) + " distinct paths of length " +
                          std::to_string(length) + ": only " + available.str() + " exist");
  }
  Rng rng(seed);
  std::vector<PathId> out;
  out.reserve(k);

  if (available <= BigInt(4) * k) {
    std::vector<PathId> all;
    std::vector<int> prefix;
    paths_of_length(depth, heads, length, prefix, all);
    for (std::uint64_t i = 0; i < k; ++i) {
      const auto j = static_cast<std::size_t>(
          rng.integer(static_cast<std::int64_t>(i), static_cast<std::int64_t>(all.size()) - 1));
      std::swap(all[i], all[j]);
      out.push_back(all[i]);
    }
    return out;
  }

  std::set<PathId> seen;
  std::vector<int> positions(static_cast<std::size_t>(depth));
  while (out.size() < k) {
    std::iota(positions.begin(), positions.end(), 0);
    PathId p{std::vector<int>(static_cast<std::size_t>(depth), 0)};
    for (int i = 0; i < length; ++i) {
      const auto j = static_cast<std::size_t>(rng.integer(i, depth - 1));
      std::swap(positions[static_cast<std::size_t>(i)], positions[j]);
      p.hops[static_cast<std::size_t>(positions[static_cast<std::size_t>(i)])] =
          static_cast<int>(rng.integer(1, heads));
    }
    if (seen.insert(p).second) out.push_back(std::move(p));
  }
  return out;
}

TokenMatrix subset_output(const LayerTrace& trace, const SanParams& params,
                          const std::vector<PathId>& paths, const TokenMatrix& x) {
  if (paths.empty()) throw ValidationError("subset_output needs a nonempty path set");
  TokenMatrix sum = eval_path(trace, params, paths.front(), x);
  for (std::size_t i = 1; i < paths.size(); ++i) sum += eval_path(trace, params, paths[i], x);
  return sum / static_cast<double>(paths.size());
}

nlohmann::json paths_to_json(const std::vector<PathId>& paths) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& p : paths) out.push_back(p.hops);
  return out;
}

std::vector<PathId> paths_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw ValidationError("path set must be a JSON array");
  std::vector<PathId> out;
  try {
    for (const auto& p : j) out.push_back(PathId{p.get<std::vector<int>>()});
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad path set: ") + e.what());
  }
  return out;
}

}  // namespace rankprobe
