#pragma once

// The six experiment subcommands. Each takes a fully resolved flat JSON
// config (defaults <- config file <- command-line overrides), writes
// `<subcommand>.<key>.csv|json` files plus `<subcommand>.manifest.json` into
// the output directory, and is deterministic per (config, seed).

#include <json.hpp>

#include <string>
#include <vector>

namespace rankprobe {

const std::vector<std::string>& subcommands();

nlohmann::json default_config(const std::string& subcommand);

// Throws ValidationError for unknown subcommands, unknown keys and values of
// the wrong type.
nlohmann::json resolve_config(const std::string& subcommand, const nlohmann::json& file_config,
                              const nlohmann::json& overrides);

struct RunResult {
  std::vector<std::string> files;  // paths written, manifest last
  nlohmann::json summary;
};

struct RunContext {
  std::string out_dir = ".";
  std::string config_path;      // recorded in the manifest only
  nlohmann::json file_config = nlohmann::json::object();
  nlohmann::json overrides = nlohmann::json::object();
};

RunResult run_subcommand(const std::string& subcommand, const nlohmann::json& config, const RunContext& ctx);

// Convenience: resolve then run.
RunResult run_experiment(const std::string& subcommand, const RunContext& ctx);

}  // namespace rankprobe
