#include "rankprobe/errors.hpp"
#include "rankprobe/experiments.hpp"
#include "rankprobe/params_io.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

namespace {

enum ExitCode { kOk = 0, kValidation = 2, kNumerical = 3, kGuard = 4 };

struct Options {
  std::string config;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  std::optional<int> layers, heads, dim, dqk, tokens, trials;
  std::optional<std::string> variant;
  bool zero_values = false;
};

nlohmann::json overrides_from(const Options& o) {
  nlohmann::json j = nlohmann::json::object();
  if (o.seed) j["seed"] = *o.seed;
  if (o.layers) j["layers"] = *o.layers;
  if (o.heads) j["heads"] = *o.heads;
  if (o.dim) j["dim"] = *o.dim;
  if (o.dqk) j["dqk"] = *o.dqk;
  if (o.tokens) j["tokens"] = *o.tokens;
  if (o.trials) j["trials"] = *o.trials;
  if (o.variant) j["variant"] = *o.variant;
  if (o.zero_values) j["zero_values"] = true;
  return j;
}

void add_options(CLI::App& sub, Options& o) {
  sub.add_option("--config", o.config, "flat JSON config file")->required();
  sub.add_option("--seed", o.seed, "base seed");
  sub.add_option("--out", o.out, "output directory");
  sub.add_option("--layers", o.layers);
  sub.add_option("--heads", o.heads);
  sub.add_option("--dim", o.dim);
  sub.add_option("--dqk", o.dqk);
  sub.add_option("--tokens", o.tokens);
  sub.add_option("--variant", o.variant, "san, san+skip, san+mlp, san+ln, transformer");
  sub.add_option("--trials", o.trials);
  sub.add_flag("--zero-values", o.zero_values, "set every W_V to zero");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rank collapse probes for self-attention networks"};
  app.require_subcommand(1);
  Options opts;
  for (const auto& name : rankprobe::subcommands()) add_options(*app.add_subcommand(name), opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kValidation;
  }

  const std::string sub = app.get_subcommands().front()->get_name();
  try {
    rankprobe::RunContext ctx;
    ctx.out_dir = opts.out;
    ctx.config_path = opts.config;
    try {
      ctx.file_config = rankprobe::load_json(opts.config);
    } catch (const nlohmann::json::exception& e) {
      throw rankprobe::ValidationError("cannot parse " + opts.config + ": " + e.what());
    }
    ctx.overrides = overrides_from(opts);
    const auto result = rankprobe::run_experiment(sub, ctx);
    for (const auto& f : result.files) std::cout << f << '\n';
    return kOk;
  } catch (const rankprobe::GuardError& e) {
    std::cerr << "guard: " << e.what() << '\n';
    return kGuard;
  } catch (const rankprobe::NumericalError& e) {
    std::cerr << "numerical: " << e.what() << '\n';
    return kNumerical;
  } catch (const rankprobe::ValidationError& e) {
    std::cerr << "invalid: " << e.what() << '\n';
    return kValidation;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "invalid: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  }
}
