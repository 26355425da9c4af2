#include "rankprobe/errors.hpp"
#include "rankprobe/experiments.hpp"
#include "rankprobe/output.hpp"
#include "rankprobe/params_io.hpp"

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <sys/wait.h>

using namespace rankprobe;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rankprobe_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(RANKPROBE_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string config(const std::string& name) { return std::string(RANKPROBE_CONFIGS) + "/" + name + ".json"; }

void write_config(const fs::path& path, const json& j) { save_json(path.string(), j); }

}  // namespace

TEST_SUITE("experiments") {
  TEST_CASE("csv formatting") {
    CHECK(format_double(0.1) == "0.10000000000000001");
    CHECK(format_double(1.0) == "1");
    CHECK(format_double(-INFINITY) == "-inf");
    CHECK(csv_escape("a,b") == "\"a,b\"");
    CHECK(csv_escape("say \"hi\"") == "\"say \"\"hi\"\"\"");
    CHECK(csv_escape("plain") == "plain");
    CsvWriter w({"x", "y"});
    w.add_row({"1", "a\nb"});
    CHECK(w.str() == "x,y\r\n1,\"a\nb\"\r\n");
    CHECK_THROWS_AS(w.add_row({"1"}), ValidationError);
  }

  TEST_CASE("config hash is key-order independent") {
    const json a = json::parse(R"({"a":1,"b":2})"), b = json::parse(R"({"b":2,"a":1})");
    CHECK(config_hash(a) == config_hash(b));
    CHECK(config_hash(a) != config_hash(json::parse(R"({"a":1,"b":3})")));
    CHECK(hex64(fnv1a64("")) == "cbf29ce484222325");
  }

  TEST_CASE("config resolution") {
    const auto cfg = resolve_config("collapse", json{{"layers", 3}}, json{{"layers", 5}, {"trials", 2}});
    CHECK(cfg["layers"] == 5);
    CHECK(cfg["trials"] == 2);
    CHECK(cfg["heads"] == 4);
    CHECK_THROWS_AS(resolve_config("collapse", json{{"depth", 3}}, json::object()), ValidationError);
    CHECK_THROWS_AS(resolve_config("collapse", json{{"layers", "3"}}, json::object()), ValidationError);
    CHECK_THROWS_AS(resolve_config("collapse", json{{"subcommand", "circle"}}, json::object()), ValidationError);
    CHECK_THROWS_AS(resolve_config("plot", json::object(), json::object()), ValidationError);
    CHECK(resolve_config("bounds", json{{"base", 1}}, json::object())["base"].is_number_float());
  }

  TEST_CASE("paths-dist census rows") {
    const auto dir = scratch("census");
    RunContext ctx;
    ctx.out_dir = dir.string();
    ctx.file_config = json{{"layers", 3}, {"heads", 2}};
    const auto r = run_experiment("paths-dist", ctx);
    CHECK(read_text((dir / "paths-dist.census.csv").string()) ==
          "length,count,fraction\r\n0,1,0.037037037037037035\r\n1,6,0.22222222222222221\r\n"
          "2,12,0.44444444444444442\r\n3,8,0.29629629629629628\r\n");
    const auto manifest = load_json((dir / "paths-dist.manifest.json").string());
    CHECK(manifest["config_hash"] == config_hash(manifest["config"]));
    CHECK(manifest["seed"] == 0);
    CHECK(manifest["artifact_versions"].contains("rankprobe"));
    CHECK(r.files.back() == (dir / "paths-dist.manifest.json").string());
  }

  TEST_CASE("collapse with zeroed values under skip is flat") {
    const auto dir = scratch("flat");
    RunContext ctx;
    ctx.out_dir = dir.string();
    ctx.overrides = json{{"variant", "san+skip"}, {"zero_values", true}, {"layers", 4}, {"trials", 3},
                         {"dim", 8}, {"tokens", 5}, {"heads", 2}, {"dqk", 4}};
    const auto r = run_experiment("collapse", ctx);
    const auto& layers = r.summary["layers"];
    REQUIRE(layers.size() == 5);
    for (const auto& l : layers) CHECK(std::abs(l["mean"].get<double>() - layers[0]["mean"].get<double>()) < 1e-12);
  }

  TEST_CASE("decompose report") {
    const auto dir = scratch("decompose");
    RunContext ctx;
    ctx.out_dir = dir.string();
    const auto plain = run_experiment("decompose", ctx).summary;
    CHECK(plain["max_reconstruction_error"].get<double>() <= 1e-9);
    ctx.overrides = json{{"biases", true}, {"skip", true}};
    const auto biased = run_experiment("decompose", ctx).summary;
    CHECK(biased["max_row_deviation"].get<double>() <= 1e-8);
    CHECK(biased["max_cross_input_deviation"].get<double>() <= 1e-8);
    ctx.overrides = json{{"layers", 13}, {"heads", 4}, {"skip", true}};
    CHECK_THROWS_AS(run_experiment("decompose", ctx), GuardError);
  }

  TEST_CASE("bounds with a violated precondition is diagnostic") {
    const auto dir = scratch("bounds");
    RunContext ctx;
    ctx.out_dir = dir.string();
    ctx.overrides = json{{"base", 4.0}, {"trials", 2}, {"layers", 2}};
    const auto s = run_experiment("bounds", ctx).summary;
    CHECK(s["precondition_ok"] == 0);
    ctx.overrides = json{{"zero_input", true}, {"trials", 2}, {"layers", 2}};
    run_experiment("bounds", ctx);
    const auto report = load_json((dir / "bounds.report.json").string());
    for (const auto& l : report["reports"][0]["layers"]) CHECK(l["residual"].get<double>() <= 1e-10);
  }

  TEST_CASE("cli exit codes") {
    const auto dir = scratch("cli");
    const std::string out = " --out " + dir.string();
    CHECK(run_cli("paths-dist --config " + config("paths-dist") + out) == 0);
    CHECK(fs::exists(dir / "paths-dist.census.csv"));
    CHECK(run_cli("paths-dist --config " + config("paths-dist") + " --heads 0" + out) == 2);
    CHECK(run_cli("collapse --config " + config("collapse") + " --variant san+dropout" + out) == 2);
    CHECK(run_cli("collapse --config /nonexistent.json" + out) == 2);
    CHECK(run_cli("nosuch --config x") == 2);
    CHECK(run_cli("decompose --config " + config("decompose") + " --layers 13 --heads 4" + out) == 4);

    const auto bad = dir / "bad.json";
    write_config(bad, json{{"dim", 2}, {"init", "gaussian(1e200)"}, {"steps", 1}, {"rollout_steps", 1}});
    CHECK(run_cli("circle --config " + bad.string() + out) == 3);
    write_config(bad, json{{"dim", 2}, {"steps", 1}, {"rollout_steps", 1}, {"bogus", 1}});
    CHECK(run_cli("circle --config " + bad.string() + out) == 2);
  }

  TEST_CASE("frozen configs resolve") {
    for (const auto& sub : subcommands()) CHECK_NOTHROW(resolve_config(sub, load_json(config(sub)), json::object()));
  }
}
