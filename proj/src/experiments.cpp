#include "rankprobe/experiments.hpp"

#include "rankprobe/bounds.hpp"
#include "rankprobe/errors.hpp"
#include "rankprobe/output.hpp"
#include "rankprobe/params_io.hpp"
#include "rankprobe/paths.hpp"
#include "rankprobe/rng.hpp"
#include "rankprobe/tasks.hpp"
#include "rankprobe/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>

namespace rankprobe {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names{"collapse", "decompose", "bounds", "paths-dist", "circle", "path-eff"};
  return names;
}

json default_config(const std::string& sub) {
  if (sub == "collapse") {
    return {{"variant", "san"}, {"layers", 12},  {"heads", 4},   {"dim", 64},
            {"dqk", 16},        {"dv", 0},       {"d_ff", 0},    {"tokens", 32},
            {"trials", 32},     {"init", "gaussian(0.02)"},      {"zero_values", false},
            {"seed", 0}};
  }
  if (sub == "decompose") {
    return {{"layers", 2},  {"heads", 2},     {"dim", 8},       {"dqk", 8},
            {"dv", 0},      {"tokens", 6},    {"trials", 10},   {"skip", false},
            {"biases", false}, {"bias_scale", 0.5}, {"init", "gaussian(0.5)"}, {"seed", 0}};
  }
  if (sub == "bounds") {
    return {{"variant", "san"}, {"layers", 4},   {"heads", 1},       {"dim", 8},
            {"dqk", 16},        {"dv", 8},       {"d_ff", 8},        {"tokens", 6},
            {"trials", 100},    {"base", 0.5},   {"res0", 0.5},      {"zero_input", false},
            {"slack", 8.0},     {"precision", "extended"},           {"seed", 0}};
  }
  if (sub == "paths-dist") return {{"layers", 3}, {"heads", 2}, {"seed", 0}};
  if (sub == "circle") {
    return {{"variant", "san"},   {"dim", 32},         {"init", "gaussian(0.02)"},
            {"optimizer", "adam"}, {"lr", 1e-3},       {"steps", 20000},
            {"target_loss", 1e-4}, {"rollout_steps", 1000}, {"gap_threshold", 0.05},
            {"seed", 0}};
  }
  if (sub == "path-eff") {
    return {{"variant", "san+skip"}, {"layers", 6},    {"heads", 2},        {"dim", 48},
            {"dqk", 24},             {"dv", 24},       {"init", "gaussian(0.1)"},
            {"embed_init", 1.0},     {"optimizer", "adam"}, {"lr", 3e-3},   {"steps", 6000},
            {"batch_size", 32},      {"k", 20},        {"trials", 5},       {"alphabet", 10},
            {"length", 8},           {"train", 1000},  {"test", 200},       {"model_path", ""},
            {"normalization", "mean"}, {"seed", 0}};
  }
  throw ValidationError("unknown subcommand '" + sub + "'");
}

json resolve_config(const std::string& sub, const json& file_config, const json& overrides) {
  json cfg = default_config(sub);
  for (const json* layer : {&file_config, &overrides}) {
    if (layer->is_null()) continue;
    if (!layer->is_object()) throw ValidationError("config must be a flat JSON object");
    for (const auto& [key, value] : layer->items()) {
      if (key == "subcommand") {
        if (!value.is_string() || value.get<std::string>() != sub) {
          throw ValidationError("config is for subcommand '" + value.dump() + "', not '" + sub + "'");
        }
        continue;
      }
      if (!cfg.contains(key)) throw ValidationError("unknown config key '" + key + "' for " + sub);
      const json& def = cfg[key];
      const bool ok = (def.is_boolean() && value.is_boolean()) || (def.is_string() && value.is_string()) ||
                      (def.is_number_integer() && value.is_number_integer()) ||
                      (def.is_number_float() && value.is_number());
      if (!ok) throw ValidationError("config key '" + key + "' has the wrong type");
      if (def.is_number_float()) {
        cfg[key] = value.get<double>();
      } else {
        cfg[key] = value;
      }
    }
  }
  if (cfg["seed"].is_number_integer() && cfg["seed"].get<std::int64_t>() < 0 && !cfg["seed"].is_number_unsigned()) {
    throw ValidationError("seed must be a nonnegative integer");
  }
  return cfg;
}

namespace {

int get_int(const json& cfg, const char* key, int min_value = 1) {
  const auto v = cfg.at(key).get<std::int64_t>();
  if (v < min_value || v > std::numeric_limits<int>::max()) {
    throw ValidationError(std::string(key) + " must be >= " + std::to_string(min_value));
  }
  return static_cast<int>(v);
}

double get_double(const json& cfg, const char* key) {
  const double v = cfg.at(key).get<double>();
  if (!std::isfinite(v)) throw ValidationError(std::string(key) + " must be finite");
  return v;
}

std::uint64_t get_seed(const json& cfg) { return cfg.at("seed").get<std::uint64_t>(); }

std::string out_path(const RunContext& ctx, const std::string& sub, const std::string& key, const std::string& ext) {
  return (fs::path(ctx.out_dir) / (sub + "." + key + "." + ext)).string();
}

// mean and population standard deviation
std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(xs.size()))};
}

// Input stream independent of the parameter stream for the same seed.
Rng input_rng(std::uint64_t seed) { return Rng(seed ^ 0x9E3779B97F4A7C15ULL); }

SanConfig base_config(const json& cfg) {
  SanConfig c;
  c.apply_variant(cfg.at("variant").get<std::string>());
  c.depth = get_int(cfg, "layers");
  c.heads = get_int(cfg, "heads");
  c.d_model = get_int(cfg, "dim");
  c.d_qk = get_int(cfg, "dqk");
  c.tokens = get_int(cfg, "tokens");
  const int dv = get_int(cfg, "dv", 0);
  c.d_v = dv > 0 ? dv : std::max(1, c.d_model / c.heads);
  if (cfg.contains("d_ff")) {
    const int dff = get_int(cfg, "d_ff", 0);
    c.d_ff = dff > 0 ? dff : 4 * c.d_model;
  }
  return c;
}

json collapse(const json& cfg, const RunContext& ctx, std::vector<std::string>& files) {
  SanConfig base = base_config(cfg);
  base.init = InitScheme::parse(cfg.at("init").get<std::string>());
  const int trials = get_int(cfg, "trials");
  const bool zero_values = cfg.at("zero_values").get<bool>();
  const std::uint64_t seed = get_seed(cfg);

  std::vector<std::vector<double>> rel(static_cast<std::size_t>(base.depth) + 1);
  for (int t = 0; t < trials; ++t) {
    SanConfig c = base;
    c.seed = seed + static_cast<std::uint64_t>(t);
    SanParams params = init_params(c);
    if (zero_values) {
      for (auto& layer : params.layers)
        for (auto& head : layer.heads) head.w_v.setZero();
    }
    Rng rng = input_rng(c.seed);
    const TokenMatrix x = rng.gaussian(c.tokens, c.d_model);
    const auto result = forward(x, params);
    rel[0].push_back(relative_residual(x));
    for (int l = 0; l < c.depth; ++l) {
      rel[static_cast<std::size_t>(l) + 1].push_back(result.trace.relative_residual[static_cast<std::size_t>(l)]);
    }
  }

  CsvWriter csv({"layer", "rel_residual_mean", "rel_residual_std"});
  json layers = json::array();
  for (std::size_t l = 0; l < rel.size(); ++l) {
    const auto [m, s] = mean_std(rel[l]);
    csv.add_row({std::to_string(l), format_double(m), format_double(s)});
    layers.push_back({{"layer", l}, {"mean", m}, {"std", s}});
  }
  const auto path = out_path(ctx, "collapse", "residual", "csv");
  csv.write(path);
  files.push_back(path);
  return {{"layers", layers},
          {"notes",
           {{"input", "i.i.d. standard gaussian tokens"},
            {"granularity", "one row per block; layer 0 is the input"},
            {"center", "column mean"}}}};
}

void randomize_biases(SanParams& params, double scale, Rng& rng) {
  for (auto& layer : params.layers) {
    for (auto& head : layer.heads) head.b_qk = rng.gaussian(head.b_qk.size(), 1, scale);
    layer.b_o = rng.gaussian(layer.b_o.size(), 1, scale);
  }
}

double max_abs(const Matrix& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

json decompose_cmd(const json& cfg, const RunContext& ctx, std::vector<std::string>& files) {
  SanConfig base;
  base.depth = get_int(cfg, "layers");
  base.heads = get_int(cfg, "heads");
  check_enumeration_guard(base.depth, base.heads, cfg.at("skip").get<bool>());
  base.d_model = get_int(cfg, "dim");
  base.d_qk = get_int(cfg, "dqk");
  base.tokens = get_int(cfg, "tokens");
  const int dv = get_int(cfg, "dv", 0);
  base.d_v = dv > 0 ? dv : base.d_model;
  base.use_skip = cfg.at("skip").get<bool>();
  base.init = InitScheme::parse(cfg.at("init").get<std::string>());
  const bool biases = cfg.at("biases").get<bool>();
  const double bias_scale = get_double(cfg, "bias_scale");
  const int trials = get_int(cfg, "trials");
  const std::uint64_t seed = get_seed(cfg);

  double max_recon = 0.0, max_row_dev = 0.0, max_cross = 0.0;
  std::size_t path_count = 0;
  json per_trial = json::array();
  for (int t = 0; t < trials; ++t) {
    SanConfig c = base;
    c.seed = seed + static_cast<std::uint64_t>(t);
    SanParams params = init_params(c);
    Rng rng = input_rng(c.seed);
    if (biases) randomize_biases(params, bias_scale, rng);
    const TokenMatrix x = rng.gaussian(c.tokens, c.d_model);
    const TokenMatrix x2 = rng.gaussian(c.tokens, c.d_model);
    const Decomposition d = decompose(x, params);
    const Decomposition d2 = decompose(x2, params);
    path_count = d.paths.size();
    const double fwd_norm = norm_composite(d.forward_output);
    const double recon = fwd_norm > 0.0 ? norm_composite(d.aggregate_bias) / fwd_norm : norm_composite(d.aggregate_bias);
    const double magnitude = std::max(max_abs(d.forward_output), max_abs(d.aggregate_bias));
    const double row_dev = magnitude > 0.0 ? row_spread(d.aggregate_bias) / magnitude : 0.0;
    const double bias_mag = std::max(max_abs(d.aggregate_bias), max_abs(d2.aggregate_bias));
    const double cross = bias_mag > 0.0 ? max_abs(d.aggregate_bias - d2.aggregate_bias) / bias_mag : 0.0;
    max_recon = std::max(max_recon, recon);
    max_row_dev = std::max(max_row_dev, row_dev);
    max_cross = std::max(max_cross, cross);
    per_trial.push_back({{"seed", c.seed}, {"reconstruction_error", recon}, {"row_deviation", row_dev},
                         {"cross_input_deviation", cross}});
  }
  json report{{"layers", base.depth},
              {"heads", base.heads},
              {"skip", base.use_skip},
              {"biases", biases},
              {"paths_per_trial", path_count},
              {"trials", trials},
              {"max_reconstruction_error", biases ? json(nullptr) : json(max_recon)},
              {"max_row_deviation", max_row_dev},
              {"max_cross_input_deviation", max_cross},
              {"per_trial", per_trial}};
  const auto path = out_path(ctx, "decompose", "report", "json");
  save_json(path, report);
  files.push_back(path);
  return report;
}

bool cubic_signature(const std::vector<double>& res_log) {
  const double threshold = std::log(0.1);
  bool active = false;
  for (std::size_t l = 0; l + 1 < res_log.size(); ++l) {
    if (!active && res_log[l] < threshold) active = true;
    if (!active) continue;
    if (std::isinf(res_log[l + 1]) && res_log[l + 1] < 0) continue;
    if (!(res_log[l + 1] / res_log[l] >= 2.0)) return false;
  }
  return true;
}

json bounds_cmd(const json& cfg, const RunContext& ctx, std::vector<std::string>& files) {
  SanConfig base = base_config(cfg);
  if (base.use_skip || base.use_layernorm) throw ValidationError("bounds audit supports san and san+mlp");
  const double target = get_double(cfg, "base");
  if (!(target > 0.0)) throw ValidationError("base must be positive");
  base.init.kind = InitKind::scaled;
  base.init.value = target * std::sqrt(static_cast<double>(base.d_qk)) / (4.0 * base.heads);
  const double res0 = get_double(cfg, "res0");
  if (!(res0 >= 0.0)) throw ValidationError("res0 must be >= 0");
  const bool zero_input = cfg.at("zero_input").get<bool>() || res0 == 0.0;
  AuditOptions opts;
  opts.slack = get_double(cfg, "slack");
  const auto precision = cfg.at("precision").get<std::string>();
  if (precision == "extended") {
    opts.precision = AuditPrecision::extended;
  } else if (precision == "float64") {
    opts.precision = AuditPrecision::float64;
  } else {
    throw ValidationError("precision must be 'extended' or 'float64'");
  }
  const int trials = get_int(cfg, "trials");
  const std::uint64_t seed = get_seed(cfg);

  int passed = 0, cubic = 0, precondition = 0;
  json reports = json::array();
  for (int t = 0; t < trials; ++t) {
    SanConfig c = base;
    c.seed = seed + static_cast<std::uint64_t>(t);
    const SanParams params = init_params(c);
    Rng rng = input_rng(c.seed);
    TokenMatrix x;
    if (zero_input) {
      const Matrix row = rng.gaussian(1, c.d_model);
      x = row.replicate(c.tokens, 1);
    } else {
      x = rng.gaussian(c.tokens, c.d_model);
      x *= res0 / residual(x).composite_norm;
    }
    const BoundReport report = audit(x, params, opts);
    std::vector<double> res_log;
    for (const auto& l : report.layers) res_log.push_back(l.residual_log);
    const bool cubic_ok = cubic_signature(res_log);
    passed += report.all_pass() ? 1 : 0;
    cubic += cubic_ok ? 1 : 0;
    precondition += report.precondition_ok ? 1 : 0;
    json r = report.to_json();
    r["seed"] = c.seed;
    r["cubic_signature"] = cubic_ok;
    reports.push_back(std::move(r));
  }
  json out{{"variant", base.variant_name()},
           {"layers", base.depth},
           {"heads", base.heads},
           {"d_qk", base.d_qk},
           {"beta_target", base.init.value},
           {"res0", zero_input ? 0.0 : res0},
           {"trials", trials},
           {"passed", passed},
           {"cubic_signature", cubic},
           {"precondition_ok", precondition},
           {"reports", reports}};
  const auto path = out_path(ctx, "bounds", "report", "json");
  save_json(path, out);
  files.push_back(path);
  json summary = out;
  summary.erase("reports");
  return summary;
}

json paths_dist(const json& cfg, const RunContext& ctx, std::vector<std::string>& files) {
  const int layers = get_int(cfg, "layers");
  const int heads = get_int(cfg, "heads");
  const PathCensus census = path_census(layers, heads);
  const auto fractions = census.fractions();
  CsvWriter csv({"length", "count", "fraction"});
  double total = 0.0;
  for (std::size_t l = 0; l < census.counts.size(); ++l) {
    csv.add_row({std::to_string(l), census.counts[l].str(), format_double(fractions[l])});
    total += fractions[l];
  }
  const auto path = out_path(ctx, "paths-dist", "census", "csv");
  csv.write(path);
  files.push_back(path);
  return {{"layers", layers}, {"heads", heads}, {"total", census.total.str()}, {"fraction_sum", total}};
}

double gap(const TokenMatrix& x) { return (x.row(0) - x.row(1)).norm(); }

json circle_cmd(const json& cfg, const RunContext& ctx, std::vector<std::string>& files) {
  const int hidden = get_int(cfg, "dim");
  SanConfig c;
  c.apply_variant(cfg.at("variant").get<std::string>());
  c.depth = 1;
  c.heads = 1;
  c.tokens = 2;
  c.d_model = 2;
  c.d_qk = c.d_v = c.d_ff = hidden;
  c.init = InitScheme::parse(cfg.at("init").get<std::string>());
  c.seed = get_seed(cfg);

  TaskModel model;
  model.san = init_params(c);
  const CircleTask task = gen_circle_task(c.seed);
  const Batch data = task.batch();
  TrainConfig tc;
  tc.optimizer = parse_optimizer(cfg.at("optimizer").get<std::string>());
  tc.lr = get_double(cfg, "lr");
  tc.steps = get_int(cfg, "steps");
  tc.target_loss = get_double(cfg, "target_loss");
  tc.seed = c.seed;
  tc.loss = LossKind::mse;
  const TrainResult trained = train(model, data, tc);
  const double final_mse = plain_loss(model, data, LossKind::mse);

  RolloutOptions ro;
  ro.stop_on_nonfinite = true;
  const int rollout_steps = get_int(cfg, "rollout_steps", 0);
  const double threshold = get_double(cfg, "gap_threshold");
  const Rollout r = rollout_recurrent(model, task.pair(0), rollout_steps, ro);

  CsvWriter loss_csv({"step", "loss"});
  for (std::size_t s = 0; s < trained.loss.size(); ++s) loss_csv.add_row({std::to_string(s), format_double(trained.loss[s])});
  CsvWriter traj({"step", "x1", "y1", "x2", "y2"});
  json first_below = nullptr;
  for (std::size_t s = 0; s < r.states.size(); ++s) {
    const auto& x = r.states[s];
    traj.add_row({std::to_string(s), format_double(x(0, 0)), format_double(x(0, 1)), format_double(x(1, 0)),
                  format_double(x(1, 1))});
    if (first_below.is_null() && gap(x) <= threshold) first_below = s;
  }
  const auto loss_path = out_path(ctx, "circle", "loss", "csv");
  const auto traj_path = out_path(ctx, "circle", "trajectory", "csv");
  const auto params_path = out_path(ctx, "circle", "params", "json");
  loss_csv.write(loss_path);
  traj.write(traj_path);
  save_json(params_path, params_to_json(model.san));

  json summary{{"variant", c.variant_name()},
               {"hidden", hidden},
               {"train_steps", trained.loss.size()},
               {"reached_target", trained.reached_target},
               {"final_mse", final_mse},
               {"rollout_steps", rollout_steps},
               {"gap_threshold", threshold},
               {"first_step_gap_below", first_below},
               {"gap_at_end", r.diverged_at ? json(nullptr) : json(gap(r.states.back()))},
               {"diverged_at", r.diverged_at ? json(*r.diverged_at) : json(nullptr)},
               {"beta", beta(model.san)}};
  const auto summary_path = out_path(ctx, "circle", "summary", "json");
  save_json(summary_path, summary);
  files.insert(files.end(), {loss_path, traj_path, params_path, summary_path});
  return summary;
}

json task_model_to_json(const TaskModel& m) {
  json j = params_to_json(m.san);
  if (m.token_embedding) j["token_embedding"] = matrix_to_json(*m.token_embedding);
  if (m.position_embedding) j["position_embedding"] = matrix_to_json(*m.position_embedding);
  if (m.readout) {
    j["readout"] = matrix_to_json(*m.readout);
    j["readout_bias"] = vector_to_json(*m.readout_bias);
  }
  return j;
}

TaskModel task_model_from_json(const json& j) {
  TaskModel m;
  m.san = params_from_json(j);
  try {
    if (j.contains("token_embedding")) m.token_embedding = matrix_from_json(j["token_embedding"], "token_embedding");
    if (j.contains("position_embedding")) {
      m.position_embedding = matrix_from_json(j["position_embedding"], "position_embedding");
    }
    if (j.contains("readout")) {
      m.readout = matrix_from_json(j["readout"], "readout");
      m.readout_bias = vector_from_json(j.at("readout_bias"), "readout_bias");
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad model document: ") + e.what());
  }
  m.validate();
  return m;
}

int argmax_row(const Matrix& m, Eigen::Index i) {
  Eigen::Index best = 0;
  m.row(i).maxCoeff(&best);
  return static_cast<int>(best);
}

double accuracy(const Matrix& logits, const std::vector<int>& labels, Eigen::Index offset) {
  double hits = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    hits += argmax_row(logits, i) == labels[static_cast<std::size_t>(offset + i)] ? 1.0 : 0.0;
  }
  return hits;
}

json path_eff(const json& cfg, const RunContext& ctx, std::vector<std::string>& files) {
  SanConfig c;
  c.apply_variant(cfg.at("variant").get<std::string>());
  if (c.use_mlp || c.use_layernorm) throw ValidationError("path effectiveness needs san or san+skip");
  c.depth = get_int(cfg, "layers");
  c.heads = get_int(cfg, "heads");
  c.d_model = get_int(cfg, "dim");
  c.d_qk = get_int(cfg, "dqk");
  c.d_v = get_int(cfg, "dv");
  c.init = InitScheme::parse(cfg.at("init").get<std::string>());
  c.seed = get_seed(cfg);
  if (cfg.at("normalization").get<std::string>() != "mean") throw ValidationError("only mean normalization is supported");

  SortOptions so;
  so.alphabet = get_int(cfg, "alphabet");
  so.length = get_int(cfg, "length");
  so.train = get_int(cfg, "train");
  so.test = get_int(cfg, "test");
  c.tokens = so.length;
  const SortTask task = gen_sort_task(c.seed, so);
  const Batch train_data = task.train_batch();
  const Batch test_data = task.test_batch();

  TaskModel model;
  TrainResult trained;
  const auto model_path = cfg.at("model_path").get<std::string>();
  const bool load = !model_path.empty() && fs::exists(model_path);
  if (load) {
    model = task_model_from_json(load_json(model_path));
    if (model.san.config.depth != c.depth || model.san.config.heads != c.heads) {
      throw ValidationError("stored model does not match layers/heads");
    }
  } else {
    model.san = init_params(c);
    Rng rng = input_rng(c.seed);
    const double embed_sigma = get_double(cfg, "embed_init");
    model.token_embedding = rng.gaussian(so.alphabet, c.d_model, embed_sigma);
    model.position_embedding = rng.gaussian(so.length, c.d_model, embed_sigma);
    model.readout = rng.gaussian(c.d_model, so.length, 1.0 / std::sqrt(static_cast<double>(c.d_model)));
    model.readout_bias = Vector::Zero(so.length);
    TrainConfig tc;
    tc.optimizer = parse_optimizer(cfg.at("optimizer").get<std::string>());
    tc.lr = get_double(cfg, "lr");
    tc.steps = get_int(cfg, "steps");
    tc.batch_size = get_int(cfg, "batch_size", 0);
    tc.seed = c.seed;
    tc.loss = LossKind::cross_entropy;
    trained = train(model, train_data, tc);
  }

  const auto count = test_data.sequences();
  const double tokens_total = static_cast<double>(test_data.labels.size());
  const Matrix full_logits = plain_forward(model, test_data);
  const double full_acc = accuracy(full_logits, test_data.labels, 0) / tokens_total;
  const double train_acc =
      accuracy(plain_forward(model, train_data), train_data.labels, 0) / static_cast<double>(train_data.labels.size());

  // Majority label of the training set.
  std::vector<int> freq(static_cast<std::size_t>(so.length), 0);
  for (int y : train_data.labels) ++freq[static_cast<std::size_t>(y)];
  const int majority = static_cast<int>(std::max_element(freq.begin(), freq.end()) - freq.begin());
  double naive_hits = 0.0;
  for (int y : test_data.labels) naive_hits += y == majority ? 1.0 : 0.0;
  const double naive_acc = naive_hits / tokens_total;

  std::vector<TokenMatrix> inputs;
  std::vector<LayerTrace> traces;
  for (Eigen::Index b = 0; b < count; ++b) {
    inputs.push_back(embed_sequence(model, test_data, b));
    traces.push_back(forward(inputs.back(), model.san).trace);
  }

  const auto k_req = static_cast<std::uint64_t>(get_int(cfg, "k"));
  const int reps = get_int(cfg, "trials");
  const std::uint64_t seed = get_seed(cfg);
  const PathCensus census = path_census(c.depth, c.heads);
  CsvWriter csv({"kind", "length", "paths", "mean_accuracy", "std_accuracy"});
  json rows = json::array();
  json path_sets = json::object();
  for (int len = 0; len <= c.depth; ++len) {
    if (len < c.depth && !c.use_skip) continue;
    const BigInt available = census.counts[static_cast<std::size_t>(len)];
    const std::uint64_t k = available < BigInt(k_req) ? static_cast<std::uint64_t>(available) : k_req;
    std::vector<double> accs;
    json sets = json::array();
    for (int r = 0; r < reps; ++r) {
      const auto paths = sample_paths(c.depth, c.heads, len, k,
                                      seed + 7919ULL * static_cast<std::uint64_t>(len) + static_cast<std::uint64_t>(r));
      double hits = 0.0;
      for (Eigen::Index b = 0; b < count; ++b) {
        const Matrix logits = apply_readout(model, subset_output(traces[static_cast<std::size_t>(b)], model.san, paths,
                                                                 inputs[static_cast<std::size_t>(b)]));
        hits += accuracy(logits, test_data.labels, b * test_data.segment);
      }
      accs.push_back(hits / tokens_total);
      sets.push_back(paths_to_json(paths));
    }
    const auto [m, s] = mean_std(accs);
    csv.add_row({"subset", std::to_string(len), std::to_string(k), format_double(m), format_double(s)});
    rows.push_back({{"length", len}, {"paths", k}, {"mean", m}, {"std", s}});
    path_sets[std::to_string(len)] = std::move(sets);
  }
  csv.add_row({"full", "", "", format_double(full_acc), format_double(0.0)});
  csv.add_row({"naive", "", "", format_double(naive_acc), format_double(0.0)});

  const auto acc_path = out_path(ctx, "path-eff", "accuracy", "csv");
  const auto paths_path = out_path(ctx, "path-eff", "paths", "json");
  const auto params_path = out_path(ctx, "path-eff", "params", "json");
  csv.write(acc_path);
  save_json(paths_path, path_sets);
  save_json(params_path, task_model_to_json(model));
  files.insert(files.end(), {acc_path, paths_path, params_path});
  if (!load) {
    CsvWriter loss_csv({"step", "loss"});
    for (std::size_t s = 0; s < trained.loss.size(); ++s) loss_csv.add_row({std::to_string(s), format_double(trained.loss[s])});
    const auto loss_path = out_path(ctx, "path-eff", "loss", "csv");
    loss_csv.write(loss_path);
    files.push_back(loss_path);
  }
  json summary{{"trained", !load},
               {"train_accuracy", train_acc},
               {"test_accuracy", full_acc},
               {"naive_accuracy", naive_acc},
               {"subsets", rows}};
  const auto summary_path = out_path(ctx, "path-eff", "summary", "json");
  save_json(summary_path, summary);
  files.push_back(summary_path);
  return summary;
}

}  // namespace

RunResult run_subcommand(const std::string& sub, const json& config, const RunContext& ctx) {
  std::error_code ec;
  fs::create_directories(ctx.out_dir, ec);
  if (!fs::is_directory(ctx.out_dir)) throw ValidationError("output directory '" + ctx.out_dir + "' is not usable");

  RunResult result;
  if (sub == "collapse") {
    result.summary = collapse(config, ctx, result.files);
  } else if (sub == "decompose") {
    result.summary = decompose_cmd(config, ctx, result.files);
  } else if (sub == "bounds") {
    result.summary = bounds_cmd(config, ctx, result.files);
  } else if (sub == "paths-dist") {
    result.summary = paths_dist(config, ctx, result.files);
  } else if (sub == "circle") {
    result.summary = circle_cmd(config, ctx, result.files);
  } else if (sub == "path-eff") {
    result.summary = path_eff(config, ctx, result.files);
  } else {
    throw ValidationError("unknown subcommand '" + sub + "'");
  }

  json outputs = json::array();
  for (const auto& f : result.files) outputs.push_back(fs::path(f).filename().string());
  json manifest{{"subcommand", sub},
                {"seed", config.at("seed")},
                {"config_hash", config_hash(config)},
                {"config", config},
                {"config_file", ctx.config_path},
                {"overrides", ctx.overrides},
                {"artifact_versions", artifact_versions()},
                {"outputs", outputs},
                {"summary", result.summary}};
  const auto path = out_path(ctx, sub, "manifest", "json");
  save_json(path, manifest);
  result.files.push_back(path);
  return result;
}

RunResult run_experiment(const std::string& sub, const RunContext& ctx) {
  return run_subcommand(sub, resolve_config(sub, ctx.file_config, ctx.overrides), ctx);
}

}  // namespace rankprobe
