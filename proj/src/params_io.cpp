#include "rankprobe/params_io.hpp"

#include "rankprobe/errors.hpp"

#include <fstream>

namespace rankprobe {

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

json vector_to_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

Matrix matrix_from_json(const json& j, const std::string& name) {
  if (!j.is_array()) throw ValidationError(name + ": expected an array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows > 0 && j[0].is_array() ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      throw ShapeError(name + ": ragged matrix");
    }
    for (Eigen::Index c = 0; c < cols; ++c) {
      const auto& v = row[static_cast<std::size_t>(c)];
      if (!v.is_number()) throw ValidationError(name + ": non-numeric entry");
      m(i, c) = v.get<double>();
    }
  }
  return m;
}

Vector vector_from_json(const json& j, const std::string& name) {
  if (!j.is_array()) throw ValidationError(name + ": expected an array");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ValidationError(name + ": non-numeric entry");
    v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  }
  return v;
}

json config_to_json(const SanConfig& c) {
  return json{{"depth", c.depth},
              {"heads", c.heads},
              {"tokens", c.tokens},
              {"d_model", c.d_model},
              {"d_qk", c.d_qk},
              {"d_v", c.d_v},
              {"d_ff", c.d_ff},
              {"use_skip", c.use_skip},
              {"use_mlp", c.use_mlp},
              {"use_layernorm", c.use_layernorm},
              {"init", c.init.to_string()},
              {"seed", c.seed}};
}

SanConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  SanConfig c;
  try {
    c.depth = j.at("depth").get<int>();
    c.heads = j.at("heads").get<int>();
    c.tokens = j.at("tokens").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_qk = j.at("d_qk").get<int>();
    c.d_v = j.at("d_v").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.use_skip = j.at("use_skip").get<bool>();
    c.use_mlp = j.at("use_mlp").get<bool>();
    c.use_layernorm = j.at("use_layernorm").get<bool>();
    c.init = InitScheme::parse(j.at("init").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

json ln_to_json(const LayerNormParams& ln) {
  return json{{"gain", vector_to_json(ln.gain)}, {"bias", vector_to_json(ln.bias)}};
}

LayerNormParams ln_from_json(const json& j, const std::string& name) {
  return LayerNormParams{vector_from_json(j.at("gain"), name + ".gain"),
                         vector_from_json(j.at("bias"), name + ".bias")};
}

}  // namespace

json params_to_json(const SanParams& params) {
  json layers = json::array();
  for (const auto& layer : params.layers) {
    json heads = json::array();
    for (const auto& h : layer.heads) {
      heads.push_back(json{{"W_QK", matrix_to_json(h.w_qk)},
                           {"b_QK", vector_to_json(h.b_qk)},
                           {"W_V", matrix_to_json(h.w_v)},
                           {"W_O", matrix_to_json(h.w_o)}});
    }
    json l{{"heads", std::move(heads)}, {"b_O", vector_to_json(layer.b_o)}};
    if (layer.mlp) {
      l["mlp"] = json{{"W_1", matrix_to_json(layer.mlp->w1)},
                      {"b_1", vector_to_json(layer.mlp->b1)},
                      {"W_2", matrix_to_json(layer.mlp->w2)},
                      {"b_2", vector_to_json(layer.mlp->b2)}};
    }
    if (layer.ln_attention) {
      json ln{{"attention", ln_to_json(*layer.ln_attention)}};
      if (layer.ln_mlp) ln["mlp"] = ln_to_json(*layer.ln_mlp);
      l["ln"] = std::move(ln);
    }
    layers.push_back(std::move(l));
  }
  return json{{"config", config_to_json(params.config)}, {"layers", std::move(layers)}};
}

SanParams params_from_json(const json& j) {
  SanParams params;
  try {
    params.config = config_from_json(j.at("config"));
    for (const auto& l : j.at("layers")) {
      const std::string at = "layer " + std::to_string(params.layers.size());
      LayerParams layer;
      for (const auto& h : l.at("heads")) {
        layer.heads.push_back(HeadParams{matrix_from_json(h.at("W_QK"), at + " W_QK"),
                                         vector_from_json(h.at("b_QK"), at + " b_QK"),
                                         matrix_from_json(h.at("W_V"), at + " W_V"),
                                         matrix_from_json(h.at("W_O"), at + " W_O")});
      }
      layer.b_o = vector_from_json(l.at("b_O"), at + " b_O");
      if (l.contains("mlp")) {
        const auto& m = l["mlp"];
        layer.mlp = MlpParams{matrix_from_json(m.at("W_1"), at + " W_1"),
                              vector_from_json(m.at("b_1"), at + " b_1"),
                              matrix_from_json(m.at("W_2"), at + " W_2"),
                              vector_from_json(m.at("b_2"), at + " b_2")};
      }
      if (l.contains("ln")) {
        const auto& ln = l["ln"];
        layer.ln_attention = ln_from_json(ln.at("attention"), at + " ln.attention");
        if (ln.contains("mlp")) layer.ln_mlp = ln_from_json(ln["mlp"], at + " ln.mlp");
      }
      params.layers.push_back(std::move(layer));
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad parameter document: ") + e.what());
  }
  params.validate();
  return params;
}

void save_json(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path);
  out << j.dump(2) << '\n';
  if (!out) throw ValidationError("failed writing " + path);
}

json load_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

}  // namespace rankprobe
