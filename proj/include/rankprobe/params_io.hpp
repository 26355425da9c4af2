#pragma once

// JSON round trip for SanParams. Matrices are row-major nested arrays, vectors
// flat arrays. Doubles are written in shortest round-trip form, so a
// save/load cycle reproduces every value bit for bit.

#include "rankprobe/san.hpp"

#include <json.hpp>

#include <string>

namespace rankprobe {

using json = nlohmann::json;

json matrix_to_json(const Matrix& m);
json vector_to_json(const Vector& v);
Matrix matrix_from_json(const json& j, const std::string& name);
Vector vector_from_json(const json& j, const std::string& name);

json config_to_json(const SanConfig& config);
SanConfig config_from_json(const json& j);

json params_to_json(const SanParams& params);
// Validates the result; throws ValidationError / ShapeError on bad input.
SanParams params_from_json(const json& j);

void save_json(const std::string& path, const json& j);
json load_json(const std::string& path);

}  // namespace rankprobe
