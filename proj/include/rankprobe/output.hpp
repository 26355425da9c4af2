#pragma once

// CSV (RFC 4180: CRLF line ends, quoted fields when needed, header row) and
// the run manifest written next to every experiment output.

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace rankprobe {

// 17 significant digits; "inf", "-inf", "nan" for non-finite values.
std::string format_double(double v);

std::string csv_escape(const std::string& field);

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);

  void add_row(std::vector<std::string> fields);
  std::string str() const;
  void write(const std::string& path) const;

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

// 64-bit FNV-1a.
std::uint64_t fnv1a64(const std::string& bytes);
std::string hex64(std::uint64_t v);

// Hash of the canonical (key-sorted, compact) dump.
std::string config_hash(const nlohmann::json& config);

inline constexpr const char* kArtifactName = "rankprobe";
inline constexpr const char* kArtifactVersion = "0.1.0";

nlohmann::json artifact_versions();

void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

}  // namespace rankprobe
