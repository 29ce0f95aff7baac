#pragma once

#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace endonet::pipeline {

/// Append-only JSON-lines log. Every record carries "event"; the first one
/// written by begin() holds the stage, seed, config and its hash.
/// Wall-clock fields are named "*_s" and are the only non-reproducible
/// values.
class RunLog {
 public:
  RunLog() = default;  // in-memory only
  explicit RunLog(std::filesystem::path path);

  void begin(const std::string& stage, std::uint64_t seed, const nlohmann::json& config);
  void append(nlohmann::json record);
  void end(nlohmann::json summary = nlohmann::json::object());

  const std::vector<nlohmann::json>& records() const noexcept { return records_; }
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
  std::vector<nlohmann::json> records_;
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::vector<nlohmann::json> read_runlog(const std::filesystem::path& path);

/// Records with every wall-clock ("*_s") field removed, for reproducibility
/// comparisons.
std::vector<nlohmann::json> reproducible_view(const std::vector<nlohmann::json>& records);

}  // namespace endonet::pipeline
