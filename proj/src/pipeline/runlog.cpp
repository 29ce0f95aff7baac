#include "endonet/pipeline/runlog.hpp"

#include <fstream>

#include "endonet/common/error.hpp"
#include "endonet/pipeline/config.hpp"

namespace endonet::pipeline {

RunLog::RunLog(std::filesystem::path path) : path_(std::move(path)) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
}

void RunLog::begin(const std::string& stage, std::uint64_t seed, const nlohmann::json& config) {
  start_ = std::chrono::steady_clock::now();
  append({{"event", "start"}, {"stage", stage}, {"seed", seed}, {"config_hash", config_hash(config)}, {"config", config}});
}

void RunLog::append(nlohmann::json record) {
  if (!record.contains("event")) record["event"] = "record";
  if (!path_.empty()) {
    std::ofstream os(path_, std::ios::app);
    if (!os) throw Error(ErrorCode::Io, "cannot append to run log " + path_.string());
    os << record.dump() << '\n';
  }
  records_.push_back(std::move(record));
}

void RunLog::end(nlohmann::json summary) {
  summary["event"] = "end";
  summary["wall_clock_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  append(std::move(summary));
}

std::vector<nlohmann::json> read_runlog(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::Io, "cannot open run log " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::MalformedInput, path.string() + " line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

namespace {

void strip_wall_clock(nlohmann::json& j) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end();) {
      if (it.key().size() > 2 && it.key().ends_with("_s")) {
        it = j.erase(it);
      } else {
        strip_wall_clock(*it);
        ++it;
      }
    }
  } else if (j.is_array()) {
    for (auto& v : j) strip_wall_clock(v);
  }
}

}  // namespace

std::vector<nlohmann::json> reproducible_view(const std::vector<nlohmann::json>& records) {
  auto out = records;
  for (auto& r : out) strip_wall_clock(r);
  return out;
}

}  // namespace endonet::pipeline
