#include <doctest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include <json.hpp>

#include "endonet/common/rng.hpp"
#include "temp_dir.hpp"

using endonet::testing::TempDir;
using nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

Result run(const std::string& args, const TempDir& dir) {
  const auto err_path = dir / "stderr.txt";
  const std::string cmd = std::string(ENDONET_CLI) + " " + args + " 2>" + err_path.string();
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream is(err_path);
  std::stringstream ss;
  ss << is.rdbuf();
  r.err = ss.str();
  return r;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write(const std::filesystem::path& p, const std::string& text) { std::ofstream(p) << text; }

std::uint64_t tree_hash(const std::filesystem::path& root) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && e.path().filename() != "runlog.jsonl") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += f.lexically_relative(root).string() + "\n" + slurp(f);
  return endonet::fnv1a64(all);
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  TempDir dir("cli");
  CHECK(run("", dir).code == 2);
  CHECK(run("frobnicate", dir).code == 2);
  CHECK(run("evaluate", dir).code == 2);
  CHECK(run("evaluate --pred x.jsonl --iterations many", dir).code == 2);
  CHECK(run("--help", dir).code == 0);
}

TEST_CASE("domain errors exit with 1 and one JSON object on stderr") {
  TempDir dir("cli");
  write(dir / "empty.jsonl", "");
  auto r = run("evaluate --pred " + (dir / "empty.jsonl").string() + " --out " + (dir / "ev").string(), dir);
  CHECK(r.code == 1);
  const auto j = json::parse(r.err);
  CHECK(j["error"] == "EmptyInput");
  CHECK(j["command"] == "evaluate");
  CHECK(r.err.find('\n') == r.err.size() - 1);

  write(dir / "bad.jsonl",
        R"({"slide_id":"a","patient_id":"p","path":"a","subtype":"Serous","grade":"High","mpp":1.0})"
        "\n"
        R"({"slide_id":"b","patient_id":"q","path":"b","subtype":"Serous","grade":"Low","mpp":1.0})"
        "\n");
  r = run("split --manifest " + (dir / "bad.jsonl").string() + " --out " + (dir / "sp").string(), dir);
  CHECK(r.code == 1);
  const auto k = json::parse(r.err);
  CHECK(k["error"] == "MalformedInput");
  CHECK(k["message"].get<std::string>().find("line 2") != std::string::npos);
}

TEST_CASE("evaluate writes report, tables and ROC curve") {
  TempDir dir("cli");
  std::string preds;
  for (int i = 0; i < 12; ++i) {
    const bool high = i % 3 == 0;
    preds += json{{"slide_id", "s" + std::to_string(i)},
                  {"subtype", high ? "Serous" : "EndometrioidG1"},
                  {"true_grade", high ? "High" : "Low"},
                  {"prob_high", high ? 0.6 + 0.01 * i : 0.05 * i}}
                 .dump() +
             "\n";
  }
  write(dir / "preds.jsonl", preds);
  const auto r = run("evaluate --pred " + (dir / "preds.jsonl").string() + " --iterations 10000 --seed 1 --out " +
                         (dir / "report.json").string(),
                     dir);
  REQUIRE(r.code == 0);
  const auto rep = json::parse(slurp(dir / "report.json"));
  CHECK(rep["iterations"] == 10000);
  CHECK(rep["f1"].contains("point"));
  CHECK(rep["f1"]["ci95"].size() == 2);
  CHECK(rep["auc"]["ci95"].size() == 2);
  CHECK(slurp(dir / "report_tables.txt").find("Carcinosarcoma    NA") != std::string::npos);
  CHECK(slurp(dir / "report_roc.csv").rfind("fpr,tpr,threshold", 0) == 0);
  const auto log = slurp(dir / "runlog.jsonl");
  const auto first = json::parse(log.substr(0, log.find('\n')));
  CHECK(first["seed"] == 1);
  CHECK(first["config_hash"].get<std::string>().size() == 16);
}

TEST_CASE("synth honors counts and is reproducible in deterministic mode") {
  TempDir dir("cli");
  const std::string args = " --n 4 --high-fraction 0.5 --seed 7 --deterministic";
  const auto a = run("synth --out " + (dir / "a").string() + args, dir);
  const auto b = run("synth --out " + (dir / "b").string() + args, dir);
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  std::ifstream is(dir / "a" / "manifest.jsonl");
  std::string line;
  int high = 0, total = 0;
  while (std::getline(is, line)) {
    ++total;
    high += json::parse(line)["grade"] == "High";
  }
  CHECK(total == 4);
  CHECK(high == 2);
  CHECK(tree_hash(dir / "a") == tree_hash(dir / "b"));
  CHECK(std::filesystem::exists(dir / "a" / "annotations.jsonl"));
}
