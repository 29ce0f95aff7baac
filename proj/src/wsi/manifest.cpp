#include "endonet/wsi/manifest.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "endonet/common/error.hpp"

namespace endonet::wsi {

using nlohmann::json;

std::string_view subtype_name(Subtype s) noexcept {
  switch (s) {
    case Subtype::EndometrioidG1: return "EndometrioidG1";
    case Subtype::EndometrioidG2: return "EndometrioidG2";
    case Subtype::EndometrioidG3: return "EndometrioidG3";
    case Subtype::Serous: return "Serous";
    case Subtype::Carcinosarcoma: return "Carcinosarcoma";
  }
  return "?";
}

std::string_view grade_name(Grade g) noexcept { return g == Grade::Low ? "Low" : "High"; }

std::string_view split_name(Split s) noexcept {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::external: return "external";
  }
  return "?";
}

Subtype parse_subtype(std::string_view name) {
  for (Subtype s : kAllSubtypes) {
    if (subtype_name(s) == name) return s;
  }
  throw Error(ErrorCode::MalformedInput, "unknown subtype '" + std::string(name) + "'");
}

Grade parse_grade(std::string_view name) {
  if (name == "Low") return Grade::Low;
  if (name == "High") return Grade::High;
  throw Error(ErrorCode::MalformedInput, "unknown grade '" + std::string(name) + "'");
}

Split parse_split(std::string_view name) {
  for (Split s : {Split::train, Split::val, Split::test, Split::external}) {
    if (split_name(s) == name) return s;
  }
  throw Error(ErrorCode::MalformedInput, "unknown split '" + std::string(name) + "'");
}

namespace {

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::Io, "write failed for " + path.string());
}

// Calls fn(line_json, line_number) for each non-blank line.
template <typename Fn>
void for_each_json_line(std::string_view text, std::string_view what, Fn&& fn) {
  std::size_t line_no = 0, pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    ++line_no;
    pos = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
      if (end == text.size()) break;
      continue;
    }
    try {
      fn(json::parse(line), line_no);
    } catch (const json::exception& e) {
      throw Error(ErrorCode::MalformedInput,
                  std::string(what) + " line " + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(e.code(), std::string(what) + " line " + std::to_string(line_no) + ": " + e.detail());
    }
    if (end == text.size()) break;
  }
}

}  // namespace

Manifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir) {
  Manifest out;
  for_each_json_line(text, "manifest", [&](const json& j, std::size_t) {
    ManifestEntry e;
    e.slide_id = j.at("slide_id").get<std::string>();
    e.patient_id = j.at("patient_id").get<std::string>();
    std::filesystem::path p = j.at("path").get<std::string>();
    e.path = (p.is_relative() && !base_dir.empty()) ? base_dir / p : p;
    e.subtype = parse_subtype(j.at("subtype").get<std::string>());
    e.grade = parse_grade(j.at("grade").get<std::string>());
    if (e.grade != grade_of(e.subtype)) {
      throw Error(ErrorCode::MalformedInput, "grade " + std::string(grade_name(e.grade)) +
                                                 " contradicts subtype " +
                                                 std::string(subtype_name(e.subtype)));
    }
    if (j.contains("split") && !j.at("split").is_null()) {
      e.split = parse_split(j.at("split").get<std::string>());
    }
    e.mpp = j.at("mpp").get<double>();
    if (!(e.mpp > 0.0)) throw Error(ErrorCode::InvalidMpp, "mpp must be positive");
    if (e.slide_id.empty() || e.patient_id.empty()) {
      throw Error(ErrorCode::MalformedInput, "slide_id and patient_id must be non-empty");
    }
    out.push_back(std::move(e));
  });
  return out;
}

Manifest read_manifest(const std::filesystem::path& path) {
  return parse_manifest(read_text(path), path.parent_path());
}

std::string format_manifest_line(const ManifestEntry& e) {
  json j;
  j["slide_id"] = e.slide_id;
  j["patient_id"] = e.patient_id;
  j["path"] = e.path.string();
  j["subtype"] = subtype_name(e.subtype);
  j["grade"] = grade_name(e.grade);
  j["split"] = e.split ? json(split_name(*e.split)) : json(nullptr);
  j["mpp"] = e.mpp;
  return j.dump();
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  const std::filesystem::path base = path.parent_path();
  std::string text;
  for (ManifestEntry e : manifest) {
    if (!base.empty() && e.path.is_absolute()) {
      std::filesystem::path rel = e.path.lexically_relative(base);
      if (!rel.empty() && *rel.begin() != "..") e.path = rel;
    }
    text += format_manifest_line(e);
    text += '\n';
  }
  write_text(path, text);
}

std::vector<AnnotationBox> read_annotations(const std::filesystem::path& path) {
  std::vector<AnnotationBox> out;
  for_each_json_line(read_text(path), "annotations", [&](const json& j, std::size_t) {
    AnnotationBox b;
    b.slide_id = j.at("slide_id").get<std::string>();
    b.x = j.at("x").get<long>();
    b.y = j.at("y").get<long>();
    b.w = j.at("w").get<long>();
    b.h = j.at("h").get<long>();
    b.label = parse_subtype(j.at("label").get<std::string>());
    out.push_back(std::move(b));
  });
  return out;
}

void write_annotations(const std::filesystem::path& path, const std::vector<AnnotationBox>& boxes) {
  std::string text;
  for (const auto& b : boxes) {
    json j;
    j["slide_id"] = b.slide_id;
    j["x"] = b.x;
    j["y"] = b.y;
    j["w"] = b.w;
    j["h"] = b.h;
    j["label"] = subtype_name(b.label);
    text += j.dump();
    text += '\n';
  }
  write_text(path, text);
}

}  // namespace endonet::wsi
