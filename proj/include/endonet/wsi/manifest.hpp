#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace endonet::wsi {

enum class Subtype { EndometrioidG1, EndometrioidG2, EndometrioidG3, Serous, Carcinosarcoma };
enum class Grade { Low, High };
enum class Split { train, val, test, external };

inline constexpr std::array<Subtype, 5> kAllSubtypes = {
    Subtype::EndometrioidG1, Subtype::EndometrioidG2, Subtype::EndometrioidG3, Subtype::Serous,
    Subtype::Carcinosarcoma};

/// G1, G2 -> Low; G3, Serous, Carcinosarcoma -> High.
constexpr Grade grade_of(Subtype s) noexcept {
  return (s == Subtype::EndometrioidG1 || s == Subtype::EndometrioidG2) ? Grade::Low : Grade::High;
}

std::string_view subtype_name(Subtype s) noexcept;
std::string_view grade_name(Grade g) noexcept;
std::string_view split_name(Split s) noexcept;
/// Parsers throw MalformedInput on unknown names.
Subtype parse_subtype(std::string_view name);
Grade parse_grade(std::string_view name);
Split parse_split(std::string_view name);

struct ManifestEntry {
  std::string slide_id;
  std::string patient_id;
  std::filesystem::path path;
  Subtype subtype = Subtype::EndometrioidG1;
  Grade grade = Grade::Low;
  std::optional<Split> split;  // absent until split_dataset assigns one
  double mpp = 1.0;

  bool operator==(const ManifestEntry&) const = default;
};

using Manifest = std::vector<ManifestEntry>;

/// JSON-lines, one entry per line. Reading validates mpp > 0 and that grade
/// matches the subtype; relative paths resolve against the manifest's
/// directory. Errors carry the 1-based line number.
Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir = {});
std::string format_manifest_line(const ManifestEntry& entry);

struct AnnotationBox {
  std::string slide_id;
  long x = 0;  // level-0 px
  long y = 0;
  long w = 0;
  long h = 0;
  Subtype label = Subtype::EndometrioidG1;

  bool operator==(const AnnotationBox&) const = default;
};

std::vector<AnnotationBox> read_annotations(const std::filesystem::path& path);
void write_annotations(const std::filesystem::path& path, const std::vector<AnnotationBox>& boxes);

}  // namespace endonet::wsi
