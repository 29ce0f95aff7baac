#include "endonet/wsi/slide.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "endonet/common/error.hpp"

namespace endonet::wsi {

using nlohmann::json;

namespace {

bool near_integer(double f) { return std::abs(f - std::round(f)) < 1e-9; }

std::size_t scaled_dim(std::size_t n, double factor) {
  return static_cast<std::size_t>(std::llround(static_cast<double>(n) / factor));
}

}  // namespace

Slide load_slide(const std::filesystem::path& dir) {
  const std::filesystem::path meta = dir / "slide.json";
  std::ifstream in(meta);
  if (!in) throw Error(ErrorCode::MissingLevel, "missing " + meta.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedInput, meta.string() + ": " + e.what());
  }
  Slide s;
  s.dir = dir;
  try {
    s.slide_id = j.at("slide_id").get<std::string>();
    s.mpp = j.at("mpp").get<double>();
    s.width = j.at("width").get<std::size_t>();
    s.height = j.at("height").get<std::size_t>();
    for (const auto& lv : j.at("levels")) {
      SlideLevel l;
      l.mpp = lv.at("mpp").get<double>();
      l.file = lv.at("file").get<std::string>();
      s.levels.push_back(l);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedInput, meta.string() + ": " + e.what());
  }
  if (!(s.mpp > 0.0)) throw Error(ErrorCode::InvalidMpp, s.slide_id + ": mpp must be positive");
  if (s.levels.empty()) throw Error(ErrorCode::MissingLevel, s.slide_id + ": no levels listed");
  for (std::size_t k = 0; k < s.levels.size(); ++k) {
    SlideLevel& l = s.levels[k];
    if (!(l.mpp > 0.0)) {
      throw Error(ErrorCode::InvalidMpp, s.slide_id + ": level " + std::to_string(k) + " mpp must be positive");
    }
    if (k == 0 && std::abs(l.mpp - s.mpp) > 1e-12) {
      throw Error(ErrorCode::InvalidMpp, s.slide_id + ": level 0 mpp differs from slide mpp");
    }
    if (k > 0 && l.mpp < s.levels[k - 1].mpp) {
      throw Error(ErrorCode::InvalidMpp, s.slide_id + ": level mpp must be non-decreasing");
    }
    const std::filesystem::path file = dir / l.file;
    if (!std::filesystem::exists(file)) {
      throw Error(ErrorCode::MissingLevel, s.slide_id + ": missing level file " + file.string());
    }
    const PngInfo info = read_png_info(file);
    l.width = info.width;
    l.height = info.height;
    const double ratio = s.mpp / l.mpp;
    const double ew = static_cast<double>(s.width) * ratio, eh = static_cast<double>(s.height) * ratio;
    if (std::abs(static_cast<double>(l.width) - ew) > 1.0 || std::abs(static_cast<double>(l.height) - eh) > 1.0) {
      throw Error(ErrorCode::DimensionMismatch,
                  s.slide_id + ": level " + std::to_string(k) + " is " + std::to_string(l.width) + "x" +
                      std::to_string(l.height) + ", expected about " + std::to_string(ew) + "x" +
                      std::to_string(eh));
    }
  }
  return s;
}

Image read_level(const Slide& slide, std::size_t level) {
  if (level >= slide.levels.size()) {
    throw Error(ErrorCode::MissingLevel, slide.slide_id + ": no level " + std::to_string(level));
  }
  Image img = read_png(slide.dir / slide.levels[level].file);
  const SlideLevel& l = slide.levels[level];
  if (img.width != l.width || img.height != l.height) {
    throw Error(ErrorCode::DimensionMismatch, slide.slide_id + ": level changed on disk");
  }
  return img;
}

void write_slide(const std::filesystem::path& dir, const std::string& slide_id,
                 const std::vector<Image>& planes, const std::vector<double>& mpps) {
  if (planes.empty() || planes.size() != mpps.size()) {
    throw Error(ErrorCode::InvalidArgument, "write_slide: need one mpp per plane");
  }
  std::filesystem::create_directories(dir);
  json j;
  j["slide_id"] = slide_id;
  j["mpp"] = mpps[0];
  j["width"] = planes[0].width;
  j["height"] = planes[0].height;
  j["levels"] = json::array();
  for (std::size_t k = 0; k < planes.size(); ++k) {
    const std::string file = "level_" + std::to_string(k) + ".png";
    write_png(dir / file, planes[k]);
    j["levels"].push_back({{"mpp", mpps[k]}, {"file", file}});
  }
  std::ofstream out(dir / "slide.json", std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + (dir / "slide.json").string());
  out << j.dump(2) << '\n';
}

Image downsample_plane(const Image& plane, double factor) {
  if (plane.empty()) throw Error(ErrorCode::InvalidArgument, "downsample: empty plane");
  if (!(factor >= 1.0 - 1e-12)) {
    throw Error(ErrorCode::InvalidMpp, "downsample: factor " + std::to_string(factor) + " < 1");
  }
  const std::size_t ow = std::max<std::size_t>(1, scaled_dim(plane.width, factor));
  const std::size_t oh = std::max<std::size_t>(1, scaled_dim(plane.height, factor));
  if (near_integer(factor)) {
    const std::size_t f = static_cast<std::size_t>(std::llround(factor));
    if (f == 1) return plane;
    Image out(ow, oh);
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const std::size_t y0 = oy * f, y1 = std::min(plane.height, y0 + f);
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t x0 = ox * f, x1 = std::min(plane.width, x0 + f);
        unsigned sum[3] = {0, 0, 0};
        for (std::size_t y = y0; y < y1; ++y) {
          for (std::size_t x = x0; x < x1; ++x) {
            const std::uint8_t* p = plane.px(x, y);
            sum[0] += p[0];
            sum[1] += p[1];
            sum[2] += p[2];
          }
        }
        const unsigned n = static_cast<unsigned>((y1 - y0) * (x1 - x0));
        std::uint8_t* o = out.px(ox, oy);
        for (int c = 0; c < 3; ++c) o[c] = static_cast<std::uint8_t>((2 * sum[c] + n) / (2 * n));
      }
    }
    return out;
  }
  // bilinear with pixel-centre alignment
  Image out(ow, oh);
  const double sx = static_cast<double>(plane.width) / static_cast<double>(ow);
  const double sy = static_cast<double>(plane.height) / static_cast<double>(oh);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    const double fy = std::clamp((static_cast<double>(oy) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(plane.height - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, plane.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t ox = 0; ox < ow; ++ox) {
      const double fx = std::clamp((static_cast<double>(ox) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(plane.width - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, plane.width - 1);
      const double wx = fx - static_cast<double>(x0);
      std::uint8_t* o = out.px(ox, oy);
      for (int c = 0; c < 3; ++c) {
        const double top = plane.px(x0, y0)[c] * (1.0 - wx) + plane.px(x1, y0)[c] * wx;
        const double bot = plane.px(x0, y1)[c] * (1.0 - wx) + plane.px(x1, y1)[c] * wx;
        const double v = top * (1.0 - wy) + bot * wy;
        o[c] = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
      }
    }
  }
  return out;
}

Image downsample_to_target(const Slide& slide, double target_mpp) {
  if (!(target_mpp > 0.0)) throw Error(ErrorCode::InvalidMpp, "target mpp must be positive");
  if (target_mpp < slide.mpp - 1e-12) {
    throw Error(ErrorCode::InvalidMpp, slide.slide_id + ": target " + std::to_string(target_mpp) +
                                           " mpp is finer than level 0 (" + std::to_string(slide.mpp) + ")");
  }
  std::size_t best = 0;
  for (std::size_t k = 0; k < slide.levels.size(); ++k) {
    if (slide.levels[k].mpp <= target_mpp + 1e-12) best = k;
  }
  return downsample_plane(read_level(slide, best), target_mpp / slide.levels[best].mpp);
}

}  // namespace endonet::wsi
