#include "endonet/viz/attention.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "endonet/common/error.hpp"
#include "endonet/common/parallel.hpp"

namespace endonet::viz {

std::string aggregation_name(Aggregation a) { return a == Aggregation::rollout ? "rollout" : "last_layer"; }

Aggregation parse_aggregation(const std::string& name) {
  if (name == "last_layer") return Aggregation::last_layer;
  if (name == "rollout") return Aggregation::rollout;
  throw Error(ErrorCode::InvalidArgument, "unknown attention aggregation '" + name + "'");
}

namespace {

/// Head-averaged [S,S] matrix of one captured layer, in double.
std::vector<double> head_mean(const std::vector<tensor::TensorF>& heads, std::size_t s) {
  std::vector<double> out(s * s, 0.0);
  for (const auto& h : heads) {
    if (h.rank() != 2 || h.dim(0) != s || h.dim(1) != s) {
      throw Error(ErrorCode::ShapeMismatch, "attention matrix does not match the sequence length");
    }
    const auto d = h.data();
    for (std::size_t i = 0; i < s * s; ++i) out[i] += static_cast<double>(d[i]);
  }
  const double inv = 1.0 / static_cast<double>(heads.size());
  for (auto& v : out) v *= inv;
  return out;
}

}  // namespace

PatchScores class_token_attention(const model::AttentionTrace& trace, const features::FeatureBundle& bundle,
                                  Aggregation aggregation, std::size_t grid_rows, std::size_t grid_cols) {
  if (trace.empty() || trace.attention.back().empty()) {
    throw Error(ErrorCode::InvalidArgument, "no attention trace recorded for region " + bundle.region_id);
  }
  const std::size_t s = bundle.n + 1;
  std::vector<double> cls_row(s, 0.0);
  PatchScores out;
  if (aggregation == Aggregation::last_layer) {
    const auto mean = head_mean(trace.attention.back(), s);
    std::copy(mean.begin(), mean.begin() + static_cast<std::ptrdiff_t>(s), cls_row.begin());
    out.layer = trace.layer_index.back();
  } else {
    for (std::size_t i = 0; i < trace.layer_index.size(); ++i) {
      if (trace.layer_index[i] != i) {
        throw Error(ErrorCode::InvalidArgument, "attention rollout needs every layer in the trace");
      }
    }
    // only the class-token row of the running product is needed
    std::vector<double> row(s, 0.0);
    row[0] = 1.0;
    for (const auto& layer : trace.attention) {
      const auto a = head_mean(layer, s);
      std::vector<double> next(s, 0.0);
      for (std::size_t k = 0; k < s; ++k) {
        if (row[k] == 0.0) continue;
        for (std::size_t j = 0; j < s; ++j) next[j] += row[k] * 0.5 * a[k * s + j];
        next[k] += row[k] * 0.5;
      }
      row = std::move(next);
    }
    cls_row = row;
    out.layer = trace.layer_index.back();
  }
  out.rows = grid_rows;
  out.cols = grid_cols;
  out.score.assign(grid_rows * grid_cols, 0.0);
  out.valid.assign(grid_rows * grid_cols, 0);
  for (std::size_t i = 0; i < bundle.n; ++i) {
    if (bundle.padding[i]) continue;
    const auto& p = bundle.positions[i];
    if (p.row >= grid_rows || p.col >= grid_cols) throw Error(ErrorCode::ShapeMismatch, "bundle position outside the grid");
    const std::size_t slot = p.row * grid_cols + p.col;
    out.score[slot] = cls_row[i + 1];
    out.valid[slot] = 1;
  }
  return out;
}

AttentionCanvas normalize_and_stitch(const std::vector<RegionAttention>& regions, std::size_t plane_width,
                                     std::size_t plane_height, std::size_t cell_px) {
  if (cell_px == 0) throw Error(ErrorCode::InvalidArgument, "cell size must be > 0");
  AttentionCanvas c;
  c.plane_width = plane_width;
  c.plane_height = plane_height;
  c.cell_px = cell_px;
  c.cols = (plane_width + cell_px - 1) / cell_px;
  c.rows = (plane_height + cell_px - 1) / cell_px;
  c.raw.assign(c.cols * c.rows, 0.0);
  c.value.assign(c.cols * c.rows, 0.0);
  c.valid.assign(c.cols * c.rows, 0);
  std::vector<std::size_t> count(c.cols * c.rows, 0);
  for (const auto& r : regions) {
    const long patch = static_cast<long>(r.region.patch_um());
    if (static_cast<std::size_t>(patch) != cell_px || r.region.origin_x % patch != 0 || r.region.origin_y % patch != 0 ||
        r.region.origin_x < 0 || r.region.origin_y < 0) {
      throw Error(ErrorCode::InvalidArgument, "region " + r.region.id() + " is not aligned to the patch grid");
    }
    const std::size_t c0 = static_cast<std::size_t>(r.region.origin_x / patch);
    const std::size_t r0 = static_cast<std::size_t>(r.region.origin_y / patch);
    for (std::size_t gr = 0; gr < r.scores.rows; ++gr) {
      for (std::size_t gc = 0; gc < r.scores.cols; ++gc) {
        const std::size_t slot = gr * r.scores.cols + gc;
        if (!r.scores.valid[slot] || c0 + gc >= c.cols || r0 + gr >= c.rows) continue;
        const std::size_t i = c.index(c0 + gc, r0 + gr);
        c.raw[i] += r.scores.score[slot];
        ++count[i];
      }
    }
  }
  bool any = false;
  for (std::size_t i = 0; i < c.raw.size(); ++i) {
    if (!count[i]) continue;
    c.raw[i] /= static_cast<double>(count[i]);
    c.valid[i] = 1;
    c.min = any ? std::min(c.min, c.raw[i]) : c.raw[i];
    c.max = any ? std::max(c.max, c.raw[i]) : c.raw[i];
    any = true;
  }
  const double span = c.max - c.min;
  for (std::size_t i = 0; i < c.raw.size(); ++i) {
    if (!c.valid[i]) continue;
    c.value[i] = span > 0 ? (c.raw[i] - c.min) / span : 0.5;
  }
  return c;
}

std::array<double, 3> colormap(double t) {
  t = std::clamp(t, 0.0, 1.0);
  if (t <= 0.5) {
    const double u = t / 0.5;
    return {128.0 * u, 0.0, 255.0 + (128.0 - 255.0) * u};
  }
  const double u = (t - 0.5) / 0.5;
  return {128.0 + (255.0 - 128.0) * u, 0.0, 128.0 * (1.0 - u)};
}

wsi::Image render_heatmap(const wsi::Image& plane, const AttentionCanvas& canvas, double alpha,
                          const wsi::TissueMask* tissue, int jobs) {
  if (plane.width != canvas.plane_width || plane.height != canvas.plane_height) {
    throw Error(ErrorCode::DimensionMismatch, "attention canvas was built for " + std::to_string(canvas.plane_width) +
                                                  "x" + std::to_string(canvas.plane_height) + ", plane is " +
                                                  std::to_string(plane.width) + "x" + std::to_string(plane.height));
  }
  if (tissue && (tissue->plane_width != plane.width || tissue->plane_height != plane.height)) {
    throw Error(ErrorCode::DimensionMismatch, "tissue mask does not match the plane");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorCode::InvalidArgument, "alpha must lie in [0,1]");
  wsi::Image out = plane;
  if (alpha == 0.0) return out;
  parallel_for(canvas.rows, jobs, [&](std::size_t row) {
    for (std::size_t col = 0; col < canvas.cols; ++col) {
      const std::size_t i = canvas.index(col, row);
      if (!canvas.valid[i]) continue;
      const auto rgb = colormap(canvas.value[i]);
      const std::size_t x1 = std::min(plane.width, (col + 1) * canvas.cell_px);
      const std::size_t y1 = std::min(plane.height, (row + 1) * canvas.cell_px);
      for (std::size_t y = row * canvas.cell_px; y < y1; ++y) {
        for (std::size_t x = col * canvas.cell_px; x < x1; ++x) {
          if (tissue && !tissue->at(x / tissue->stride, y / tissue->stride)) continue;
          std::uint8_t* p = out.px(x, y);
          for (int k = 0; k < 3; ++k) {
            const double v = (1.0 - alpha) * static_cast<double>(p[k]) + alpha * rgb[k];
            p[k] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
          }
        }
      }
    }
  });
  return out;
}

void write_sidecar(const std::filesystem::path& path, const std::string& slide_id, const AttentionCanvas& canvas,
                   std::size_t layer, Aggregation aggregation, double alpha, std::size_t regions) {
  nlohmann::json j{{"slide_id", slide_id},
                   {"bounds", {{"min", canvas.min}, {"max", canvas.max}}},
                   {"layer", layer},
                   {"aggregation", aggregation_name(aggregation)},
                   {"alpha", alpha},
                   {"cell_px", canvas.cell_px},
                   {"regions", regions}};
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::Io, "cannot write " + path.string());
  os << j.dump(2) << '\n';
}

}  // namespace endonet::viz
