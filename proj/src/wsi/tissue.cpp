#include "endonet/wsi/tissue.hpp"

#include <algorithm>

#include "endonet/common/error.hpp"
#include "endonet/common/parallel.hpp"

namespace endonet::wsi {

double TissueMask::fraction() const {
  if (cells.empty()) return 0.0;
  std::size_t n = 0;
  for (auto c : cells) n += c;
  return static_cast<double>(n) / static_cast<double>(cells.size());
}

double TissueMask::window_fraction(long x, long y, std::size_t w, std::size_t h) const {
  if (w == 0 || h == 0) return 0.0;
  const long s = static_cast<long>(stride);
  auto floor_div = [s](long v) { return v >= 0 ? v / s : -((-v + s - 1) / s); };
  const long c0 = floor_div(x), c1 = floor_div(x + static_cast<long>(w) - 1);
  const long r0 = floor_div(y), r1 = floor_div(y + static_cast<long>(h) - 1);
  std::size_t tissue = 0;
  for (long r = std::max(r0, 0L); r <= std::min(r1, static_cast<long>(rows) - 1); ++r) {
    for (long c = std::max(c0, 0L); c <= std::min(c1, static_cast<long>(cols) - 1); ++c) {
      tissue += cells[static_cast<std::size_t>(r) * cols + static_cast<std::size_t>(c)];
    }
  }
  const double total = static_cast<double>((r1 - r0 + 1) * (c1 - c0 + 1));
  return static_cast<double>(tissue) / total;
}

TissueMask compute_tissue_mask(const Image& plane, const TissueParams& params, int jobs) {
  if (plane.empty()) throw Error(ErrorCode::InvalidArgument, "compute_tissue_mask: empty plane");
  if (params.stride == 0) throw Error(ErrorCode::InvalidArgument, "compute_tissue_mask: stride must be positive");
  TissueMask m;
  m.stride = params.stride;
  m.plane_width = plane.width;
  m.plane_height = plane.height;
  m.cols = (plane.width + params.stride - 1) / params.stride;
  m.rows = (plane.height + params.stride - 1) / params.stride;
  m.cells.assign(m.cols * m.rows, 0);
  parallel_for(m.rows, jobs, [&](std::size_t r) {
    const std::size_t y0 = r * params.stride, y1 = std::min(plane.height, y0 + params.stride);
    for (std::size_t c = 0; c < m.cols; ++c) {
      const std::size_t x0 = c * params.stride, x1 = std::min(plane.width, x0 + params.stride);
      double sat = 0.0;
      std::size_t bright = 0;
      for (std::size_t y = y0; y < y1; ++y) {
        for (std::size_t x = x0; x < x1; ++x) {
          const std::uint8_t* p = plane.px(x, y);
          const int mx = std::max({p[0], p[1], p[2]}), mn = std::min({p[0], p[1], p[2]});
          if (mx > 0) sat += static_cast<double>(mx - mn) / mx;
          bright += static_cast<std::size_t>(p[0]) + p[1] + p[2];
        }
      }
      const double n = static_cast<double>((y1 - y0) * (x1 - x0));
      const double mean_sat = sat / n;
      const double mean_bright = static_cast<double>(bright) / (765.0 * n);
      m.cells[r * m.cols + c] =
          (mean_sat > params.saturation_threshold && mean_bright < params.brightness_ceiling) ? 1 : 0;
    }
  });
  return m;
}

}  // namespace endonet::wsi
