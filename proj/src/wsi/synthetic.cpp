#include "endonet/wsi/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "endonet/common/error.hpp"
#include "endonet/common/parallel.hpp"
#include "endonet/common/rng.hpp"
#include "endonet/wsi/regions.hpp"
#include "endonet/wsi/slide.hpp"

namespace endonet::wsi {

namespace {

enum Salt : std::uint64_t { kSaltShape = 1, kSaltGland, kSaltNucleus, kSaltNoise, kSaltGround, kSaltBox, kSaltSubtype };

std::uint64_t hash3(std::uint64_t key, long i, long j) {
  return mix64(mix64(key + static_cast<std::uint64_t>(i)) + static_cast<std::uint64_t>(j));
}

double unit(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

struct Rgb {
  double r, g, b;
};

Rgb mix(const Rgb& a, const Rgb& b, double t) {
  return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

constexpr Rgb kBackground{243, 243, 241};
constexpr Rgb kStroma{232, 158, 198};
constexpr Rgb kStromaHigh{214, 138, 190};
constexpr Rgb kLumen{249, 232, 242};
constexpr Rgb kEpithelium{170, 96, 176};
constexpr Rgb kNucleus{72, 40, 122};

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0)); }

// Per-cell feature parameters, tabulated once per slide.
struct Gland {
  double cx, cy, inv_a, inv_b, cos_t, sin_t;
};
struct Nucleus {
  bool present;
  double cx, cy, rad, cos_phase, sin_phase;
};

class Renderer {
 public:
  explicit Renderer(const SyntheticSlideSpec& s) : spec_(s) {
    for (std::uint64_t k = 0; k < 8; ++k) keys_[k] = derive_key(s.seed, k);
    ground_n_ = static_cast<long>(std::ceil(s.side_um / kGroundPeriod)) + 2;
    ground_.resize(static_cast<std::size_t>(ground_n_ * ground_n_));
    for (long j = 0; j < ground_n_; ++j) {
      for (long i = 0; i < ground_n_; ++i) ground_[static_cast<std::size_t>(j * ground_n_ + i)] = unit(hash3(keys_[kSaltGround], i, j));
    }
    Rng shape(keys_[kSaltShape]);
    for (auto& ph : wobble_phase_) ph = shape.uniform(0.0, 2.0 * std::numbers::pi);
    if (s.gland_period_um > 0.0) {
      const double p = s.gland_period_um;
      gland_n_ = static_cast<long>(std::ceil(s.side_um / p)) + 2;
      glands_.resize(static_cast<std::size_t>(gland_n_ * gland_n_));
      for (long j = -1; j < gland_n_ - 1; ++j) {
        for (long i = -1; i < gland_n_ - 1; ++i) {
          Rng r(hash3(keys_[kSaltGland], i, j));
          Gland& g = glands_[index(i, j, gland_n_)];
          g.cx = (static_cast<double>(i) + 0.5 + 0.2 * (r.uniform() - 0.5)) * p;
          g.cy = (static_cast<double>(j) + 0.5 + 0.2 * (r.uniform() - 0.5)) * p;
          g.inv_a = 1.0 / (p * 0.33 * (0.85 + 0.3 * r.uniform()));
          g.inv_b = 1.0 / (p * 0.24 * (0.85 + 0.3 * r.uniform()));
          const double th = r.uniform(0.0, std::numbers::pi);
          g.cos_t = std::cos(th);
          g.sin_t = std::sin(th);
        }
      }
    }
    if (s.nuclear_density > 0.0) {
      nucleus_n_ = static_cast<long>(std::ceil(s.side_um / kNucleusCell)) + 2;
      nuclei_.resize(static_cast<std::size_t>(nucleus_n_ * nucleus_n_));
      for (long j = -1; j < nucleus_n_ - 1; ++j) {
        for (long i = -1; i < nucleus_n_ - 1; ++i) {
          Rng r(hash3(keys_[kSaltNucleus], i, j));
          Nucleus& n = nuclei_[index(i, j, nucleus_n_)];
          n.present = r.uniform() < s.nuclear_density;
          n.cx = (static_cast<double>(i) + r.uniform()) * kNucleusCell;
          n.cy = (static_cast<double>(j) + r.uniform()) * kNucleusCell;
          n.rad = r.uniform(3.5, 6.5);
          const double phase = r.uniform(0.0, 2.0 * std::numbers::pi);
          n.cos_phase = std::cos(phase);
          n.sin_phase = std::sin(phase);
        }
      }
    }
  }

  /// Renders one level-0 row into `out` (3 bytes per px).
  void render_row(std::size_t y, std::size_t width, std::uint8_t* out) const {
    const double mpp = spec_.mpp;
    const double v = (static_cast<double>(y) + 0.5) * mpp;
    std::vector<const Gland*> gland_at(width, nullptr);
    std::vector<const Nucleus*> nucleus_at(width, nullptr);
    if (!glands_.empty()) {
      const long cj = static_cast<long>(std::floor(v / spec_.gland_period_um));
      visit_cells(glands_, gland_n_, cj, [&](const Gland& g) {
        const double reach = std::max(1.0 / g.inv_a, 1.0 / g.inv_b);
        if (std::abs(v - g.cy) > reach) return;
        for_span(g.cx, reach, width, [&](std::size_t x, double u) {
          if (gland_at[x]) return;
          if (gland_radius2(g, u, v) < 1.0) gland_at[x] = &g;
        });
      });
    }
    if (!nuclei_.empty()) {
      const long cj = static_cast<long>(std::floor(v / kNucleusCell));
      visit_cells(nuclei_, nucleus_n_, cj, [&](const Nucleus& n) {
        const double reach = n.rad * 1.25;
        if (!n.present || std::abs(v - n.cy) > reach) return;
        for_span(n.cx, reach, width, [&](std::size_t x, double u) {
          if (nucleus_at[x]) return;
          if (nucleus_weight(n, u, v) >= 0.0) nucleus_at[x] = &n;
        });
      });
    }
    Rng noise(hash3(keys_[kSaltNoise], 0, static_cast<long>(y)));
    const double scale = 2.0 * spec_.noise_amplitude * 255.0;
    const Rgb ground_colour = spec_.grade == Grade::Low ? kStroma : kStromaHigh;
    for (std::size_t x = 0; x < width; ++x) {
      const double u = (static_cast<double>(x) + 0.5) * mpp;
      const bool tissue = in_tissue(u, v);
      Rgb c = kBackground;
      if (tissue) {
        const double tone = ground(u, v) - 0.5;
        c = {ground_colour.r + 14 * tone, ground_colour.g + 14 * tone, ground_colour.b + 10 * tone};
        if (const Gland* g = gland_at[x]) {
          const double d = std::sqrt(gland_radius2(*g, u, v));
          c = d < 0.68 ? kLumen : mix(kEpithelium, c, std::max(0.0, (d - 0.9) / 0.1));
        }
        if (const Nucleus* n = nucleus_at[x]) c = mix(kNucleus, c, nucleus_weight(*n, u, v));
      }
      const double e = (noise.uniform() - 0.5) * (tissue ? scale : 0.15 * scale);
      out[3 * x] = to_byte(c.r + e);
      out[3 * x + 1] = to_byte(c.g + e);
      out[3 * x + 2] = to_byte(c.b + e);
    }
  }

 private:
  static constexpr double kNucleusCell = 14.0;
  static constexpr double kGroundPeriod = 60.0;

  // Smooth value noise in [0, 1) on a kGroundPeriod lattice.
  double ground(double u, double v) const {
    constexpr double inv = 1.0 / kGroundPeriod;
    const double fu = u * inv, fv = v * inv;
    const long i = static_cast<long>(fu), j = static_cast<long>(fv);
    const double tu = fu - static_cast<double>(i), tv = fv - static_cast<double>(j);
    const double su = tu * tu * (3 - 2 * tu), sv = tv * tv * (3 - 2 * tv);
    const double* row0 = &ground_[static_cast<std::size_t>(j * ground_n_ + i)];
    const double* row1 = row0 + ground_n_;
    return (row0[0] * (1 - su) + row0[1] * su) * (1 - sv) + (row1[0] * (1 - su) + row1[1] * su) * sv;
  }
  static constexpr double kWobble = 0.045;
  static constexpr double kInner4 = (0.96 - kWobble) * (0.96 - kWobble) * (0.96 - kWobble) * (0.96 - kWobble);
  static constexpr double kOuter4 = (0.96 + kWobble) * (0.96 + kWobble) * (0.96 + kWobble) * (0.96 + kWobble);

  static std::size_t index(long i, long j, long n) { return static_cast<std::size_t>((j + 1) * n + (i + 1)); }

  bool in_tissue(double u, double v) const {
    const double half = spec_.side_um / 2.0;
    const double inv = 2.0 / spec_.side_um;
    const double dx = (u - half) * inv, dy = (v - half) * inv;
    const double r4 = dx * dx * dx * dx + dy * dy * dy * dy;
    if (r4 <= kInner4) return true;
    if (r4 > kOuter4) return false;
    const double ang = std::atan2(dy, dx);
    double radius = 0.96;
    for (int k = 0; k < 3; ++k) radius += 0.015 * std::sin((k + 2) * ang + wobble_phase_[k]);
    return r4 <= radius * radius * radius * radius;
  }

  static double gland_radius2(const Gland& g, double u, double v) {
    const double du = u - g.cx, dv = v - g.cy;
    const double xr = (du * g.cos_t + dv * g.sin_t) * g.inv_a;
    const double yr = (-du * g.sin_t + dv * g.cos_t) * g.inv_b;
    return xr * xr + yr * yr;
  }

  // Blend weight toward the ground colour inside the nucleus, or -1 outside.
  static double nucleus_weight(const Nucleus& n, double u, double v) {
    const double du = u - n.cx, dv = v - n.cy;
    const double d2 = du * du + dv * dv;
    const double outer = 1.25 * n.rad;
    if (d2 > outer * outer) return -1.0;
    const double dist = std::sqrt(d2);
    if (dist == 0.0) return 0.0;
    // boundary r(theta) = rad * (1 + 0.25 sin(3 theta + phase)), via triple-angle identities
    const double c = du / dist, s = dv / dist;
    const double sin3 = 3.0 * s - 4.0 * s * s * s, cos3 = 4.0 * c * c * c - 3.0 * c;
    const double edge = n.rad * (1.0 + 0.25 * (sin3 * n.cos_phase + cos3 * n.sin_phase));
    return dist <= edge ? 0.25 * dist / edge : -1.0;
  }

  // Cells of rows cj-1..cj+1 in row-major order; earlier cells win overlaps.
  template <typename Cell, typename Fn>
  static void visit_cells(const std::vector<Cell>& cells, long n, long cj, Fn&& fn) {
    for (long j = std::max(cj - 1, -1L); j <= std::min(cj + 1, n - 2); ++j) {
      for (long i = -1; i < n - 1; ++i) fn(cells[index(i, j, n)]);
    }
  }

  // Calls fn(x, u) for pixels whose centre u lies within [c - reach, c + reach].
  template <typename Fn>
  void for_span(double c, double reach, std::size_t width, Fn&& fn) const {
    const double mpp = spec_.mpp;
    const long x0 = std::max(0L, static_cast<long>(std::ceil((c - reach) / mpp - 0.5)));
    const long x1 = std::min(static_cast<long>(width) - 1, static_cast<long>(std::floor((c + reach) / mpp - 0.5)));
    for (long x = x0; x <= x1; ++x) fn(static_cast<std::size_t>(x), (static_cast<double>(x) + 0.5) * mpp);
  }

  SyntheticSlideSpec spec_;
  std::array<std::uint64_t, 8> keys_{};
  std::array<double, 3> wobble_phase_{};
  std::vector<double> ground_;
  long ground_n_ = 0;
  std::vector<Gland> glands_;
  long gland_n_ = 0;
  std::vector<Nucleus> nuclei_;
  long nucleus_n_ = 0;
};

}  // namespace

SyntheticSlideSpec resolve_defaults(const SyntheticSlideSpec& in) {
  SyntheticSlideSpec s = in;
  const bool low = s.grade == Grade::Low;
  if (s.gland_period_um <= 0.0 && low) s.gland_period_um = 120.0;
  if (s.nuclear_density < 0.0) s.nuclear_density = low ? 0.06 : 0.55;
  if (s.noise_amplitude < 0.0) s.noise_amplitude = low ? 0.03 : 0.12;
  if (!s.subtype) {
    Rng r(derive_key(s.seed, kSaltSubtype));
    s.subtype = low ? (r.below(2) ? Subtype::EndometrioidG2 : Subtype::EndometrioidG1)
                    : std::array{Subtype::EndometrioidG3, Subtype::Serous, Subtype::Carcinosarcoma}[r.below(3)];
  }
  if (grade_of(*s.subtype) != s.grade) {
    throw Error(ErrorCode::InvalidArgument, "synthetic subtype " + std::string(subtype_name(*s.subtype)) +
                                                " does not have grade " + std::string(grade_name(s.grade)));
  }
  return s;
}

Image render_synthetic_plane(const SyntheticSlideSpec& raw, int jobs) {
  if (!(raw.mpp > 0.0)) throw Error(ErrorCode::InvalidMpp, "synthetic mpp must be positive");
  if (raw.side_um < static_cast<double>(kRegionSideUm)) {
    throw Error(ErrorCode::InvalidArgument, "synthetic side " + std::to_string(raw.side_um) +
                                                " um is smaller than one 4480 um region");
  }
  const SyntheticSlideSpec spec = resolve_defaults(raw);
  const std::size_t n = static_cast<std::size_t>(std::llround(spec.side_um / spec.mpp));
  Image img(n, n);
  const Renderer renderer(spec);
  parallel_for(n, jobs, [&](std::size_t y) { renderer.render_row(y, n, img.px(0, y)); });
  return img;
}

SyntheticSlide generate_synthetic_slide(const SyntheticSlideSpec& raw, const std::filesystem::path& dir, int jobs) {
  const SyntheticSlideSpec spec = resolve_defaults(raw);
  Image level0 = render_synthetic_plane(spec, jobs);
  std::vector<Image> planes;
  std::vector<double> mpps = {spec.mpp};
  planes.push_back(std::move(level0));
  if (spec.mpp < 1.0 - 1e-12) {
    planes.push_back(downsample_plane(planes[0], 1.0 / spec.mpp));
    mpps.push_back(1.0);
  }
  write_slide(dir, spec.slide_id, planes, mpps);

  SyntheticSlide out;
  out.entry.slide_id = spec.slide_id;
  out.entry.patient_id = spec.patient_id;
  out.entry.path = dir;
  out.entry.subtype = *spec.subtype;
  out.entry.grade = spec.grade;
  out.entry.mpp = spec.mpp;

  // one tumour box inside the central 60% of the slide
  Rng r(derive_key(spec.seed, kSaltBox));
  const double box = std::min(spec.annotation_side_um, 0.4 * spec.side_um);
  const double lo = 0.2 * spec.side_um, span = 0.6 * spec.side_um - box;
  const double bx = lo + r.uniform() * std::max(0.0, span), by = lo + r.uniform() * std::max(0.0, span);
  AnnotationBox b;
  b.slide_id = spec.slide_id;
  b.x = std::lround(std::floor(bx) / spec.mpp);
  b.y = std::lround(std::floor(by) / spec.mpp);
  b.w = b.h = std::lround(box / spec.mpp);
  b.label = *spec.subtype;
  out.annotations.push_back(b);
  return out;
}

}  // namespace endonet::wsi
