#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "endonet/common/error.hpp"
#include "endonet/common/rng.hpp"
#include "endonet/viz/attention.hpp"
#include "error_helpers.hpp"
#include "temp_dir.hpp"

using namespace endonet;
using namespace endonet::viz;
using endonet::testing::throws_code;
using tensor::TensorF;

namespace {

features::FeatureBundle grid_bundle(std::size_t pad_from = 400) {
  features::FeatureBundle b;
  b.slide_id = "s";
  b.region_id = "x0_y0";
  b.n = 400;
  b.d = 2;
  b.features.assign(800, 0.0f);
  for (std::size_t i = 0; i < 400; ++i) {
    b.positions.push_back({static_cast<std::uint16_t>(i / 20), static_cast<std::uint16_t>(i % 20)});
    b.padding.push_back(i >= pad_from ? 1 : 0);
    if (i < pad_from) b.features[2 * i] = 1.0f;
  }
  return b;
}

/// [S,S] attention whose class row is `cls_row` and other rows uniform.
TensorF attention_with_row(const std::vector<float>& cls_row) {
  const std::size_t s = cls_row.size();
  TensorF t({s, s}, 1.0f / static_cast<float>(s));
  for (std::size_t j = 0; j < s; ++j) t[j] = cls_row[j];
  return t;
}

model::AttentionTrace single_layer(std::vector<TensorF> heads, std::size_t layer = 3) {
  model::AttentionTrace t;
  t.attention.push_back(std::move(heads));
  t.layer_index.push_back(layer);
  return t;
}

RegionAttention region_with(long x, long y, const std::vector<std::pair<std::size_t, double>>& slots) {
  RegionAttention r;
  r.region.origin_x = x;
  r.region.origin_y = y;
  r.scores.score.assign(400, 0.0);
  r.scores.valid.assign(400, 0);
  for (auto [slot, v] : slots) {
    r.scores.score[slot] = v;
    r.scores.valid[slot] = 1;
  }
  return r;
}

wsi::Image tissue_plane(std::size_t w, std::size_t h) {
  wsi::Image img(w, h);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) img.set(x, y, 200, static_cast<std::uint8_t>(100 + (x + y) % 50), 180);
  }
  return img;
}

}  // namespace

TEST_CASE("class-token attention of uniform and two-head traces") {
  const auto b = grid_bundle();
  std::vector<float> row(401, 1.0f / 400.0f);
  row[0] = 0.0f;
  const auto uniform = class_token_attention(single_layer({attention_with_row(row)}), b);
  CHECK(uniform.layer == 3);
  for (std::size_t i = 0; i < 400; ++i) {
    CHECK(uniform.valid[i] == 1);
    CHECK(uniform.score[i] == doctest::Approx(1.0 / 400.0).epsilon(1e-6));
  }

  Rng rng(4);
  std::vector<float> a(401), c(401);
  for (auto& v : a) v = static_cast<float>(rng.uniform());
  for (auto& v : c) v = static_cast<float>(rng.uniform());
  const auto two = class_token_attention(single_layer({attention_with_row(a), attention_with_row(c)}), b);
  for (std::size_t i = 0; i < 400; ++i) {
    CHECK(two.score[i] == doctest::Approx((double(a[i + 1]) + double(c[i + 1])) / 2).epsilon(1e-12));
  }
}

TEST_CASE("padding slots carry no attention score") {
  const auto b = grid_bundle(360);
  std::vector<float> row(401, 1.0f / 361.0f);
  for (std::size_t j = 361; j < 401; ++j) row[j] = 0.0f;
  const auto s = class_token_attention(single_layer({attention_with_row(row)}), b);
  CHECK(std::count(s.valid.begin(), s.valid.end(), 1) == 360);
  for (std::size_t i = 360; i < 400; ++i) CHECK(s.valid[i] == 0);
}

TEST_CASE("class-token attention errors") {
  const auto b = grid_bundle();
  CHECK(throws_code([&] { class_token_attention({}, b); }, ErrorCode::InvalidArgument));
  CHECK(throws_code([&] { class_token_attention(single_layer({TensorF({5, 5})}), b); }, ErrorCode::ShapeMismatch));
  // rollout needs every layer from 0
  CHECK(throws_code([&] { class_token_attention(single_layer({TensorF({401, 401})}, 3), b, Aggregation::rollout); },
                    ErrorCode::InvalidArgument));
  CHECK(parse_aggregation("rollout") == Aggregation::rollout);
  CHECK(throws_code([] { parse_aggregation("max"); }, ErrorCode::InvalidArgument));
}

TEST_CASE("rollout of one layer mixes attention with the identity") {
  const auto b = grid_bundle();
  Rng rng(8);
  std::vector<float> row(401);
  for (auto& v : row) v = static_cast<float>(rng.uniform());
  const auto r = class_token_attention(single_layer({attention_with_row(row)}, 0), b, Aggregation::rollout);
  for (std::size_t i = 0; i < 400; ++i) CHECK(r.score[i] == doctest::Approx(0.5 * row[i + 1]).epsilon(1e-12));
}

TEST_CASE("trace from the encoder yields a distribution over patches") {
  model::EncoderConfig cfg;
  cfg.d_model = 16;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.ffn = 32;
  cfg.feature_dim = 2;
  model::EndoNet net(cfg, 5);
  const auto b = grid_bundle(300);
  const auto enc = net.encode(net.embed_region(b), model::TraceMode::all);
  const auto last = class_token_attention(enc.trace, b);
  const auto roll = class_token_attention(enc.trace, b, Aggregation::rollout);
  double total = 0, roll_total = 0;
  for (std::size_t i = 0; i < 400; ++i) {
    total += last.score[i];
    roll_total += roll.score[i];
  }
  CHECK(total < 1.0 + 1e-5);
  CHECK(total > 0.5);
  CHECK(roll_total < 1.0 + 1e-5);
  CHECK(last.layer == 1);
}

TEST_CASE("stitching min-max normalizes across the slide") {
  auto c = normalize_and_stitch({region_with(0, 0, {{0, 0.1}, {1, 0.3}})}, 4480, 4480);
  CHECK(c.value[c.index(0, 0)] == 0.0);
  CHECK(c.value[c.index(1, 0)] == 1.0);
  CHECK(c.min == 0.1);
  CHECK(c.max == 0.3);
  CHECK(c.valid[c.index(2, 0)] == 0);

  auto k = normalize_and_stitch({region_with(0, 0, {{0, 0.2}, {5, 0.2}, {9, 0.2}})}, 4480, 4480);
  for (std::size_t i : {0u, 5u, 9u}) CHECK(k.value[i] == 0.5);

  // second region shifted one patch right: its slot 0 overlaps the first region's slot 1
  auto o = normalize_and_stitch({region_with(0, 0, {{1, 0.0}, {0, 0.25}}), region_with(224, 0, {{0, 1.0}})}, 4704,
                                4480);
  CHECK(o.raw[o.index(1, 0)] == 0.5);
  CHECK(o.cols == 21);
  CHECK(throws_code([] { normalize_and_stitch({region_with(100, 0, {{0, 1.0}})}, 4480, 4480); },
                    ErrorCode::InvalidArgument));
}

TEST_CASE("normalization preserves the score ranking") {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::pair<std::size_t, double>> slots;
    for (std::size_t i = 0; i < 400; i += 1 + rng.below(4)) slots.push_back({i, rng.uniform(-1.0, 3.0)});
    const auto c = normalize_and_stitch({region_with(0, 0, slots)}, 4480, 4480);
    for (std::size_t a = 0; a < slots.size(); ++a) {
      const double va = c.value[slots[a].first];
      CHECK(va >= 0.0);
      CHECK(va <= 1.0);
      for (std::size_t b = a + 1; b < slots.size(); b += 7) {
        const double vb = c.value[slots[b].first];
        if (slots[a].second < slots[b].second) CHECK(va < vb);
        if (slots[a].second > slots[b].second) CHECK(va > vb);
      }
    }
  }
}

TEST_CASE("colormap endpoints and midpoint") {
  CHECK(colormap(0.0) == std::array<double, 3>{0, 0, 255});
  CHECK(colormap(0.5) == std::array<double, 3>{128, 0, 128});
  CHECK(colormap(1.0) == std::array<double, 3>{255, 0, 0});
  CHECK(colormap(0.25)[0] == 64.0);
}

TEST_CASE("rendered overlay marks the max patch red and the min patch blue") {
  const auto plane = tissue_plane(4480, 4480);
  std::vector<std::pair<std::size_t, double>> slots;
  for (std::size_t i = 0; i < 400; ++i) slots.push_back({i, 0.001 * static_cast<double>((i * 37) % 400)});
  const auto canvas = normalize_and_stitch({region_with(0, 0, slots)}, 4480, 4480);
  const auto out = render_heatmap(plane, canvas);
  CHECK(out.width == plane.width);
  CHECK(out.height == plane.height);

  auto blended = [&](std::array<double, 3> rgb, std::size_t x, std::size_t y) {
    const auto* p = plane.px(x, y);
    std::array<std::uint8_t, 3> e{};
    for (int k = 0; k < 3; ++k) e[k] = static_cast<std::uint8_t>(std::lround(0.55 * p[k] + 0.45 * rgb[k]));
    return e;
  };
  std::size_t red = 0, blue = 0;
  for (std::size_t slot = 0; slot < 400; ++slot) {
    const std::size_t x = (slot % 20) * 224 + 17, y = (slot / 20) * 224 + 101;
    const auto* q = out.px(x, y);
    const std::array<std::uint8_t, 3> got{q[0], q[1], q[2]};
    red += got == blended({255, 0, 0}, x, y);
    blue += got == blended({0, 0, 255}, x, y);
  }
  CHECK(red == 1);
  CHECK(blue == 1);
  std::size_t max_slot = 0;
  for (std::size_t i = 0; i < 400; ++i) {
    if (slots[i].second > slots[max_slot].second) max_slot = i;
  }
  const std::size_t mx = (max_slot % 20) * 224, my = (max_slot / 20) * 224;
  CHECK(out.px(mx, my)[0] > plane.px(mx, my)[0]);
  CHECK(out.px(mx, my)[2] < plane.px(mx, my)[2]);
  CHECK(out.px(0, 0)[2] > plane.px(0, 0)[2]);
  CHECK(out.px(0, 0)[0] < plane.px(0, 0)[0]);

  CHECK(render_heatmap(plane, canvas, 0.0) == plane);
  CHECK(throws_code([&] { render_heatmap(tissue_plane(100, 100), canvas); }, ErrorCode::DimensionMismatch));
}

TEST_CASE("pixels outside tissue or without a score are untouched") {
  wsi::Image plane = tissue_plane(448, 448);
  for (std::size_t y = 0; y < 448; ++y) {
    for (std::size_t x = 0; x < 224; ++x) plane.set(x, y, 250, 250, 250);
  }
  const auto mask = wsi::compute_tissue_mask(plane);
  RegionAttention r = region_with(0, 0, {{0, 0.0}, {1, 1.0}, {20, 0.5}});
  const auto canvas = normalize_and_stitch({r}, 448, 448);
  const auto out = render_heatmap(plane, canvas, 0.45, &mask);
  for (std::size_t y = 0; y < 448; y += 13) {
    for (std::size_t x = 0; x < 224; x += 13) CHECK(out.px(x, y)[0] == 250);
    // slot 21 (x >= 224, y >= 224) has no score
    if (y >= 224) {
      for (std::size_t x = 224; x < 448; x += 13) CHECK(std::equal(out.px(x, y), out.px(x, y) + 3, plane.px(x, y)));
    }
  }
  CHECK(out.px(300, 100)[0] > plane.px(300, 100)[0]);
  const auto small_mask = wsi::compute_tissue_mask(tissue_plane(224, 224));
  CHECK(throws_code([&] { render_heatmap(plane, canvas, 0.45, &small_mask); }, ErrorCode::DimensionMismatch));
}

TEST_CASE("sidecar records bounds, layer and aggregation") {
  testing::TempDir dir("viz");
  const auto canvas = normalize_and_stitch({region_with(0, 0, {{0, 0.1}, {1, 0.3}})}, 4480, 4480);
  write_sidecar(dir / "a.json", "slide7", canvas, 3, Aggregation::last_layer, 0.45, 1);
  std::ifstream is(dir / "a.json");
  const auto j = nlohmann::json::parse(is);
  CHECK(j["slide_id"] == "slide7");
  CHECK(j["bounds"]["min"] == 0.1);
  CHECK(j["bounds"]["max"] == 0.3);
  CHECK(j["layer"] == 3);
  CHECK(j["aggregation"] == "last_layer");
}
