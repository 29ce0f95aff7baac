#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "endonet/common/error.hpp"
#include "endonet/common/rng.hpp"
#include "endonet/features/cnn.hpp"
#include "endonet/features/feature_store.hpp"
#include "endonet/features/patch_classifier.hpp"
#include "endonet/tensor/checkpoint.hpp"
#include "endonet/wsi/synthetic.hpp"
#include "error_helpers.hpp"
#include "temp_dir.hpp"

using namespace endonet;
using namespace endonet::features;
using endonet::testing::throws_code;

namespace {

// ResNet-18 parameter count from the layer table: convs without bias, BN
// gamma+beta per conv, 1x1 projection where the shape changes, linear head.
std::size_t resnet18_params(std::size_t stem, const std::array<std::size_t, 4>& st, std::size_t classes) {
  std::size_t n = 3 * stem * 49 + 2 * stem;
  std::size_t in = stem;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t c = st[s];
    for (int b = 0; b < 2; ++b) {
      n += in * c * 9 + 2 * c + c * c * 9 + 2 * c;
      if (in != c || (s > 0 && b == 0)) n += in * c + 2 * c;
      in = c;
    }
  }
  return n + in * classes + classes;
}

CnnConfig toy(double width = 0.125) {
  CnnConfig c;
  c.width_multiplier = width;
  return c;
}

wsi::Image noise_patch(std::uint64_t seed) {
  wsi::Image img(kInputPx, kInputPx);
  Rng rng(seed);
  for (auto& v : img.pixels) v = static_cast<std::uint8_t>(rng.below(256));
  return img;
}

wsi::PatchGrid grid_of(std::vector<wsi::Image> images, std::size_t padding_every = 0) {
  wsi::PatchGrid g;
  g.region.origin_x = 0;
  g.region.origin_y = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    wsi::PatchSlot s;
    s.row = i / 20;
    s.col = i % 20;
    s.padding = padding_every && i % padding_every == padding_every - 1;
    if (!s.padding) s.pixels = images[i];
    g.slots.push_back(std::move(s));
  }
  return g;
}

FeatureBundle random_bundle(Rng& rng, std::size_t n, std::size_t d) {
  FeatureBundle b;
  b.slide_id = "slide" + std::to_string(rng.below(100));
  b.region_id = "x" + std::to_string(rng.below(9000)) + "_y0";
  b.n = n;
  b.d = d;
  b.features.resize(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    b.positions.push_back({static_cast<std::uint16_t>(i / 20), static_cast<std::uint16_t>(i % 20)});
    b.padding.push_back(rng.below(5) == 0 ? 1 : 0);
    for (std::size_t k = 0; k < d; ++k) b.features[i * d + k] = b.padding[i] ? 0.0f : static_cast<float>(rng.normal());
  }
  return b;
}

}  // namespace

TEST_CASE("CNN geometry and parameter count") {
  CnnConfig full = toy(1.0);
  CHECK(full.feature_dim() == 512);
  CHECK(toy(0.25).feature_dim() == 128);
  ResNet net(full, 1);
  CHECK(net.parameter_count() == resnet18_params(64, {64, 128, 256, 512}, 2));
  // the classic ImageNet figure with a 1000-way head
  CHECK(resnet18_params(64, {64, 128, 256, 512}, 1000) == 11689512);
  ResNet quarter(toy(0.25), 1);
  CHECK(quarter.parameter_count() == resnet18_params(16, {16, 32, 64, 128}, 2));

  CHECK(throws_code([] { ResNet(toy(0.0), 1); }, ErrorCode::InvalidArgument));
  CHECK(throws_code([] { ResNet(toy(-0.5), 1); }, ErrorCode::InvalidArgument));
}

TEST_CASE("CNN initialization") {
  ResNet a(toy(1.0), 7), b(toy(1.0), 7), c(toy(1.0), 8);
  bool same = true, differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    same = same && a.parameters()[i].tensor.values() == b.parameters()[i].tensor.values();
    differs = differs || a.parameters()[i].tensor.values() != c.parameters()[i].tensor.values();
  }
  CHECK(same);
  CHECK(differs);
  for (const auto& [name, t] : a.parameters()) {
    if (name.find(".b.bn.gamma") != std::string::npos) {
      CHECK_MESSAGE(std::all_of(t.data().begin(), t.data().end(), [](float v) { return v == 0.0f; }), name);
    } else if (name.find(".a.bn.gamma") != std::string::npos) {
      CHECK_MESSAGE(std::all_of(t.data().begin(), t.data().end(), [](float v) { return v == 1.0f; }), name);
    }
  }
  // He-normal: sample std of a 512x512x3x3 kernel against sqrt(2 / fan_in)
  const auto& w = tensor::find_tensor(a.parameters(), "cnn.stage4.block2.a.conv.weight");
  double ss = 0, mean = 0;
  for (float v : w.data()) mean += v;
  mean /= static_cast<double>(w.numel());
  for (float v : w.data()) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(w.numel()));
  CHECK(sd == doctest::Approx(std::sqrt(2.0 / (512 * 9))).epsilon(0.01));
}

TEST_CASE("preprocessing normalizes and flips") {
  wsi::Image img(kInputPx, kInputPx);
  img.set(0, 0, 255, 0, 128);
  std::vector<float> buf(3 * kInputPx * kInputPx);
  preprocess_into(img, buf.data());
  CHECK(buf[0] == doctest::Approx((1.0 - 0.485) / 0.229));
  CHECK(buf[kInputPx * kInputPx] == doctest::Approx((0.0 - 0.456) / 0.224));
  CHECK(buf[2 * kInputPx * kInputPx] == doctest::Approx((128.0 / 255.0 - 0.406) / 0.225));
  preprocess_into(img, buf.data(), true, false);
  CHECK(buf[kInputPx - 1] == doctest::Approx((1.0 - 0.485) / 0.229));
  preprocess_into(img, buf.data(), true, true);
  CHECK(buf[kInputPx * kInputPx - 1] == doctest::Approx((1.0 - 0.485) / 0.229));
  wsi::Image small(10, 10);
  CHECK(throws_code([&] { preprocess_into(small, buf.data()); }, ErrorCode::ShapeMismatch));
}

TEST_CASE("feature extraction contract") {
  ResNet net(toy(), 3);
  // perturb BN statistics so eval mode is exercised away from identity
  Rng rng(11);
  for (auto& [name, t] : net.buffers()) {
    for (auto& v : t.values()) v = name.ends_with("var") ? static_cast<float>(rng.uniform(0.5, 2.0)) : static_cast<float>(rng.normal());
  }
  for (auto& [name, t] : net.parameters()) {
    if (name.ends_with("gamma")) for (auto& v : t.values()) v = static_cast<float>(rng.uniform(0.5, 1.5));
  }

  std::vector<wsi::Image> imgs;
  for (int i = 0; i < 12; ++i) imgs.push_back(noise_patch(100 + i));
  imgs[7] = imgs[2];
  imgs[9] = wsi::Image(kInputPx, kInputPx);
  const auto grid = grid_of(imgs, 5);

  FeatureBundle b = extract_features(net, grid, "s1", 1, 4);
  CHECK(b.n == 12);
  CHECK(b.d == 64);
  CHECK(b.region_id == "x0_y0");
  CHECK_NOTHROW(b.validate());
  for (std::size_t i = 0; i < b.n; ++i) {
    const bool pad = i % 5 == 4;
    CHECK(b.padding[i] == (pad ? 1 : 0));
    if (pad) CHECK(std::all_of(b.row(i), b.row(i) + b.d, [](float v) { return v == 0.0f; }));
  }
  CHECK(std::equal(b.row(2), b.row(2) + b.d, b.row(7)));
  CHECK(std::all_of(b.row(9), b.row(9) + b.d, [](float v) { return std::isfinite(v); }));
  CHECK_FALSE(std::equal(b.row(0), b.row(0) + b.d, b.row(1)));

  // batch size and threading leave the bytes unchanged
  FeatureBundle b2 = extract_features(net, grid, "s1", 2, 3);
  FeatureBundle b3 = extract_features(net, grid, "s1", 1, 25);
  CHECK(b2 == b);
  CHECK(b3 == b);
}

TEST_CASE("full interior region yields a 400-row bundle") {
  ResNet net(toy(), 3);
  std::vector<wsi::Image> imgs(400, noise_patch(1));
  FeatureBundle b = extract_features(net, grid_of(imgs), "s", 1, 50);
  CHECK(b.n == 400);
  CHECK(b.real_count() == 400);
  CHECK(b.features.size() == 400 * 64);
}

TEST_CASE("CNN checkpoint round trip and mismatch") {
  endonet::testing::TempDir dir("cnn");
  ResNet net(toy(), 5);
  save_cnn(dir / "cnn.endc", net);
  ResNet back = load_cnn(dir / "cnn.endc");
  CHECK(back.config().feature_dim() == 64);
  CHECK(tensor::tensors_checksum(back.state()) == tensor::tensors_checksum(net.state()));
  ResNet other(toy(0.25), 5);
  CHECK(throws_code([&] { other.load_state(net.state()); }, ErrorCode::ShapeMismatch));
}

TEST_CASE("feature store round trip") {
  endonet::testing::TempDir dir("endf");
  Rng rng(3);
  std::vector<FeatureBundle> bundles;
  for (int i = 0; i < 5; ++i) bundles.push_back(random_bundle(rng, 1 + rng.below(400), 1 + rng.below(40)));
  write_feature_store(dir / "f.endf", bundles);
  CHECK(read_feature_store(dir / "f.endf") == bundles);

  write_feature_store(dir / "empty.endf", {});
  CHECK(std::filesystem::file_size(dir / "empty.endf") == 12);
  CHECK(read_feature_store(dir / "empty.endf").empty());

  const auto size = std::filesystem::file_size(dir / "f.endf");
  std::filesystem::copy_file(dir / "f.endf", dir / "t.endf");
  std::filesystem::resize_file(dir / "t.endf", size - 7);
  CHECK(throws_code([&] { read_feature_store(dir / "t.endf"); }, ErrorCode::Corrupt));

  std::ofstream(dir / "magic.endf", std::ios::binary) << "ENDX\x01\0\0\0\0\0\0\0";
  CHECK(throws_code([&] { read_feature_store(dir / "magic.endf"); }, ErrorCode::Corrupt));
  {
    std::ofstream os(dir / "ver.endf", std::ios::binary);
    os.write("ENDF\x02\0\0\0\0\0\0\0", 12);
  }
  CHECK(throws_code([&] { read_feature_store(dir / "ver.endf"); }, ErrorCode::Corrupt));

  auto bad = bundles[0];
  bad.positions[1] = bad.positions[0];
  CHECK(throws_code([&] { write_feature_store(dir / "bad.endf", {bad}); }, ErrorCode::InvalidArgument));
}

TEST_CASE("patch split is slide-grouped and stratified") {
  Rng rng(21);
  for (int t = 0; t < 200; ++t) {
    std::vector<wsi::LabeledPatch> patches;
    const std::size_t slides = 4 + rng.below(20);
    for (std::size_t s = 0; s < slides; ++s) {
      const bool high = s % 2 == 0;
      const std::size_t k = 1 + rng.below(6);
      for (std::size_t i = 0; i < k; ++i) {
        wsi::LabeledPatch p;
        p.slide_id = "s" + std::to_string(s);
        p.grade = high ? wsi::Grade::High : wsi::Grade::Low;
        p.subtype = high ? wsi::Subtype::Serous : wsi::Subtype::EndometrioidG1;
        patches.push_back(p);
      }
    }
    const auto split = split_patches(patches, 0.8, 2, 1000 + t);
    CHECK(split.train.size() + split.val.size() == patches.size());
    std::set<std::string> tr, va;
    std::set<wsi::Grade> tr_g, va_g;
    for (auto i : split.train) {
      tr.insert(patches[i].slide_id);
      tr_g.insert(patches[i].grade);
    }
    for (auto i : split.val) {
      va.insert(patches[i].slide_id);
      va_g.insert(patches[i].grade);
    }
    for (const auto& s : va) CHECK(tr.count(s) == 0);
    CHECK(tr_g.size() == 2);
    CHECK(va_g.size() == 2);
  }
  std::vector<wsi::LabeledPatch> one(3);
  for (std::size_t i = 0; i < 3; ++i) one[i].slide_id = "s" + std::to_string(i);
  CHECK(throws_code([&] { split_patches(one, 0.8, 2, 1); }, ErrorCode::SingleClass));
  one[0].grade = wsi::Grade::High;
  CHECK(throws_code([&] { split_patches(one, 0.8, 2, 1); }, ErrorCode::SingleClass));
}

TEST_CASE("best epoch selection") {
  CHECK(select_best_epoch({0.5, 0.9, 0.7}) == 2);
  CHECK(select_best_epoch({0.9, 0.8, 0.9}) == 1);
  CHECK(select_best_epoch({0.4}) == 1);
}

TEST_CASE("patch classifier rejects bad input") {
  PatchTrainConfig cfg;
  cfg.cnn = toy();
  cfg.epochs = 0;
  std::vector<wsi::LabeledPatch> patches(4);
  CHECK(throws_code([&] { train_patch_classifier(patches, cfg); }, ErrorCode::InvalidArgument));
  cfg.epochs = 1;
  for (std::size_t i = 0; i < 4; ++i) {
    patches[i].slide_id = "s" + std::to_string(i);
    patches[i].pixels = noise_patch(i);
  }
  CHECK(throws_code([&] { train_patch_classifier(patches, cfg); }, ErrorCode::SingleClass));
}
