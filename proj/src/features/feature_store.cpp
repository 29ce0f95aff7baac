#include "endonet/features/feature_store.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>

#include "endonet/common/binary_io.hpp"
#include "endonet/common/error.hpp"
#include "endonet/common/parallel.hpp"

namespace endonet::features {

std::size_t FeatureBundle::real_count() const {
  return static_cast<std::size_t>(std::count(padding.begin(), padding.end(), std::uint8_t{0}));
}

void FeatureBundle::validate() const {
  const std::string where = "bundle " + slide_id + "/" + region_id + ": ";
  if (n > kMaxBundleRows) throw Error(ErrorCode::InvalidArgument, where + "more than 400 rows");
  if (features.size() != n * d || positions.size() != n || padding.size() != n) {
    throw Error(ErrorCode::InvalidArgument, where + "array sizes disagree with N=" + std::to_string(n) +
                                                " D=" + std::to_string(d));
  }
  std::set<GridPos> seen;
  for (std::size_t i = 0; i < n; ++i) {
    if (!seen.insert(positions[i]).second) {
      throw Error(ErrorCode::InvalidArgument, where + "duplicate position (" + std::to_string(positions[i].row) +
                                                  "," + std::to_string(positions[i].col) + ")");
    }
    if (padding[i] && std::any_of(row(i), row(i) + d, [](float v) { return v != 0.0f; })) {
      throw Error(ErrorCode::InvalidArgument, where + "padding row " + std::to_string(i) + " is not zero");
    }
  }
}

void write_feature_store(const std::filesystem::path& path, const std::vector<FeatureBundle>& bundles) {
  for (const auto& b : bundles) b.validate();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::Io, "cannot write " + path.string());
  os.write("ENDF", 4);
  binary::write_u32(os, kFeatureStoreVersion);
  binary::write_u32(os, static_cast<std::uint32_t>(bundles.size()));
  for (const auto& b : bundles) {
    binary::write_str16(os, b.slide_id);
    binary::write_str16(os, b.region_id);
    binary::write_u32(os, static_cast<std::uint32_t>(b.n));
    binary::write_u32(os, static_cast<std::uint32_t>(b.d));
    for (std::size_t i = 0; i < b.n; ++i) {
      binary::write_u16(os, b.positions[i].row);
      binary::write_u16(os, b.positions[i].col);
      binary::write_u8(os, b.padding[i]);
    }
    std::string raw(b.features.size() * 4, '\0');
    for (std::size_t k = 0; k < b.features.size(); ++k) {
      const auto bits = std::bit_cast<std::uint32_t>(b.features[k]);
      for (int j = 0; j < 4; ++j) raw[4 * k + j] = static_cast<char>((bits >> (8 * j)) & 0xff);
    }
    binary::write_bytes(os, raw);
  }
  if (!os) throw Error(ErrorCode::Io, "write failed for " + path.string());
}

std::vector<FeatureBundle> read_feature_store(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::Io, "cannot open feature store " + path.string());
  binary::expect_magic(is, "ENDF", "feature store");
  const auto version = binary::read_u32(is, "feature store version");
  if (version != kFeatureStoreVersion) {
    throw Error(ErrorCode::Corrupt, "unsupported feature store version " + std::to_string(version));
  }
  const auto count = binary::read_u32(is, "bundle count");
  std::vector<FeatureBundle> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    FeatureBundle b;
    b.slide_id = binary::read_str16(is, "slide id");
    b.region_id = binary::read_str16(is, "region id");
    b.n = binary::read_u32(is, "N");
    b.d = binary::read_u32(is, "D");
    if (b.n > kMaxBundleRows) throw Error(ErrorCode::Corrupt, "bundle with N=" + std::to_string(b.n));
    b.positions.resize(b.n);
    b.padding.resize(b.n);
    for (std::size_t i = 0; i < b.n; ++i) {
      b.positions[i].row = binary::read_u16(is, "position");
      b.positions[i].col = binary::read_u16(is, "position");
      b.padding[i] = binary::read_u8(is, "padding flag");
    }
    const std::string raw = binary::read_string(is, b.n * b.d * 4, "features");
    b.features.resize(b.n * b.d);
    for (std::size_t i = 0; i < b.features.size(); ++i) {
      std::uint32_t bits = 0;
      for (int j = 0; j < 4; ++j) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[4 * i + j])) << (8 * j);
      b.features[i] = std::bit_cast<float>(bits);
    }
    try {
      b.validate();
    } catch (const Error& e) {
      throw Error(ErrorCode::Corrupt, e.detail());
    }
    out.push_back(std::move(b));
  }
  return out;
}

FeatureBundle extract_features(const ResNet& model, const wsi::PatchGrid& grid, const std::string& slide_id,
                               int jobs, std::size_t batch_size) {
  if (batch_size == 0) throw Error(ErrorCode::InvalidArgument, "batch size must be >= 1");
  FeatureBundle b;
  b.slide_id = slide_id;
  b.region_id = grid.region.id();
  b.n = grid.slots.size();
  b.d = model.config().feature_dim();
  if (b.n > kMaxBundleRows) throw Error(ErrorCode::InvalidArgument, "patch grid has more than 400 slots");
  b.features.assign(b.n * b.d, 0.0f);
  b.positions.resize(b.n);
  b.padding.resize(b.n);
  std::vector<std::size_t> real;
  for (std::size_t i = 0; i < b.n; ++i) {
    const auto& s = grid.slots[i];
    b.positions[i] = {static_cast<std::uint16_t>(s.row), static_cast<std::uint16_t>(s.col)};
    b.padding[i] = s.padding ? 1 : 0;
    if (!s.padding) real.push_back(i);
  }
  // Eval mode never writes the running buffers, so the shared handles are
  // safe to read from several threads.
  ResNet& net = const_cast<ResNet&>(model);
  constexpr std::size_t kPixels = 3 * kInputPx * kInputPx;
  const std::size_t batches = (real.size() + batch_size - 1) / batch_size;
  parallel_for(batches, jobs, [&](std::size_t bi) {
    const std::size_t begin = bi * batch_size;
    const std::size_t n = std::min(batch_size, real.size() - begin);
    TensorF x({n, 3, kInputPx, kInputPx});
    for (std::size_t i = 0; i < n; ++i) {
      preprocess_into(grid.slots[real[begin + i]].pixels, x.data().data() + i * kPixels);
    }
    const TensorF f = net.features(x, false);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(f.data().data() + i * b.d, b.d, b.features.data() + real[begin + i] * b.d);
    }
  });
  return b;
}

}  // namespace endonet::features
