#include "endonet/tensor/serialize.hpp"

#include <fstream>

#include "endonet/common/binary_io.hpp"
#include "endonet/common/error.hpp"

namespace endonet::tensor {

void write_tensor_segment(std::ostream& os, const TensorList& tensors) {
  os.write("ENDT", 4);
  binary::write_u32(os, kTensorSegmentVersion);
  binary::write_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    binary::write_str16(os, name);
    if (t.rank() > 255) throw Error(ErrorCode::InvalidArgument, "tensor '" + name + "' rank > 255");
    binary::write_u8(os, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) binary::write_u32(os, static_cast<std::uint32_t>(d));
    for (float v : t.data()) binary::write_f32(os, v);
  }
}

TensorList read_tensor_segment(std::istream& is) {
  binary::expect_magic(is, "ENDT", "tensor segment");
  const auto version = binary::read_u32(is, "tensor segment version");
  if (version != kTensorSegmentVersion) {
    throw Error(ErrorCode::Corrupt, "unsupported tensor segment version " + std::to_string(version));
  }
  const auto count = binary::read_u32(is, "tensor count");
  TensorList out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor nt;
    nt.name = binary::read_str16(is, "tensor name");
    const auto rank = binary::read_u8(is, "tensor rank");
    Shape shape(rank);
    for (auto& d : shape) d = binary::read_u32(is, "tensor dims");
    const std::size_t n = shape_numel(shape);
    std::vector<float> data(n);
    std::vector<char> raw(n * 4);
    if (n) binary::read_exact(is, raw.data(), raw.size(), "tensor data");
    for (std::size_t k = 0; k < n; ++k) {
      const auto* b = reinterpret_cast<const unsigned char*>(raw.data() + 4 * k);
      const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                                 (static_cast<std::uint32_t>(b[2]) << 16) |
                                 (static_cast<std::uint32_t>(b[3]) << 24);
      data[k] = std::bit_cast<float>(bits);
    }
    nt.tensor = TensorF(std::move(shape), std::move(data));
    out.push_back(std::move(nt));
  }
  return out;
}

void save_tensors(const std::filesystem::path& path, const TensorList& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::Io, "cannot write " + path.string());
  write_tensor_segment(os, tensors);
  if (!os) throw Error(ErrorCode::Io, "write failed for " + path.string());
}

TensorList load_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::Io, "cannot open " + path.string());
  return read_tensor_segment(is);
}

}  // namespace endonet::tensor
