#pragma once

#include <filesystem>
#include <iosfwd>

#include "endonet/tensor/tensor.hpp"

// Named-tensor checkpoint segment:
//   "ENDT" | u32 version=1 | u32 count |
//   count x { u16 name_len | name | u8 rank | u32 dims[rank] | f32 data[prod(dims)] }
// All integers and floats little-endian.
namespace endonet::tensor {

inline constexpr std::uint32_t kTensorSegmentVersion = 1;

void write_tensor_segment(std::ostream& os, const TensorList& tensors);
TensorList read_tensor_segment(std::istream& is);

void save_tensors(const std::filesystem::path& path, const TensorList& tensors);
TensorList load_tensors(const std::filesystem::path& path);

}  // namespace endonet::tensor
