#include "endonet/tensor/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "endonet/common/binary_io.hpp"
#include "endonet/common/error.hpp"
#include "endonet/tensor/serialize.hpp"

namespace endonet::tensor {

const TensorList& Checkpoint::segment(const std::string& name) const {
  for (const auto& s : segments) {
    if (s.name == name) return s.tensors;
  }
  throw Error(ErrorCode::InvalidArgument, "checkpoint (stage " + stage + ") has no segment '" + name + "'");
}

bool Checkpoint::has_segment(const std::string& name) const {
  return std::any_of(segments.begin(), segments.end(), [&](const auto& s) { return s.name == name; });
}

void Checkpoint::set_segment(const std::string& name, TensorList tensors) {
  for (auto& s : segments) {
    if (s.name == name) {
      s.tensors = std::move(tensors);
      return;
    }
  }
  segments.push_back({name, std::move(tensors)});
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::Io, "cannot write " + path.string());
  os.write("ENDC", 4);
  binary::write_u32(os, kCheckpointVersion);
  binary::write_str16(os, ckpt.stage);
  binary::write_u32(os, static_cast<std::uint32_t>(ckpt.config_json.size()));
  binary::write_bytes(os, ckpt.config_json);
  binary::write_u64(os, ckpt.rng_state);
  binary::write_u32(os, ckpt.epoch);
  binary::write_u32(os, ckpt.step);
  binary::write_u32(os, static_cast<std::uint32_t>(ckpt.segments.size()));
  for (const auto& s : ckpt.segments) {
    binary::write_str16(os, s.name);
    write_tensor_segment(os, s.tensors);
  }
  if (!os) throw Error(ErrorCode::Io, "write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::Io, "cannot open checkpoint " + path.string());
  binary::expect_magic(is, "ENDC", "checkpoint");
  const auto version = binary::read_u32(is, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::Corrupt, "unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  c.stage = binary::read_str16(is, "stage tag");
  c.config_json = binary::read_string(is, binary::read_u32(is, "config length"), "config");
  c.rng_state = binary::read_u64(is, "rng state");
  c.epoch = binary::read_u32(is, "epoch");
  c.step = binary::read_u32(is, "step");
  const auto count = binary::read_u32(is, "segment count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointSegment s;
    s.name = binary::read_str16(is, "segment name");
    s.tensors = read_tensor_segment(is);
    c.segments.push_back(std::move(s));
  }
  return c;
}

void assign_tensors(TensorList& target, const TensorList& source) {
  for (auto& [name, t] : target) {
    const TensorF* src = nullptr;
    for (const auto& s : source) {
      if (s.name == name) src = &s.tensor;
    }
    if (src == nullptr) throw Error(ErrorCode::ShapeMismatch, "checkpoint lacks tensor '" + name + "'");
    if (src->shape() != t.shape()) {
      throw Error(ErrorCode::ShapeMismatch, "tensor '" + name + "': checkpoint " + shape_string(src->shape()) +
                                                " vs model " + shape_string(t.shape()));
    }
    std::copy(src->data().begin(), src->data().end(), t.data().begin());
  }
}

TensorList clone_tensors(const TensorList& list) {
  TensorList out;
  out.reserve(list.size());
  for (const auto& [name, t] : list) out.push_back({name, t.clone()});
  return out;
}

std::uint64_t tensors_checksum(const TensorList& list) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : list) {
    feed(name.data(), name.size());
    for (auto d : t.shape()) feed(&d, sizeof d);
    feed(t.data().data(), t.numel() * sizeof(float));
  }
  return h;
}

}  // namespace endonet::tensor
