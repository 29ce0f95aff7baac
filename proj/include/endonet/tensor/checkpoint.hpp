#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "endonet/tensor/tensor.hpp"

// Training checkpoint container:
//   "ENDC" | u32 version=1 | u16 len + stage tag | u32 len + config JSON |
//   u64 rng state | u32 epoch | u32 step | u32 segment count |
//   count x { u16 len + segment name | ENDT segment }
namespace endonet::tensor {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointSegment {
  std::string name;
  TensorList tensors;
};

struct Checkpoint {
  std::string stage;        // "cnn", "pretrain" or "finetune"
  std::string config_json;  // snapshot of the producing config
  std::uint64_t rng_state = 0;
  std::uint32_t epoch = 0;  // completed epochs
  std::uint32_t step = 0;   // completed steps within the current epoch
  std::vector<CheckpointSegment> segments;

  /// Throws InvalidArgument when absent.
  const TensorList& segment(const std::string& name) const;
  bool has_segment(const std::string& name) const;
  void set_segment(const std::string& name, TensorList tensors);
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws Corrupt on bad magic, version or truncation.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies `source` values into same-named tensors of `target`. Every target
/// tensor must be present with an identical shape (ShapeMismatch otherwise).
void assign_tensors(TensorList& target, const TensorList& source);

/// Deep copy of every tensor.
TensorList clone_tensors(const TensorList& list);

/// FNV-1a over names, shapes and raw bytes; used for freeze checks and logs.
std::uint64_t tensors_checksum(const TensorList& list);

}  // namespace endonet::tensor
