#pragma once

#include <array>
#include <filesystem>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "endonet/tensor/tensor.hpp"
#include "endonet/wsi/image.hpp"

namespace endonet::features {

using tensor::TensorF;
using tensor::TensorList;

inline constexpr std::size_t kInputPx = 224;

/// ResNet-18 layout: 7x7/2 stem, 3x3/2 max pool, four stages of two basic
/// blocks. Channel counts are the full-width values scaled by
/// width_multiplier (rounded, at least 1).
struct CnnConfig {
  std::size_t stem_channels = 64;
  std::array<std::size_t, 4> stage_channels{64, 128, 256, 512};
  std::size_t blocks_per_stage = 2;
  double width_multiplier = 0.25;
  std::size_t num_classes = 2;  // 2: Low/High, 5: subtypes

  std::size_t scaled(std::size_t channels) const;
  std::size_t feature_dim() const { return scaled(stage_channels[3]); }
  void validate() const;
  std::string to_json() const;
  static CnnConfig from_json(const std::string& text);
};

/// Per-channel normalization applied to RGB in [0,1].
inline constexpr std::array<float, 3> kChannelMean{0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kChannelStd{0.229f, 0.224f, 0.225f};

/// Writes one 224x224 RGB8 image as normalized CHW floats into `dst`
/// (3*224*224 values). Optional mirror flips for augmentation.
void preprocess_into(const wsi::Image& img, float* dst, bool flip_h = false, bool flip_v = false);

class ResNet {
 public:
  /// He-normal conv init (fan-in), unit BN scale except the last BN of each
  /// residual block, which starts at zero; head uniform(+-1/sqrt(D)).
  ResNet(CnnConfig config, std::uint64_t seed);

  const CnnConfig& config() const noexcept { return config_; }
  TensorList& parameters() noexcept { return params_; }
  const TensorList& parameters() const noexcept { return params_; }
  /// Batch-norm running statistics (not trained by the optimizer).
  TensorList& buffers() noexcept { return buffers_; }
  const TensorList& buffers() const noexcept { return buffers_; }
  std::size_t parameter_count() const;

  /// x [N,3,224,224] -> [N,D] globally pooled final-stage activations.
  /// Training mode uses batch statistics and updates the running buffers.
  TensorF features(const TensorF& x, bool training);
  /// Head logits [N,num_classes] on top of features().
  TensorF logits(const TensorF& x, bool training);
  TensorF head(const TensorF& feats);

  /// Parameters followed by buffers.
  TensorList state() const;
  /// Throws ShapeMismatch when any tensor is missing or mis-shaped.
  void load_state(const TensorList& state);

 private:
  struct ConvBn {
    std::size_t weight, gamma, beta;  // indices into params_
    std::size_t mean, var;            // indices into buffers_
    std::size_t stride, padding;
  };
  struct Block {
    ConvBn conv1, conv2;
    bool has_down = false;
    ConvBn down{};
  };

  ConvBn add_conv_bn(const std::string& prefix, std::size_t in, std::size_t out, std::size_t k,
                     std::size_t stride, std::size_t padding, bool zero_gamma, std::uint64_t seed);
  TensorF apply(const ConvBn& cb, const TensorF& x, bool training);

  CnnConfig config_;
  TensorList params_;
  TensorList buffers_;
  ConvBn stem_{};
  std::vector<Block> blocks_;
  std::size_t head_w_ = 0, head_b_ = 0;
};

/// Probability of the High grade from head logits of one row: softmax over
/// classes, summing High-grade subtypes for a 5-class head.
float prob_high(const TensorF& logits, std::size_t row);

}  // namespace endonet::features

namespace endonet::features {

/// Stage-"cnn" checkpoint: config JSON plus one "model" segment.
void save_cnn(const std::filesystem::path& path, const ResNet& model);
/// Throws InvalidArgument for a checkpoint of another stage.
ResNet load_cnn(const std::filesystem::path& path);

}  // namespace endonet::features
