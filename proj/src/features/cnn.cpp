#include "endonet/features/cnn.hpp"

#include <cmath>
#include <json.hpp>

#include "endonet/common/error.hpp"
#include "endonet/common/rng.hpp"
#include "endonet/tensor/checkpoint.hpp"
#include "endonet/tensor/ops.hpp"
#include "endonet/wsi/manifest.hpp"

namespace endonet::features {

namespace ops = tensor::ops;

std::size_t CnnConfig::scaled(std::size_t channels) const {
  const auto c = static_cast<std::size_t>(std::llround(static_cast<double>(channels) * width_multiplier));
  return std::max<std::size_t>(1, c);
}

void CnnConfig::validate() const {
  if (!(width_multiplier > 0.0) || !std::isfinite(width_multiplier)) {
    throw Error(ErrorCode::InvalidArgument, "width multiplier must be > 0, got " + std::to_string(width_multiplier));
  }
  if (num_classes != 2 && num_classes != 5) {
    throw Error(ErrorCode::InvalidArgument, "num_classes must be 2 or 5, got " + std::to_string(num_classes));
  }
  if (blocks_per_stage == 0 || stem_channels == 0) {
    throw Error(ErrorCode::InvalidArgument, "empty CNN layout");
  }
}

std::string CnnConfig::to_json() const {
  nlohmann::json j{{"stem_channels", stem_channels},
                   {"stage_channels", stage_channels},
                   {"blocks_per_stage", blocks_per_stage},
                   {"width_multiplier", width_multiplier},
                   {"num_classes", num_classes}};
  return j.dump();
}

CnnConfig CnnConfig::from_json(const std::string& text) {
  CnnConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.stem_channels = j.value("stem_channels", c.stem_channels);
    c.stage_channels = j.value("stage_channels", c.stage_channels);
    c.blocks_per_stage = j.value("blocks_per_stage", c.blocks_per_stage);
    c.width_multiplier = j.value("width_multiplier", c.width_multiplier);
    c.num_classes = j.value("num_classes", c.num_classes);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedInput, std::string("CNN config: ") + e.what());
  }
  c.validate();
  return c;
}

void preprocess_into(const wsi::Image& img, float* dst, bool flip_h, bool flip_v) {
  if (img.width != kInputPx || img.height != kInputPx) {
    throw Error(ErrorCode::ShapeMismatch, "patch must be 224x224, got " + std::to_string(img.width) + "x" +
                                              std::to_string(img.height));
  }
  constexpr std::size_t n = kInputPx;
  std::array<float, 256 * 3> lut;
  for (int c = 0; c < 3; ++c) {
    for (int v = 0; v < 256; ++v) lut[c * 256 + v] = (static_cast<float>(v) / 255.0f - kChannelMean[c]) / kChannelStd[c];
  }
  for (std::size_t y = 0; y < n; ++y) {
    const std::size_t sy = flip_v ? n - 1 - y : y;
    const std::uint8_t* row = img.pixels.data() + sy * n * 3;
    for (std::size_t x = 0; x < n; ++x) {
      const std::size_t sx = flip_h ? n - 1 - x : x;
      for (std::size_t c = 0; c < 3; ++c) dst[c * n * n + y * n + x] = lut[c * 256 + row[sx * 3 + c]];
    }
  }
}

ResNet::ConvBn ResNet::add_conv_bn(const std::string& prefix, std::size_t in, std::size_t out, std::size_t k,
                                   std::size_t stride, std::size_t padding, bool zero_gamma, std::uint64_t seed) {
  Rng rng(derive_key(seed, fnv1a64(prefix)));
  TensorF w({out, in, k, k});
  const double std_dev = std::sqrt(2.0 / static_cast<double>(in * k * k));
  for (auto& v : w.values()) v = static_cast<float>(rng.normal() * std_dev);
  ConvBn cb{};
  cb.stride = stride;
  cb.padding = padding;
  cb.weight = params_.size();
  params_.push_back({prefix + ".conv.weight", w});
  cb.gamma = params_.size();
  params_.push_back({prefix + ".bn.gamma", TensorF({out}, zero_gamma ? 0.0f : 1.0f)});
  cb.beta = params_.size();
  params_.push_back({prefix + ".bn.beta", TensorF({out}, 0.0f)});
  cb.mean = buffers_.size();
  buffers_.push_back({prefix + ".bn.running_mean", TensorF({out}, 0.0f)});
  cb.var = buffers_.size();
  buffers_.push_back({prefix + ".bn.running_var", TensorF({out}, 1.0f)});
  return cb;
}

ResNet::ResNet(CnnConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  const std::size_t stem = config_.scaled(config_.stem_channels);
  stem_ = add_conv_bn("cnn.stem", 3, stem, 7, 2, 3, false, seed);
  std::size_t in = stem;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t out = config_.scaled(config_.stage_channels[s]);
    for (std::size_t b = 0; b < config_.blocks_per_stage; ++b) {
      const std::string prefix = "cnn.stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      Block blk;
      blk.conv1 = add_conv_bn(prefix + ".a", in, out, 3, stride, 1, false, seed);
      blk.conv2 = add_conv_bn(prefix + ".b", out, out, 3, 1, 1, true, seed);
      if (stride != 1 || in != out) {
        blk.has_down = true;
        blk.down = add_conv_bn(prefix + ".down", in, out, 1, stride, 0, false, seed);
      }
      blocks_.push_back(blk);
      in = out;
    }
  }
  const std::size_t d = config_.feature_dim();
  Rng rng(derive_key(seed, fnv1a64("cnn.head")));
  TensorF hw({d, config_.num_classes});
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  for (auto& v : hw.values()) v = static_cast<float>(rng.uniform(-bound, bound));
  head_w_ = params_.size();
  params_.push_back({"cnn.head.weight", hw});
  head_b_ = params_.size();
  params_.push_back({"cnn.head.bias", TensorF({config_.num_classes}, 0.0f)});
  for (auto& p : params_) p.tensor.set_requires_grad(true);
}

std::size_t ResNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

TensorF ResNet::apply(const ConvBn& cb, const TensorF& x, bool training) {
  TensorF y = ops::conv2d(x, params_[cb.weight].tensor, TensorF{}, {cb.stride, cb.padding});
  return ops::batch_norm(y, params_[cb.gamma].tensor, params_[cb.beta].tensor, buffers_[cb.mean].tensor,
                         buffers_[cb.var].tensor, training);
}

TensorF ResNet::features(const TensorF& x, bool training) {
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != kInputPx || x.dim(3) != kInputPx) {
    throw Error(ErrorCode::ShapeMismatch, "CNN input must be [N,3,224,224], got " + tensor::shape_string(x.shape()));
  }
  TensorF h = ops::relu(apply(stem_, x, training));
  h = ops::max_pool(h, ops::Pool2dAttrs{3, 3, 2, 1});
  for (const auto& blk : blocks_) {
    TensorF y = ops::relu(apply(blk.conv1, h, training));
    y = apply(blk.conv2, y, training);
    TensorF shortcut = blk.has_down ? apply(blk.down, h, training) : h;
    h = ops::relu(ops::add(y, shortcut));
  }
  return ops::global_avg_pool(h);
}

TensorF ResNet::head(const TensorF& feats) {
  return ops::add(ops::matmul(feats, params_[head_w_].tensor), params_[head_b_].tensor);
}

TensorF ResNet::logits(const TensorF& x, bool training) { return head(features(x, training)); }

TensorList ResNet::state() const {
  TensorList out = params_;
  out.insert(out.end(), buffers_.begin(), buffers_.end());
  return out;
}

void ResNet::load_state(const TensorList& state) {
  tensor::assign_tensors(params_, state);
  tensor::assign_tensors(buffers_, state);
}

float prob_high(const TensorF& logits, std::size_t row) {
  const std::size_t c = logits.dim(1);
  const float* z = logits.data().data() + row * c;
  float m = z[0];
  for (std::size_t k = 1; k < c; ++k) m = std::max(m, z[k]);
  double total = 0, high = 0;
  for (std::size_t k = 0; k < c; ++k) {
    const double e = std::exp(static_cast<double>(z[k] - m));
    total += e;
    const bool is_high = c == 2 ? k == 1 : wsi::grade_of(wsi::kAllSubtypes[k]) == wsi::Grade::High;
    if (is_high) high += e;
  }
  return static_cast<float>(high / total);
}

}  // namespace endonet::features

namespace endonet::features {

void save_cnn(const std::filesystem::path& path, const ResNet& model) {
  tensor::Checkpoint ckpt;
  ckpt.stage = "cnn";
  ckpt.config_json = model.config().to_json();
  ckpt.set_segment("model", model.state());
  tensor::save_checkpoint(path, ckpt);
}

ResNet load_cnn(const std::filesystem::path& path) {
  const auto ckpt = tensor::load_checkpoint(path);
  if (ckpt.stage != "cnn") {
    throw Error(ErrorCode::InvalidArgument, path.string() + " is a '" + ckpt.stage + "' checkpoint, expected 'cnn'");
  }
  ResNet model(CnnConfig::from_json(ckpt.config_json), 0);
  model.load_state(ckpt.segment("model"));
  return model;
}

}  // namespace endonet::features
