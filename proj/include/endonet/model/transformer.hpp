#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "endonet/features/feature_store.hpp"
#include "endonet/tensor/tensor.hpp"

namespace endonet::model {

using features::FeatureBundle;
using features::GridPos;
using tensor::TensorF;
using tensor::TensorList;

struct EncoderConfig {
  std::size_t d_model = 128;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t ffn = 512;
  double mask_ratio = 0.5;
  bool block_mask = false;  // mask square blocks of slots instead of independent slots
  std::size_t grid_rows = 20;
  std::size_t grid_cols = 20;
  std::size_t feature_dim = 128;

  std::size_t seq_len() const { return grid_rows * grid_cols + 1; }
  void validate() const;
  std::string to_json() const;
  static EncoderConfig from_json(const std::string& text);
};

enum class SlotKind : std::uint8_t { cls, patch, masked, padding };

/// Slot 0 is the class token; slot i > 0 holds bundle row i - 1.
struct TokenSequence {
  TensorF tokens;  // [S, d_model], attached to the active graph
  std::vector<SlotKind> kinds;
  std::vector<GridPos> positions;  // per slot; slot 0 unused

  std::size_t size() const { return kinds.size(); }
  std::size_t real_patches() const;
};

struct MaskedSequence {
  TokenSequence seq;
  std::vector<std::size_t> masked;  // slot indices, ascending
};

/// attention[l][h] is the [S,S] row-stochastic matrix of layer l, head h.
struct AttentionTrace {
  std::vector<std::vector<TensorF>> attention;
  std::vector<std::size_t> layer_index;  // source layer of each captured entry
  bool empty() const { return attention.empty(); }
};

enum class TraceMode : std::uint8_t { none, last, all };

struct Encoded {
  TensorF hidden;  // [S, d_model] after the final layer norm
  AttentionTrace trace;
  TensorF class_token() const;  // [1, d_model]
};

struct SlidePrediction {
  TensorF logits;  // [1, 2] (Low, High)
  float prob_high = 0.5f;
};

/// Region transformer with [C] class and [M] mask tokens, a learned (row,col)
/// positional table, pre-norm encoder blocks and reconstruction /
/// classification heads. Parameter names: "tokens.class", "tokens.mask",
/// "pos.table", "encoder.*", "heads.*". Feature standardization statistics
/// live in the buffers "norm.mean" / "norm.std" (identity by default).
class EndoNet {
 public:
  EndoNet(EncoderConfig config, std::uint64_t seed);

  const EncoderConfig& config() const noexcept { return config_; }
  TensorList& parameters() noexcept { return params_; }
  const TensorList& parameters() const noexcept { return params_; }
  TensorList& buffers() noexcept { return buffers_; }
  const TensorList& buffers() const noexcept { return buffers_; }
  std::size_t parameter_count() const;
  TensorList state() const;
  void load_state(const TensorList& state);

  /// Per-dimension mean/std over the non-padding rows; std below 1e-6 maps to 1.
  void fit_normalization(const std::vector<const FeatureBundle*>& bundles);
  /// Standardized feature matrix [N, D]; padding rows stay zero.
  TensorF normalized_features(const FeatureBundle& bundle) const;

  TokenSequence embed_region(const FeatureBundle& bundle) const;
  /// round(ratio * real patches) patch slots replaced by [M] + positional
  /// embedding; other rows are copied bit-exactly.
  MaskedSequence apply_mask(const TokenSequence& seq, double ratio, std::uint64_t seed) const;
  Encoded encode(const TokenSequence& seq, TraceMode trace = TraceMode::none) const;
  /// MSE over masked slots between the reconstruction head and the
  /// standardized original features.
  TensorF reconstruction_loss(const TensorF& hidden, const std::vector<std::size_t>& masked,
                              const FeatureBundle& bundle) const;
  /// Mean of the K class tokens [K, d_model], then the linear head.
  SlidePrediction classify_slide(const TensorF& class_tokens) const;

 private:
  struct Layer {
    TensorF ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  TensorF add_param(const std::string& name, tensor::Shape shape, int init, std::uint64_t seed);

  EncoderConfig config_;
  TensorList params_;
  TensorList buffers_;
  TensorF cls_, mask_, pos_, proj_w_, proj_b_, final_g_, final_b_, rec_w_, rec_b_, head_w_, head_b_;
  std::vector<Layer> layers_;
};

}  // namespace endonet::model
