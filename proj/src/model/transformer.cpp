#include "endonet/model/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>

#include "endonet/common/error.hpp"
#include "endonet/common/rng.hpp"
#include "endonet/tensor/checkpoint.hpp"
#include "endonet/tensor/ops.hpp"
#include "endonet/wsi/regions.hpp"

namespace endonet::model {

namespace ops = tensor::ops;

namespace {

enum Init : int { kZeros, kOnes, kXavier, kSmallNormal };

}  // namespace

void EncoderConfig::validate() const {
  auto bad = [](const std::string& m) { throw Error(ErrorCode::InvalidArgument, "encoder config: " + m); };
  if (d_model == 0 || layers == 0 || heads == 0 || ffn == 0 || feature_dim == 0) bad("sizes must be >= 1");
  if (d_model % heads != 0) bad("d_model " + std::to_string(d_model) + " not divisible by heads " + std::to_string(heads));
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) bad("mask_ratio must lie in [0,1]");
  if (grid_rows == 0 || grid_cols == 0 || grid_rows > 0xffff || grid_cols > 0xffff) bad("invalid grid");
}

std::string EncoderConfig::to_json() const {
  nlohmann::json j{{"d_model", d_model},     {"layers", layers},         {"heads", heads},
                   {"ffn", ffn},             {"mask_ratio", mask_ratio}, {"block_mask", block_mask},
                   {"grid_rows", grid_rows}, {"grid_cols", grid_cols},   {"feature_dim", feature_dim}};
  return j.dump();
}

EncoderConfig EncoderConfig::from_json(const std::string& text) {
  EncoderConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.d_model = j.value("d_model", c.d_model);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.ffn = j.value("ffn", c.ffn);
    c.mask_ratio = j.value("mask_ratio", c.mask_ratio);
    c.block_mask = j.value("block_mask", c.block_mask);
    c.grid_rows = j.value("grid_rows", c.grid_rows);
    c.grid_cols = j.value("grid_cols", c.grid_cols);
    c.feature_dim = j.value("feature_dim", c.feature_dim);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedInput, std::string("encoder config: ") + e.what());
  }
  c.validate();
  return c;
}

std::size_t TokenSequence::real_patches() const {
  return static_cast<std::size_t>(
      std::count_if(kinds.begin(), kinds.end(), [](SlotKind k) { return k == SlotKind::patch || k == SlotKind::masked; }));
}

TensorF Encoded::class_token() const { return ops::slice(hidden, 0, 0, 1); }

TensorF EndoNet::add_param(const std::string& name, tensor::Shape shape, int init, std::uint64_t seed) {
  TensorF t(shape);
  Rng rng(derive_key(seed, fnv1a64(name)));
  if (init == kOnes) {
    std::fill(t.values().begin(), t.values().end(), 1.0f);
  } else if (init == kXavier) {
    const double bound = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
    for (auto& v : t.values()) v = static_cast<float>(rng.uniform(-bound, bound));
  } else if (init == kSmallNormal) {
    for (auto& v : t.values()) v = static_cast<float>(0.02 * rng.normal());
  }
  t.set_requires_grad(true);
  params_.push_back({name, t});
  return t;
}

EndoNet::EndoNet(EncoderConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model, f = config_.feature_dim;
  cls_ = add_param("tokens.class", {1, d}, kSmallNormal, seed);
  mask_ = add_param("tokens.mask", {1, d}, kSmallNormal, seed);
  pos_ = add_param("pos.table", {config_.grid_rows * config_.grid_cols, d}, kSmallNormal, seed);
  proj_w_ = add_param("encoder.proj.weight", {f, d}, kXavier, seed);
  proj_b_ = add_param("encoder.proj.bias", {d}, kZeros, seed);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string p = "encoder.layer" + std::to_string(l) + ".";
    Layer L;
    L.ln1_g = add_param(p + "ln1.gamma", {d}, kOnes, seed);
    L.ln1_b = add_param(p + "ln1.beta", {d}, kZeros, seed);
    L.wq = add_param(p + "attn.wq", {d, d}, kXavier, seed);
    L.bq = add_param(p + "attn.bq", {d}, kZeros, seed);
    L.wk = add_param(p + "attn.wk", {d, d}, kXavier, seed);
    L.bk = add_param(p + "attn.bk", {d}, kZeros, seed);
    L.wv = add_param(p + "attn.wv", {d, d}, kXavier, seed);
    L.bv = add_param(p + "attn.bv", {d}, kZeros, seed);
    L.wo = add_param(p + "attn.wo", {d, d}, kXavier, seed);
    L.bo = add_param(p + "attn.bo", {d}, kZeros, seed);
    L.ln2_g = add_param(p + "ln2.gamma", {d}, kOnes, seed);
    L.ln2_b = add_param(p + "ln2.beta", {d}, kZeros, seed);
    L.w1 = add_param(p + "ffn.w1", {d, config_.ffn}, kXavier, seed);
    L.b1 = add_param(p + "ffn.b1", {config_.ffn}, kZeros, seed);
    L.w2 = add_param(p + "ffn.w2", {config_.ffn, d}, kXavier, seed);
    L.b2 = add_param(p + "ffn.b2", {d}, kZeros, seed);
    layers_.push_back(L);
  }
  final_g_ = add_param("encoder.final_ln.gamma", {d}, kOnes, seed);
  final_b_ = add_param("encoder.final_ln.beta", {d}, kZeros, seed);
  rec_w_ = add_param("heads.recon.weight", {d, f}, kXavier, seed);
  rec_b_ = add_param("heads.recon.bias", {f}, kZeros, seed);
  head_w_ = add_param("heads.cls.weight", {d, 2}, kXavier, seed);
  head_b_ = add_param("heads.cls.bias", {2}, kZeros, seed);
  buffers_.push_back({"norm.mean", TensorF({f}, 0.0f)});
  buffers_.push_back({"norm.std", TensorF({f}, 1.0f)});
}

std::size_t EndoNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

TensorList EndoNet::state() const {
  TensorList out = params_;
  out.insert(out.end(), buffers_.begin(), buffers_.end());
  return out;
}

void EndoNet::load_state(const TensorList& state) {
  tensor::assign_tensors(params_, state);
  tensor::assign_tensors(buffers_, state);
}

void EndoNet::fit_normalization(const std::vector<const FeatureBundle*>& bundles) {
  const std::size_t f = config_.feature_dim;
  std::vector<double> sum(f, 0.0), sq(f, 0.0);
  std::size_t rows = 0;
  for (const auto* b : bundles) {
    if (b->d != f) throw Error(ErrorCode::ShapeMismatch, "bundle feature dim " + std::to_string(b->d) + " != " + std::to_string(f));
    for (std::size_t i = 0; i < b->n; ++i) {
      if (b->padding[i]) continue;
      ++rows;
      for (std::size_t k = 0; k < f; ++k) sum[k] += b->row(i)[k];
    }
  }
  if (rows == 0) throw Error(ErrorCode::EmptyInput, "no feature rows to fit normalization");
  std::vector<double> mean(f);
  for (std::size_t k = 0; k < f; ++k) mean[k] = sum[k] / static_cast<double>(rows);
  for (const auto* b : bundles) {
    for (std::size_t i = 0; i < b->n; ++i) {
      if (b->padding[i]) continue;
      for (std::size_t k = 0; k < f; ++k) {
        const double e = b->row(i)[k] - mean[k];
        sq[k] += e * e;
      }
    }
  }
  auto& m = buffers_[0].tensor;
  auto& s = buffers_[1].tensor;
  for (std::size_t k = 0; k < f; ++k) {
    const double sd = std::sqrt(sq[k] / static_cast<double>(rows));
    m[k] = static_cast<float>(mean[k]);
    s[k] = sd < 1e-6 ? 1.0f : static_cast<float>(sd);
  }
}

TensorF EndoNet::normalized_features(const FeatureBundle& bundle) const {
  const std::size_t f = config_.feature_dim;
  if (bundle.d != f) {
    throw Error(ErrorCode::ShapeMismatch, "bundle " + bundle.slide_id + "/" + bundle.region_id + " has feature dim " +
                                              std::to_string(bundle.d) + ", model expects " + std::to_string(f));
  }
  const auto& m = buffers_[0].tensor;
  const auto& s = buffers_[1].tensor;
  TensorF x({bundle.n, f});
  for (std::size_t i = 0; i < bundle.n; ++i) {
    if (bundle.padding[i]) continue;
    const float* src = bundle.row(i);
    float* dst = x.data().data() + i * f;
    for (std::size_t k = 0; k < f; ++k) dst[k] = (src[k] - m[k]) / s[k];
  }
  return x;
}

TokenSequence EndoNet::embed_region(const FeatureBundle& bundle) const {
  const std::size_t slots = config_.grid_rows * config_.grid_cols;
  if (bundle.n == 0 || bundle.n > slots) {
    throw Error(ErrorCode::ShapeMismatch, "bundle has " + std::to_string(bundle.n) + " rows, grid holds " + std::to_string(slots));
  }
  const TensorF x = normalized_features(bundle);
  std::vector<std::size_t> pos_idx(bundle.n);
  bool any_padding = false;
  TokenSequence seq;
  seq.kinds.push_back(SlotKind::cls);
  seq.positions.push_back({});
  for (std::size_t i = 0; i < bundle.n; ++i) {
    const auto p = bundle.positions[i];
    if (p.row >= config_.grid_rows || p.col >= config_.grid_cols) {
      throw Error(ErrorCode::InvalidArgument, "position (" + std::to_string(p.row) + "," + std::to_string(p.col) +
                                                  ") outside the " + std::to_string(config_.grid_rows) + "x" +
                                                  std::to_string(config_.grid_cols) + " grid");
    }
    pos_idx[i] = p.row * config_.grid_cols + p.col;
    seq.kinds.push_back(bundle.padding[i] ? SlotKind::padding : SlotKind::patch);
    seq.positions.push_back(p);
    any_padding = any_padding || bundle.padding[i];
  }
  TensorF patch = ops::add(ops::add(ops::matmul(x, proj_w_), proj_b_), ops::embedding_lookup(pos_, pos_idx));
  if (any_padding) {
    TensorF keep({bundle.n, 1}, 1.0f);
    for (std::size_t i = 0; i < bundle.n; ++i) {
      if (bundle.padding[i]) keep[i] = 0.0f;
    }
    patch = ops::mul(patch, keep);
  }
  seq.tokens = ops::concat<float>({cls_, patch}, 0);
  return seq;
}

MaskedSequence EndoNet::apply_mask(const TokenSequence& seq, double ratio, std::uint64_t seed) const {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw Error(ErrorCode::InvalidArgument, "mask ratio must lie in [0,1]");
  std::vector<std::size_t> real;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq.kinds[i] == SlotKind::patch) real.push_back(i);
  }
  const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(real.size())));
  MaskedSequence out{seq, {}};
  if (k == 0) return out;

  Rng rng(seed);
  if (!config_.block_mask) {
    for (auto j : wsi::sample_indices(real.size(), k, rng)) out.masked.push_back(real[j]);
  } else {
    // 4x4 blocks anchored at random real slots until k slots are covered
    std::vector<char> taken(seq.size(), 0);
    std::vector<std::size_t> order;
    while (order.size() < k) {
      const auto anchor = seq.positions[real[rng.below(real.size())]];
      for (std::size_t j : real) {
        const auto p = seq.positions[j];
        if (!taken[j] && p.row >= anchor.row && p.row < anchor.row + 4 && p.col >= anchor.col && p.col < anchor.col + 4) {
          taken[j] = 1;
          order.push_back(j);
        }
      }
    }
    order.resize(k);
    out.masked = order;
  }
  std::sort(out.masked.begin(), out.masked.end());

  std::vector<std::size_t> pos_idx, gather(seq.size());
  for (std::size_t i = 0; i < seq.size(); ++i) gather[i] = i;
  for (std::size_t m = 0; m < out.masked.size(); ++m) {
    const std::size_t slot = out.masked[m];
    pos_idx.push_back(seq.positions[slot].row * config_.grid_cols + seq.positions[slot].col);
    gather[slot] = seq.size() + m;
    out.seq.kinds[slot] = SlotKind::masked;
  }
  const TensorF mask_rows = ops::add(ops::embedding_lookup(pos_, pos_idx), mask_);
  out.seq.tokens = ops::embedding_lookup(ops::concat<float>({seq.tokens, mask_rows}, 0), gather);
  return out;
}

Encoded EndoNet::encode(const TokenSequence& seq, TraceMode trace) const {
  const std::size_t s = seq.size(), d = config_.d_model, h = config_.heads, dh = d / h;
  if (!seq.tokens.defined() || seq.tokens.rank() != 2 || seq.tokens.dim(0) != s || seq.tokens.dim(1) != d) {
    throw Error(ErrorCode::ShapeMismatch, "token sequence must be [" + std::to_string(s) + "," + std::to_string(d) + "]");
  }
  TensorF key_mask;
  if (std::find(seq.kinds.begin(), seq.kinds.end(), SlotKind::padding) != seq.kinds.end()) {
    key_mask = TensorF({1, s}, 0.0f);
    for (std::size_t i = 0; i < s; ++i) {
      if (seq.kinds[i] == SlotKind::padding) key_mask[i] = -std::numeric_limits<float>::infinity();
    }
  }
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  Encoded out;
  TensorF x = seq.tokens;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& L = layers_[l];
    const bool capture = trace == TraceMode::all || (trace == TraceMode::last && l + 1 == layers_.size());
    const TensorF a = ops::layer_norm(x, L.ln1_g, L.ln1_b);
    const TensorF q = ops::add(ops::matmul(a, L.wq), L.bq);
    const TensorF k = ops::add(ops::matmul(a, L.wk), L.bk);
    const TensorF v = ops::add(ops::matmul(a, L.wv), L.bv);
    std::vector<TensorF> head_out;
    std::vector<TensorF> probs;
    for (std::size_t hh = 0; hh < h; ++hh) {
      const TensorF qh = ops::slice(q, 1, hh * dh, (hh + 1) * dh);
      const TensorF kh = ops::slice(k, 1, hh * dh, (hh + 1) * dh);
      const TensorF vh = ops::slice(v, 1, hh * dh, (hh + 1) * dh);
      TensorF scores = ops::scale(ops::matmul(qh, kh, false, true), inv_sqrt);
      if (key_mask.defined()) scores = ops::add(scores, key_mask);
      const TensorF p = ops::softmax(scores, -1);
      if (capture) probs.push_back(p);
      head_out.push_back(ops::matmul(p, vh));
    }
    if (capture) {
      out.trace.attention.push_back(std::move(probs));
      out.trace.layer_index.push_back(l);
    }
    const TensorF attn = ops::add(ops::matmul(ops::concat<float>(head_out, 1), L.wo), L.bo);
    x = ops::add(x, attn);
    TensorF f = ops::layer_norm(x, L.ln2_g, L.ln2_b);
    f = ops::gelu(ops::add(ops::matmul(f, L.w1), L.b1));
    f = ops::add(ops::matmul(f, L.w2), L.b2);
    x = ops::add(x, f);
    if (ops::has_non_finite(x)) {
      throw Error(ErrorCode::NaNDetected, "non-finite activations after encoder layer " + std::to_string(l));
    }
  }
  out.hidden = ops::layer_norm(x, final_g_, final_b_);
  return out;
}

TensorF EndoNet::reconstruction_loss(const TensorF& hidden, const std::vector<std::size_t>& masked,
                                     const FeatureBundle& bundle) const {
  if (masked.empty()) throw Error(ErrorCode::EmptyInput, "reconstruction loss needs at least one masked slot");
  const std::size_t f = config_.feature_dim;
  const TensorF all = normalized_features(bundle);
  TensorF target({masked.size(), f});
  for (std::size_t m = 0; m < masked.size(); ++m) {
    const std::size_t slot = masked[m];
    if (slot == 0 || slot > bundle.n) throw Error(ErrorCode::InvalidArgument, "masked slot " + std::to_string(slot) + " is not a patch slot");
    std::copy_n(all.data().data() + (slot - 1) * f, f, target.data().data() + m * f);
  }
  const TensorF pred = ops::add(ops::matmul(ops::embedding_lookup(hidden, masked), rec_w_), rec_b_);
  return ops::mse(pred, target);
}

SlidePrediction EndoNet::classify_slide(const TensorF& class_tokens) const {
  if (!class_tokens.defined() || class_tokens.rank() != 2 || class_tokens.dim(0) == 0) {
    throw Error(ErrorCode::EmptyInput, "classify_slide needs K >= 1 class tokens");
  }
  if (class_tokens.dim(1) != config_.d_model) {
    throw Error(ErrorCode::ShapeMismatch, "class tokens have width " + std::to_string(class_tokens.dim(1)));
  }
  const TensorF pooled = ops::reshape(ops::mean(class_tokens, 0), {1, config_.d_model});
  SlidePrediction p;
  p.logits = ops::add(ops::matmul(pooled, head_w_), head_b_);
  const double z = static_cast<double>(p.logits[0]) - static_cast<double>(p.logits[1]);
  p.prob_high = static_cast<float>(1.0 / (1.0 + std::exp(z)));
  return p;
}

}  // namespace endonet::model
