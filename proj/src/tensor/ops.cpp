#include "endonet/tensor/ops.hpp"

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>
#include <utility>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <string_view>

#include "endonet/common/error.hpp"

namespace endonet::tensor::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

[[noreturn]] void fail(ErrorCode code, std::string_view op, const std::string& what) {
  throw Error(code, std::string(op) + ": " + what);
}

[[noreturn]] void shape_fail(std::string_view op, const std::string& what) {
  fail(ErrorCode::ShapeMismatch, op, what);
}

/// Graph to record on, or nullptr when nothing needs a gradient.
template <typename T>
Graph<T>* recording_graph(std::initializer_list<const Tensor<T>*> inputs) {
  Graph<T>* g = active_graph<T>();
  if (g == nullptr) return nullptr;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return g;
  }
  return nullptr;
}

template <typename T, typename Fn>
void record(Graph<T>* g, OpKind kind, std::vector<Tensor<T>> inputs, Tensor<T>& out, Fn&& fn) {
  out.set_requires_grad(true);
  g->record(kind, std::move(inputs), out, std::forward<Fn>(fn));
}

std::size_t normalize_axis(int axis, std::size_t rank, std::string_view op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    fail(ErrorCode::InvalidArgument, op,
         "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

/// outer x len x inner factorization of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
T pairwise_sum(const T* p, std::size_t n, std::size_t stride) {
  if (n <= 16) {
    T s = T{0};
    for (std::size_t i = 0; i < n; ++i) s += p[i * stride];
    return s;
  }
  const std::size_t half = n / 2;
  return pairwise_sum(p, half, stride) + pairwise_sum(p + half * stride, n - half, stride);
}

/// C (+)= op(A) op(B) for row-major buffers.
template <typename T>
void gemm(const T* a, std::size_t ar, std::size_t ac, bool ta, const T* b, std::size_t br,
          std::size_t bc, bool tb, T* c, bool accumulate) {
  ConstMatMap<T> am(a, static_cast<Eigen::Index>(ar), static_cast<Eigen::Index>(ac));
  ConstMatMap<T> bm(b, static_cast<Eigen::Index>(br), static_cast<Eigen::Index>(bc));
  MatMap<T> cm(c, static_cast<Eigen::Index>(ta ? ac : ar), static_cast<Eigen::Index>(tb ? br : bc));
  auto assign = [&](const auto& expr) {
    if (accumulate) {
      cm.noalias() += expr;
    } else {
      cm.noalias() = expr;
    }
  };
  if (!ta && !tb) {
    assign(am * bm);
  } else if (ta && !tb) {
    assign(am.transpose() * bm);
  } else if (!ta && tb) {
    assign(am * bm.transpose());
  } else {
    assign(am.transpose() * bm.transpose());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// matmul

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a, bool trans_b) {
  constexpr std::string_view op = "matmul";
  if (a.rank() < 2 || b.rank() < 2) {
    shape_fail(op, "operands must have rank >= 2, got a" + shape_string(a.shape()) + " b" +
                       shape_string(b.shape()));
  }
  std::size_t batch = 1;
  std::size_t ar = 0, ac = 0, br = 0, bc = 0;
  Shape out_shape;
  if (b.rank() == 2) {
    if (trans_a && a.rank() != 2) shape_fail(op, "trans_a requires a rank-2 left operand");
    ac = a.dim(-1);
    ar = a.numel() / std::max<std::size_t>(ac, 1);
    br = b.dim(0);
    bc = b.dim(1);
  } else if (a.rank() == 3 && b.rank() == 3) {
    if (a.dim(0) != b.dim(0)) {
      shape_fail(op, "batch dims differ: a" + shape_string(a.shape()) + " b" +
                         shape_string(b.shape()));
    }
    batch = a.dim(0);
    ar = a.dim(1);
    ac = a.dim(2);
    br = b.dim(1);
    bc = b.dim(2);
  } else {
    shape_fail(op, "unsupported ranks a" + shape_string(a.shape()) + " b" + shape_string(b.shape()));
  }
  const std::size_t m = trans_a ? ac : ar;
  const std::size_t k = trans_a ? ar : ac;
  const std::size_t kb = trans_b ? bc : br;
  const std::size_t n = trans_b ? br : bc;
  if (k != kb) {
    shape_fail(op, "inner dims differ: a" + shape_string(a.shape()) + (trans_a ? "^T" : "") +
                       " (k=" + std::to_string(k) + ") vs b" + shape_string(b.shape()) +
                       (trans_b ? "^T" : "") + " (k=" + std::to_string(kb) + ")");
  }
  if (b.rank() == 2) {
    if (trans_a) {
      out_shape = {m, n};
    } else {
      out_shape.assign(a.shape().begin(), a.shape().end() - 1);
      out_shape.push_back(n);
    }
  } else {
    out_shape = {batch, m, n};
  }
  Tensor<T> out(out_shape);
  const std::size_t a_step = ar * ac, b_step = br * bc, c_step = m * n;
  for (std::size_t i = 0; i < batch; ++i) {
    gemm(a.data().data() + i * a_step, ar, ac, trans_a, b.data().data() + i * b_step, br, bc,
         trans_b, out.data().data() + i * c_step, false);
  }
  if (auto* g = recording_graph({&a, &b})) {
    record(g, OpKind::matmul, {a, b}, out,
           [a, b, out, batch, ar, ac, br, bc, m, n, trans_a, trans_b, a_step, b_step, c_step]() mutable {
             const T* dc = out.grad().data();
             for (std::size_t i = 0; i < batch; ++i) {
               const T* dci = dc + i * c_step;
               if (a.requires_grad()) {
                 T* da = a.ensure_grad().data() + i * a_step;
                 if (!trans_a) {
                   gemm(dci, m, n, false, b.data().data() + i * b_step, br, bc, !trans_b, da, true);
                 } else {
                   gemm(b.data().data() + i * b_step, br, bc, trans_b, dci, m, n, true, da, true);
                 }
               }
               if (b.requires_grad()) {
                 T* db = b.ensure_grad().data() + i * b_step;
                 if (!trans_b) {
                   gemm(a.data().data() + i * a_step, ar, ac, !trans_a, dci, m, n, false, db, true);
                 } else {
                   gemm(dci, m, n, true, a.data().data() + i * a_step, ar, ac, trans_a, db, true);
                 }
               }
             }
           });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d

namespace {

struct ConvGeom {
  std::size_t n, c, h, w, o, kh, kw, stride, pad, ho, wo;
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

/// Output columns [lo, hi) whose input column for kernel tap j is in bounds.
inline std::pair<std::size_t, std::size_t> valid_ox(const ConvGeom& g, std::size_t j) {
  // ix = ox*stride + j - pad must satisfy 0 <= ix < w
  std::size_t lo = 0;
  if (j < g.pad) lo = (g.pad - j + g.stride - 1) / g.stride;
  std::size_t hi = 0;
  if (g.w + g.pad > j) hi = std::min(g.wo, (g.w + g.pad - j - 1) / g.stride + 1);
  return {std::min(lo, hi), hi};
}

/// Strided convolutions read through a copy of the input whose rows are
/// split by column phase (ix mod stride), so every kernel tap gathers a
/// contiguous run. Layout [c][h][stride][phase_w].
template <typename T>
struct PhasedInput {
  std::vector<T> data;
  std::size_t phase_w = 0;

  void build(const T* x, const ConvGeom& g) {
    phase_w = (g.w + g.stride - 1) / g.stride;
    data.resize(g.c * g.h * g.stride * phase_w);
    for (std::size_t r = 0; r < g.c * g.h; ++r) {
      const T* src = x + r * g.w;
      T* dst = data.data() + r * g.stride * phase_w;
      for (std::size_t ix = 0; ix < g.w; ++ix) dst[(ix % g.stride) * phase_w + ix / g.stride] = src[ix];
    }
  }
};

/// Columns for output rows [oy0, oy1): a [C*kh*kw, (oy1-oy0)*wo] matrix.
/// `phased` is required when stride > 1.
template <typename T>
void im2col_rows(const T* x, const PhasedInput<T>* phased, const ConvGeom& g, std::size_t oy0, std::size_t oy1,
                 T* cols) {
  const std::size_t hw_out = (oy1 - oy0) * g.wo;
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* dst = cols + ((ch * g.kh + i) * g.kw + j) * hw_out;
        const auto [lo, hi] = valid_ox(g, j);
        const long off = static_cast<long>(j) - static_cast<long>(g.pad);
        // ix = ox*stride + off = (ox + shift)*stride + phase
        const long s = static_cast<long>(g.stride);
        const long phase = ((off % s) + s) % s;
        const long shift = (off - phase) / s;
        for (std::size_t oy = oy0; oy < oy1; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          T* row = dst + (oy - oy0) * g.wo;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(row, row + g.wo, T{0});
            continue;
          }
          const T* src;
          if (g.stride == 1) {
            src = x + (ch * g.h + static_cast<std::size_t>(iy)) * g.w;
          } else {
            src = phased->data.data() +
                  ((ch * g.h + static_cast<std::size_t>(iy)) * g.stride + static_cast<std::size_t>(phase)) *
                      phased->phase_w;
          }
          std::fill(row, row + lo, T{0});
          std::copy(src + static_cast<long>(lo) + shift, src + static_cast<long>(hi) + shift, row + lo);
          std::fill(row + hi, row + g.wo, T{0});
        }
      }
    }
  }
}

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  PhasedInput<T> phased;
  if (g.stride > 1) phased.build(x, g);
  im2col_rows(x, &phased, g, 0, g.ho, cols);
}

/// C[o, tile] = W[o, ckk] * cols[ckk, tile] written into rows of stride ld.
template <typename T>
void gemm_strided_out(const T* w, std::size_t o, std::size_t ckk, const T* cols, std::size_t n, T* c,
                      std::size_t ld) {
  ConstMatMap<T> wm(w, static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(ckk));
  ConstMatMap<T> cm(cols, static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(n));
  Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>> out(c, static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(n),
                                                     Eigen::OuterStride<>(static_cast<Eigen::Index>(ld)));
  out.noalias() = wm * cm;
}

// Forward im2col is tiled over output rows so the column buffer stays
// cache-resident for large kernels.
inline constexpr std::size_t kIm2colTileElems = 1 << 16;

template <typename T>
void col2im(const T* cols, const ConvGeom& g, T* dx) {
  const std::size_t hw_out = g.ho * g.wo;
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    T* plane = dx + ch * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* src = cols + ((ch * g.kh + i) * g.kw + j) * hw_out;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * g.w;
          const T* row = src + oy * g.wo;
          const auto [lo, hi] = valid_ox(g, j);
          const long off = static_cast<long>(j) - static_cast<long>(g.pad);
          for (std::size_t ox = lo; ox < hi; ++ox) dst[static_cast<long>(ox * g.stride) + off] += row[ox];
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dAttrs attrs) {
  constexpr std::string_view op = "conv2d";
  if (x.rank() != 4 || weight.rank() != 4) {
    shape_fail(op, "expected x[N,C,H,W] and weight[O,C,kh,kw], got x" + shape_string(x.shape()) +
                       " weight" + shape_string(weight.shape()));
  }
  if (attrs.stride == 0) fail(ErrorCode::InvalidArgument, op, "stride must be >= 1");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), weight.dim(3),
             attrs.stride, attrs.padding, 0, 0};
  if (weight.dim(1) != g.c) {
    shape_fail(op, "input channels " + std::to_string(g.c) + " != weight channels " +
                       std::to_string(weight.dim(1)));
  }
  if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw) {
    shape_fail(op, "kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
                       " larger than padded input " + shape_string(x.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.o)) {
    shape_fail(op, "bias must be [" + std::to_string(g.o) + "], got " + shape_string(bias.shape()));
  }
  g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  const std::size_t ckk = g.c * g.kh * g.kw;
  const std::size_t hw_out = g.ho * g.wo;
  const std::size_t in_step = g.c * g.h * g.w;
  const std::size_t out_step = g.o * hw_out;

  Tensor<T> out({g.n, g.o, g.ho, g.wo});
  const std::size_t tile_rows = std::clamp<std::size_t>(kIm2colTileElems / (ckk * g.wo), 1, g.ho);
  std::vector<T> cols(g.pointwise() ? 0 : ckk * tile_rows * g.wo);
  PhasedInput<T> phased;
  for (std::size_t s = 0; s < g.n; ++s) {
    const T* xs = x.data().data() + s * in_step;
    T* ys = out.data().data() + s * out_step;
    if (g.pointwise()) {
      gemm(weight.data().data(), g.o, ckk, false, xs, ckk, hw_out, false, ys, false);
    } else {
      if (g.stride > 1) phased.build(xs, g);
      for (std::size_t oy = 0; oy < g.ho; oy += tile_rows) {
        const std::size_t oy1 = std::min(g.ho, oy + tile_rows);
        im2col_rows(xs, &phased, g, oy, oy1, cols.data());
        gemm_strided_out(weight.data().data(), g.o, ckk, cols.data(), (oy1 - oy) * g.wo, ys + oy * g.wo, hw_out);
      }
    }
    if (bias.defined()) {
      for (std::size_t oc = 0; oc < g.o; ++oc) {
        const T bv = bias[oc];
        T* row = ys + oc * hw_out;
        for (std::size_t i = 0; i < hw_out; ++i) row[i] += bv;
      }
    }
  }

  if (auto* gr = recording_graph({&x, &weight, &bias})) {
    std::vector<Tensor<T>> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    record(gr, OpKind::conv2d, std::move(inputs), out,
           [x, weight, bias, out, g, ckk, hw_out, in_step, out_step]() mutable {
             const T* dy = out.grad().data();
             std::vector<T> buf(g.pointwise() ? 0 : ckk * hw_out);
             T* dw = weight.requires_grad() ? weight.ensure_grad().data() : nullptr;
             T* dx = x.requires_grad() ? x.ensure_grad().data() : nullptr;
             for (std::size_t s = 0; s < g.n; ++s) {
               const T* dys = dy + s * out_step;
               const T* xs = x.data().data() + s * in_step;
               if (dw != nullptr) {
                 const T* col_ptr = xs;
                 if (!g.pointwise()) {
                   im2col(xs, g, buf.data());
                   col_ptr = buf.data();
                 }
                 gemm(dys, g.o, hw_out, false, col_ptr, ckk, hw_out, true, dw, true);
               }
               if (dx != nullptr) {
                 if (g.pointwise()) {
                   gemm(weight.data().data(), g.o, ckk, true, dys, g.o, hw_out, false,
                        dx + s * in_step, true);
                 } else {
                   gemm(weight.data().data(), g.o, ckk, true, dys, g.o, hw_out, false, buf.data(),
                        false);
                   col2im(buf.data(), g, dx + s * in_step);
                 }
               }
             }
             if (bias.defined() && bias.requires_grad()) {
               auto db = bias.ensure_grad();
               for (std::size_t oc = 0; oc < g.o; ++oc) {
                 T acc = T{0};
                 for (std::size_t s = 0; s < g.n; ++s) {
                   acc += pairwise_sum(dy + s * out_step + oc * hw_out, hw_out, 1);
                 }
                 db[oc] += acc;
               }
             }
           });
  }
  return out;
}

// ---------------------------------------------------------------------------
// activations

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto xd = x.data();
  auto od = out.data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] > T{0} ? xd[i] : T{0};
  if (auto* g = recording_graph({&x})) {
    record(g, OpKind::relu, {x}, out, [x, out]() mutable {
      auto dy = out.grad();
      auto dx = x.ensure_grad();
      auto xd = x.data();
      for (std::size_t i = 0; i < dy.size(); ++i) {
        if (xd[i] > T{0}) dx[i] += dy[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto xd = x.data();
  auto od = out.data();
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < xd.size(); ++i) {
    od[i] = T(0.5) * xd[i] * (T(1) + std::erf(xd[i] * inv_sqrt2));
  }
  if (auto* g = recording_graph({&x})) {
    record(g, OpKind::gelu, {x}, out, [x, out, inv_sqrt2]() mutable {
      auto dy = out.grad();
      auto dx = x.ensure_grad();
      auto xd = x.data();
      const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
      for (std::size_t i = 0; i < dy.size(); ++i) {
        const T v = xd[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        dx[i] += dy[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  constexpr std::string_view op = "layer_norm";
  if (x.rank() < 1) shape_fail(op, "input must have rank >= 1");
  const std::size_t d = x.dim(-1);
  if (d == 0) fail(ErrorCode::EmptyAxis, op, "normalized axis is empty");
  if (gamma.numel() != d || beta.numel() != d) {
    shape_fail(op, "gamma/beta must have " + std::to_string(d) + " elements, got " +
                       shape_string(gamma.shape()) + " and " + shape_string(beta.shape()));
  }
  const std::size_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  const T* xd = x.data().data();
  T* od = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const T rs = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = (row[j] - static_cast<T>(mu)) * rs;
      (*xhat)[r * d + j] = xh;
      od[r * d + j] = xh * gamma[j] + beta[j];
    }
  }
  if (auto* g = recording_graph({&x, &gamma, &beta})) {
    record(g, OpKind::layer_norm, {x, gamma, beta}, out,
           [x, gamma, beta, out, xhat, rstd, rows, d]() mutable {
             const T* dy = out.grad().data();
             const T* xh = xhat->data();
             if (gamma.requires_grad() || beta.requires_grad()) {
               T* dg = gamma.requires_grad() ? gamma.ensure_grad().data() : nullptr;
               T* db = beta.requires_grad() ? beta.ensure_grad().data() : nullptr;
               for (std::size_t r = 0; r < rows; ++r) {
                 for (std::size_t j = 0; j < d; ++j) {
                   if (dg) dg[j] += dy[r * d + j] * xh[r * d + j];
                   if (db) db[j] += dy[r * d + j];
                 }
               }
             }
             if (x.requires_grad()) {
               T* dx = x.ensure_grad().data();
               const T inv_d = T(1) / static_cast<T>(d);
               for (std::size_t r = 0; r < rows; ++r) {
                 T s1 = T{0}, s2 = T{0};
                 for (std::size_t j = 0; j < d; ++j) {
                   const T dxh = dy[r * d + j] * gamma[j];
                   s1 += dxh;
                   s2 += dxh * xh[r * d + j];
                 }
                 const T rs = (*rstd)[r];
                 for (std::size_t j = 0; j < d; ++j) {
                   const T dxh = dy[r * d + j] * gamma[j];
                   dx[r * d + j] += rs * (dxh - s1 * inv_d - xh[r * d + j] * s2 * inv_d);
                 }
               }
             }
           });
  }
  return out;
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training, T momentum,
                     T eps) {
  constexpr std::string_view op = "batch_norm";
  if (x.rank() != 2 && x.rank() != 4) {
    shape_fail(op, "expected [N,C] or [N,C,H,W], got " + shape_string(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t hw = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  for (const Tensor<T>* t : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->numel() != c) {
      shape_fail(op, "per-channel tensors must have " + std::to_string(c) + " elements, got " +
                         shape_string(t->shape()));
    }
  }
  const std::size_t count = n * hw;
  if (training && count < 2) fail(ErrorCode::InvalidArgument, op, "training needs > 1 value per channel");

  Tensor<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(c);
  const T* xd = x.data().data();
  T* od = out.data().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    T mu_t, rs;
    if (training) {
      double mu = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        const T* p = xd + (s * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) mu += p[i];
      }
      mu /= static_cast<double>(count);
      double var = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        const T* p = xd + (s * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double dv = p[i] - mu;
          var += dv * dv;
        }
      }
      var /= static_cast<double>(count);
      mu_t = static_cast<T>(mu);
      rs = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      const double unbiased = var * static_cast<double>(count) / static_cast<double>(count - 1);
      running_mean[ch] = (T(1) - momentum) * running_mean[ch] + momentum * mu_t;
      running_var[ch] = (T(1) - momentum) * running_var[ch] + momentum * static_cast<T>(unbiased);
    } else {
      mu_t = running_mean[ch];
      rs = T(1) / std::sqrt(running_var[ch] + eps);
    }
    (*rstd)[ch] = rs;
    const T gm = gamma[ch], bt = beta[ch];
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t base = (s * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const T xh = (xd[base + i] - mu_t) * rs;
        (*xhat)[base + i] = xh;
        od[base + i] = xh * gm + bt;
      }
    }
  }
  if (auto* g = recording_graph({&x, &gamma, &beta})) {
    record(g, OpKind::batch_norm, {x, gamma, beta}, out,
           [x, gamma, beta, out, xhat, rstd, n, c, hw, count, training]() mutable {
             const T* dy = out.grad().data();
             const T* xh = xhat->data();
             T* dg = gamma.requires_grad() ? gamma.ensure_grad().data() : nullptr;
             T* db = beta.requires_grad() ? beta.ensure_grad().data() : nullptr;
             T* dx = x.requires_grad() ? x.ensure_grad().data() : nullptr;
             for (std::size_t ch = 0; ch < c; ++ch) {
               T sum_dy = T{0}, sum_dy_xh = T{0};
               for (std::size_t s = 0; s < n; ++s) {
                 const std::size_t base = (s * c + ch) * hw;
                 for (std::size_t i = 0; i < hw; ++i) {
                   sum_dy += dy[base + i];
                   sum_dy_xh += dy[base + i] * xh[base + i];
                 }
               }
               if (dg) dg[ch] += sum_dy_xh;
               if (db) db[ch] += sum_dy;
               if (!dx) continue;
               const T gm = gamma[ch];
               const T rs = (*rstd)[ch];
               const T inv_m = T(1) / static_cast<T>(count);
               for (std::size_t s = 0; s < n; ++s) {
                 const std::size_t base = (s * c + ch) * hw;
                 for (std::size_t i = 0; i < hw; ++i) {
                   if (training) {
                     dx[base + i] += gm * rs *
                                     (dy[base + i] - sum_dy * inv_m - xh[base + i] * sum_dy_xh * inv_m);
                   } else {
                     dx[base + i] += gm * rs * dy[base + i];
                   }
                 }
               }
             }
           });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  constexpr std::string_view op = "softmax";
  if (x.rank() == 0) shape_fail(op, "input must have rank >= 1");
  const std::size_t ax = normalize_axis(axis, x.rank(), op);
  const AxisSplit sp = split_at(x.shape(), ax);
  if (sp.len == 0) fail(ErrorCode::EmptyAxis, op, "softmax over empty axis " + std::to_string(axis));
  Tensor<T> out(x.shape());
  const T* xd = x.data().data();
  T* od = out.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < sp.len; ++k) mx = std::max(mx, xd[base + k * sp.inner]);
      if (!std::isfinite(mx)) {
        fail(ErrorCode::InvalidArgument, op,
             std::isnan(mx) ? "NaN input" : "every entry along the axis is -inf or the max is inf");
      }
      // double accumulation and division keep row sums within one rounding
      // per entry of 1, also in f32
      double total = 0.0;
      for (std::size_t k = 0; k < sp.len; ++k) {
        const T e = std::exp(xd[base + k * sp.inner] - mx);
        od[base + k * sp.inner] = e;
        total += static_cast<double>(e);
      }
      for (std::size_t k = 0; k < sp.len; ++k) {
        od[base + k * sp.inner] = static_cast<T>(static_cast<double>(od[base + k * sp.inner]) / total);
      }
    }
  }
  if (auto* g = recording_graph({&x})) {
    record(g, OpKind::softmax, {x}, out, [x, out, sp]() mutable {
      const T* dy = out.grad().data();
      const T* y = out.data().data();
      T* dx = x.ensure_grad().data();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t base = o * sp.len * sp.inner + in;
          T dot = T{0};
          for (std::size_t k = 0; k < sp.len; ++k) {
            dot += dy[base + k * sp.inner] * y[base + k * sp.inner];
          }
          for (std::size_t k = 0; k < sp.len; ++k) {
            const std::size_t idx = base + k * sp.inner;
            dx[idx] += y[idx] * (dy[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions

namespace {

template <typename T>
Tensor<T> reduce_all(const Tensor<T>& x, bool average) {
  const std::size_t n = x.numel();
  if (average && n == 0) fail(ErrorCode::EmptyAxis, "mean", "mean of an empty tensor");
  T s = pairwise_sum(x.data().data(), n, 1);
  if (average) s /= static_cast<T>(n);
  Tensor<T> out = Tensor<T>::scalar(s);
  if (auto* g = recording_graph({&x})) {
    record(g, average ? OpKind::mean : OpKind::sum, {x}, out, [x, out, n, average]() mutable {
      T d = out.grad()[0];
      if (average) d /= static_cast<T>(n);
      auto dx = x.ensure_grad();
      for (auto& v : dx) v += d;
    });
  }
  return out;
}

template <typename T>
Tensor<T> reduce_axis(const Tensor<T>& x, int axis, bool average) {
  const std::string_view op = average ? "mean" : "sum";
  if (x.rank() == 0) shape_fail(op, "cannot reduce a scalar along an axis");
  const std::size_t ax = normalize_axis(axis, x.rank(), op);
  const AxisSplit sp = split_at(x.shape(), ax);
  if (average && sp.len == 0) fail(ErrorCode::EmptyAxis, op, "mean over empty axis");
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (i != ax) out_shape.push_back(x.shape()[i]);
  }
  Tensor<T> out(out_shape);
  const T* xd = x.data().data();
  T* od = out.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      T s = pairwise_sum(xd + o * sp.len * sp.inner + in, sp.len, sp.inner);
      if (average) s /= static_cast<T>(sp.len);
      od[o * sp.inner + in] = s;
    }
  }
  if (auto* g = recording_graph({&x})) {
    record(g, average ? OpKind::mean : OpKind::sum, {x}, out, [x, out, sp, average]() mutable {
      const T* dy = out.grad().data();
      T* dx = x.ensure_grad().data();
      const T f = average ? T(1) / static_cast<T>(sp.len) : T(1);
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t k = 0; k < sp.len; ++k) {
          for (std::size_t in = 0; in < sp.inner; ++in) {
            dx[(o * sp.len + k) * sp.inner + in] += dy[o * sp.inner + in] * f;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  return reduce_all(x, false);
}
template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return reduce_all(x, true);
}
template <typename T>
Tensor<T> sum(const Tensor<T>& x, int axis) {
  return reduce_axis(x, axis, false);
}
template <typename T>
Tensor<T> mean(const Tensor<T>& x, int axis) {
  return reduce_axis(x, axis, true);
}

// ---------------------------------------------------------------------------
// broadcasting elementwise

namespace {

enum class Bcast { same, scalar_b, scalar_a, suffix_b, suffix_a, general };

struct BroadcastPlan {
  Bcast kind = Bcast::same;
  Shape out;
  std::size_t inner = 1;
  std::vector<std::size_t> ia, ib;

  std::size_t a_index(std::size_t i) const {
    switch (kind) {
      case Bcast::same: case Bcast::scalar_b: case Bcast::suffix_b: return i;
      case Bcast::scalar_a: return 0;
      case Bcast::suffix_a: return i % inner;
      case Bcast::general: return ia[i];
    }
    return 0;
  }
  std::size_t b_index(std::size_t i) const {
    switch (kind) {
      case Bcast::same: case Bcast::scalar_a: case Bcast::suffix_a: return i;
      case Bcast::scalar_b: return 0;
      case Bcast::suffix_b: return i % inner;
      case Bcast::general: return ib[i];
    }
    return 0;
  }
};

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<long>(small.size()));
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, std::string_view op) {
  BroadcastPlan p;
  const std::size_t na = shape_numel(a), nb = shape_numel(b);
  if (a == b) {
    p.kind = Bcast::same;
    p.out = a;
    return p;
  }
  if (nb == 1 && b.size() <= a.size()) {
    p.kind = Bcast::scalar_b;
    p.out = a;
    return p;
  }
  if (na == 1 && a.size() <= b.size()) {
    p.kind = Bcast::scalar_a;
    p.out = b;
    return p;
  }
  if (is_suffix(b, a)) {
    p.kind = Bcast::suffix_b;
    p.out = a;
    p.inner = nb;
    return p;
  }
  if (is_suffix(a, b)) {
    p.kind = Bcast::suffix_a;
    p.out = b;
    p.inner = na;
    return p;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape ap(r, 1), bp(r, 1);
  std::copy(a.begin(), a.end(), ap.begin() + static_cast<long>(r - a.size()));
  std::copy(b.begin(), b.end(), bp.begin() + static_cast<long>(r - b.size()));
  p.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (ap[i] != bp[i] && ap[i] != 1 && bp[i] != 1) {
      shape_fail(op, "cannot broadcast " + shape_string(a) + " with " + shape_string(b) +
                         " (dim " + std::to_string(i) + ")");
    }
    p.out[i] = std::max(ap[i], bp[i]);
  }
  p.kind = Bcast::general;
  const std::size_t n = shape_numel(p.out);
  p.ia.resize(n);
  p.ib.resize(n);
  std::vector<std::size_t> sa(r), sb(r);
  std::size_t acc_a = 1, acc_b = 1;
  for (std::size_t i = r; i-- > 0;) {
    sa[i] = ap[i] == 1 ? 0 : acc_a;
    sb[i] = bp[i] == 1 ? 0 : acc_b;
    acc_a *= ap[i];
    acc_b *= bp[i];
  }
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t lin = 0; lin < n; ++lin) {
    std::size_t oa = 0, ob = 0;
    for (std::size_t i = 0; i < r; ++i) {
      oa += idx[i] * sa[i];
      ob += idx[i] * sb[i];
    }
    p.ia[lin] = oa;
    p.ib[lin] = ob;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < p.out[i]) break;
      idx[i] = 0;
    }
  }
  return p;
}

enum class BinOp { add, sub, mul };

template <typename T>
Tensor<T> binary(BinOp bop, const Tensor<T>& a, const Tensor<T>& b) {
  const OpKind kind = bop == BinOp::add ? OpKind::add : bop == BinOp::sub ? OpKind::sub : OpKind::mul;
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape(), op_name(kind)));
  Tensor<T> out(plan->out);
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  T* od = out.data().data();
  const std::size_t n = out.numel();
  if (plan->kind == Bcast::same) {
    switch (bop) {
      case BinOp::add: for (std::size_t i = 0; i < n; ++i) od[i] = ad[i] + bd[i]; break;
      case BinOp::sub: for (std::size_t i = 0; i < n; ++i) od[i] = ad[i] - bd[i]; break;
      case BinOp::mul: for (std::size_t i = 0; i < n; ++i) od[i] = ad[i] * bd[i]; break;
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const T va = ad[plan->a_index(i)], vb = bd[plan->b_index(i)];
      od[i] = bop == BinOp::add ? va + vb : bop == BinOp::sub ? va - vb : va * vb;
    }
  }
  if (auto* g = recording_graph({&a, &b})) {
    record(g, kind, {a, b}, out, [a, b, out, plan, bop, n]() mutable {
      const T* dy = out.grad().data();
      if (a.requires_grad()) {
        T* da = a.ensure_grad().data();
        const T* bd = b.data().data();
        for (std::size_t i = 0; i < n; ++i) {
          da[plan->a_index(i)] += bop == BinOp::mul ? dy[i] * bd[plan->b_index(i)] : dy[i];
        }
      }
      if (b.requires_grad()) {
        T* db = b.ensure_grad().data();
        const T* ad = a.data().data();
        for (std::size_t i = 0; i < n; ++i) {
          const T contrib = bop == BinOp::mul   ? dy[i] * ad[plan->a_index(i)]
                            : bop == BinOp::sub ? -dy[i]
                                                : dy[i];
          db[plan->b_index(i)] += contrib;
        }
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(BinOp::add, a, b);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(BinOp::sub, a, b);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(BinOp::mul, a, b);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * factor;
  if (auto* g = recording_graph({&x})) {
    record(g, OpKind::scale, {x}, out, [x, out, factor]() mutable {
      auto dy = out.grad();
      auto dx = x.ensure_grad();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * factor;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// losses

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  constexpr std::string_view op = "mse";
  if (a.shape() != b.shape()) {
    shape_fail(op, "operands differ: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  const std::size_t n = a.numel();
  if (n == 0) fail(ErrorCode::EmptyAxis, op, "empty operands");
  std::vector<T> sq(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T d = a[i] - b[i];
    sq[i] = d * d;
  }
  Tensor<T> out = Tensor<T>::scalar(pairwise_sum(sq.data(), n, 1) / static_cast<T>(n));
  if (auto* g = recording_graph({&a, &b})) {
    record(g, OpKind::mse, {a, b}, out, [a, b, out, n]() mutable {
      const T f = out.grad()[0] * T(2) / static_cast<T>(n);
      T* da = a.requires_grad() ? a.ensure_grad().data() : nullptr;
      T* db = b.requires_grad() ? b.ensure_grad().data() : nullptr;
      for (std::size_t i = 0; i < n; ++i) {
        const T d = f * (a[i] - b[i]);
        if (da) da[i] += d;
        if (db) db[i] -= d;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets,
                        const std::vector<T>& class_weights) {
  constexpr std::string_view op = "cross_entropy";
  if (logits.rank() != 2) shape_fail(op, "logits must be [N,C], got " + shape_string(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (n == 0 || c == 0) fail(ErrorCode::EmptyAxis, op, "empty logits " + shape_string(logits.shape()));
  if (targets.size() != n) {
    shape_fail(op, std::to_string(targets.size()) + " targets for " + std::to_string(n) + " rows");
  }
  if (!class_weights.empty() && class_weights.size() != c) {
    shape_fail(op, std::to_string(class_weights.size()) + " class weights for " + std::to_string(c) +
                       " classes");
  }
  auto probs = std::make_shared<std::vector<T>>(n * c);
  T weight_total = T{0};
  std::vector<T> terms(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= c) {
      fail(ErrorCode::InvalidArgument, op,
           "target " + std::to_string(targets[i]) + " out of range for " + std::to_string(c) +
               " classes");
    }
    const T* z = logits.data().data() + i * c;
    T mx = *std::max_element(z, z + c);
    T total = T{0};
    for (std::size_t k = 0; k < c; ++k) total += std::exp(z[k] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t k = 0; k < c; ++k) (*probs)[i * c + k] = std::exp(z[k] - lse);
    const T w = class_weights.empty() ? T(1) : class_weights[targets[i]];
    weight_total += w;
    terms[i] = w * (lse - z[targets[i]]);
  }
  if (!(weight_total > T{0})) fail(ErrorCode::InvalidArgument, op, "total target weight is zero");
  Tensor<T> out = Tensor<T>::scalar(pairwise_sum(terms.data(), n, 1) / weight_total);
  if (auto* g = recording_graph({&logits})) {
    record(g, OpKind::cross_entropy, {logits}, out,
           [logits, out, probs, targets, class_weights, weight_total, n, c]() mutable {
             const T f = out.grad()[0] / weight_total;
             T* dz = logits.ensure_grad().data();
             for (std::size_t i = 0; i < n; ++i) {
               const T w = class_weights.empty() ? T(1) : class_weights[targets[i]];
               for (std::size_t k = 0; k < c; ++k) {
                 const T onehot = k == targets[i] ? T(1) : T(0);
                 dz[i * c + k] += f * w * ((*probs)[i * c + k] - onehot);
               }
             }
           });
  }
  return out;
}

// ---------------------------------------------------------------------------
// indexing and layout

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<std::size_t>& indices) {
  constexpr std::string_view op = "embedding_lookup";
  if (table.rank() != 2) shape_fail(op, "table must be [V,D], got " + shape_string(table.shape()));
  const std::size_t v = table.dim(0), d = table.dim(1);
  Tensor<T> out({indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= v) {
      fail(ErrorCode::InvalidArgument, op,
           "index " + std::to_string(indices[i]) + " out of range for " + std::to_string(v) + " rows");
    }
    std::copy_n(table.data().data() + indices[i] * d, d, out.data().data() + i * d);
  }
  if (auto* g = recording_graph({&table})) {
    record(g, OpKind::embedding_lookup, {table}, out, [table, out, indices, d]() mutable {
      const T* dy = out.grad().data();
      T* dt = table.ensure_grad().data();
      for (std::size_t i = 0; i < indices.size(); ++i) {
        T* row = dt + indices[i] * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += dy[i * d + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  constexpr std::string_view op = "concat";
  if (parts.empty()) fail(ErrorCode::InvalidArgument, op, "no tensors to concatenate");
  const Shape& ref = parts.front().shape();
  const std::size_t ax = normalize_axis(axis, ref.size(), op);
  Shape out_shape = ref;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) shape_fail(op, "rank mismatch: " + shape_string(p.shape()) + " vs " + shape_string(ref));
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != ax && p.shape()[i] != ref[i]) {
        shape_fail(op, "dim " + std::to_string(i) + " differs: " + shape_string(p.shape()) +
                           " vs " + shape_string(ref));
      }
    }
    out_shape[ax] += p.shape()[ax];
  }
  const AxisSplit sp = split_at(out_shape, ax);
  Tensor<T> out(out_shape);
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t block = p.shape()[ax] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(p.data().data() + o * block, block,
                  out.data().data() + o * sp.len * sp.inner + offset * sp.inner);
    }
    offset += p.shape()[ax];
  }
  Graph<T>* g = active_graph<T>();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (g != nullptr && any) {
    record(g, OpKind::concat, parts, out, [parts, out, offsets, sp, ax]() mutable {
      const T* dy = out.grad().data();
      for (std::size_t k = 0; k < parts.size(); ++k) {
        auto& p = parts[k];
        if (!p.requires_grad()) continue;
        T* dp = p.ensure_grad().data();
        const std::size_t block = p.shape()[ax] * sp.inner;
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const T* src = dy + o * sp.len * sp.inner + offsets[k] * sp.inner;
          for (std::size_t i = 0; i < block; ++i) dp[o * block + i] += src[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t begin, std::size_t end) {
  constexpr std::string_view op = "slice";
  if (x.rank() == 0) shape_fail(op, "cannot slice a scalar");
  const std::size_t ax = normalize_axis(axis, x.rank(), op);
  if (begin > end || end > x.shape()[ax]) {
    shape_fail(op, "range [" + std::to_string(begin) + "," + std::to_string(end) +
                       ") invalid for dim " + std::to_string(x.shape()[ax]) + " of " +
                       shape_string(x.shape()));
  }
  const AxisSplit sp = split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = end - begin;
  Tensor<T> out(out_shape);
  const std::size_t block = (end - begin) * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(x.data().data() + o * sp.len * sp.inner + begin * sp.inner, block,
                out.data().data() + o * block);
  }
  if (auto* g = recording_graph({&x})) {
    record(g, OpKind::slice, {x}, out, [x, out, sp, begin, block]() mutable {
      const T* dy = out.grad().data();
      T* dx = x.ensure_grad().data();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        T* dst = dx + o * sp.len * sp.inner + begin * sp.inner;
        for (std::size_t i = 0; i < block; ++i) dst[i] += dy[o * block + i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  Tensor<T> out = x.reshaped(std::move(shape));
  if (auto* g = recording_graph({&x})) {
    record(g, OpKind::reshape, {x}, out, [x, out]() mutable {
      auto dy = out.grad();
      auto dx = x.ensure_grad();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// pooling

namespace {

struct PoolGeom {
  std::size_t planes, h, w, ho, wo;
};

PoolGeom pool_geometry(const Shape& s, const Pool2dAttrs& a, std::string_view op) {
  if (s.size() != 4) shape_fail(op, "expected [N,C,H,W], got " + shape_string(s));
  if (a.stride == 0 || a.kernel_h == 0 || a.kernel_w == 0) {
    fail(ErrorCode::InvalidArgument, op, "kernel and stride must be >= 1");
  }
  if (a.padding * 2 > std::min(a.kernel_h, a.kernel_w)) {
    fail(ErrorCode::InvalidArgument, op, "padding must be at most half the kernel");
  }
  if (s[2] + 2 * a.padding < a.kernel_h || s[3] + 2 * a.padding < a.kernel_w) {
    shape_fail(op, "kernel larger than padded input " + shape_string(s));
  }
  return {s[0] * s[1], s[2], s[3], (s[2] + 2 * a.padding - a.kernel_h) / a.stride + 1,
          (s[3] + 2 * a.padding - a.kernel_w) / a.stride + 1};
}

}  // namespace

template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, Pool2dAttrs attrs) {
  const PoolGeom g = pool_geometry(x.shape(), attrs, "avg_pool");
  Tensor<T> out({x.dim(0), x.dim(1), g.ho, g.wo});
  const T* xd = x.data().data();
  T* od = out.data().data();
  auto window = [attrs, g](std::size_t oy, std::size_t ox) {
    const long y0 = static_cast<long>(oy * attrs.stride) - static_cast<long>(attrs.padding);
    const long x0 = static_cast<long>(ox * attrs.stride) - static_cast<long>(attrs.padding);
    const std::size_t ys = static_cast<std::size_t>(std::max(0L, y0));
    const std::size_t xs = static_cast<std::size_t>(std::max(0L, x0));
    const std::size_t ye = static_cast<std::size_t>(std::min<long>(static_cast<long>(g.h), y0 + static_cast<long>(attrs.kernel_h)));
    const std::size_t xe = static_cast<std::size_t>(std::min<long>(static_cast<long>(g.w), x0 + static_cast<long>(attrs.kernel_w)));
    return std::array<std::size_t, 4>{ys, ye, xs, xe};
  };
  for (std::size_t p = 0; p < g.planes; ++p) {
    const T* plane = xd + p * g.h * g.w;
    for (std::size_t oy = 0; oy < g.ho; ++oy) {
      for (std::size_t ox = 0; ox < g.wo; ++ox) {
        const auto [ys, ye, xs, xe] = window(oy, ox);
        T s = T{0};
        for (std::size_t y = ys; y < ye; ++y) {
          for (std::size_t xx = xs; xx < xe; ++xx) s += plane[y * g.w + xx];
        }
        od[(p * g.ho + oy) * g.wo + ox] = s / static_cast<T>((ye - ys) * (xe - xs));
      }
    }
  }
  if (auto* gr = recording_graph({&x})) {
    record(gr, OpKind::avg_pool, {x}, out, [x, out, g, window]() mutable {
      const T* dy = out.grad().data();
      T* dx = x.ensure_grad().data();
      for (std::size_t p = 0; p < g.planes; ++p) {
        T* plane = dx + p * g.h * g.w;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto [ys, ye, xs, xe] = window(oy, ox);
            const T d = dy[(p * g.ho + oy) * g.wo + ox] / static_cast<T>((ye - ys) * (xe - xs));
            for (std::size_t y = ys; y < ye; ++y) {
              for (std::size_t xx = xs; xx < xe; ++xx) plane[y * g.w + xx] += d;
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> max_pool(const Tensor<T>& x, Pool2dAttrs attrs) {
  const PoolGeom g = pool_geometry(x.shape(), attrs, "max_pool");
  Tensor<T> out({x.dim(0), x.dim(1), g.ho, g.wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  const T* xd = x.data().data();
  T* od = out.data().data();
  for (std::size_t p = 0; p < g.planes; ++p) {
    const T* plane = xd + p * g.h * g.w;
    for (std::size_t oy = 0; oy < g.ho; ++oy) {
      const long y0 = static_cast<long>(oy * attrs.stride) - static_cast<long>(attrs.padding);
      for (std::size_t ox = 0; ox < g.wo; ++ox) {
        const long x0 = static_cast<long>(ox * attrs.stride) - static_cast<long>(attrs.padding);
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = 0;
        bool found = false;
        for (std::size_t i = 0; i < attrs.kernel_h; ++i) {
          const long y = y0 + static_cast<long>(i);
          if (y < 0 || y >= static_cast<long>(g.h)) continue;
          for (std::size_t j = 0; j < attrs.kernel_w; ++j) {
            const long xx = x0 + static_cast<long>(j);
            if (xx < 0 || xx >= static_cast<long>(g.w)) continue;
            const std::size_t idx = static_cast<std::size_t>(y) * g.w + static_cast<std::size_t>(xx);
            if (!found || plane[idx] > best) {
              best = plane[idx];
              best_idx = idx;
              found = true;
            }
          }
        }
        const std::size_t o = (p * g.ho + oy) * g.wo + ox;
        od[o] = best;
        (*argmax)[o] = p * g.h * g.w + best_idx;
      }
    }
  }
  if (auto* gr = recording_graph({&x})) {
    record(gr, OpKind::max_pool, {x}, out, [x, out, argmax]() mutable {
      auto dy = out.grad();
      auto dx = x.ensure_grad();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[(*argmax)[i]] += dy[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) shape_fail("global_avg_pool", "expected [N,C,H,W], got " + shape_string(x.shape()));
  Tensor<T> pooled = avg_pool(x, Pool2dAttrs{x.dim(2), x.dim(3), 1, 0});
  return reshape(pooled, Shape{x.dim(0), x.dim(1)});
}

template <typename T>
bool has_non_finite(const Tensor<T>& x) {
  for (T v : x.data()) {
    if (!std::isfinite(v)) return true;
  }
  return false;
}

#define ENDONET_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool, bool);                     \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Conv2dAttrs); \
  template Tensor<T> relu(const Tensor<T>&);                                                     \
  template Tensor<T> gelu(const Tensor<T>&);                                                     \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);       \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                                Tensor<T>&, Tensor<T>&, bool, T, T);                             \
  template Tensor<T> softmax(const Tensor<T>&, int);                                            \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template Tensor<T> mean(const Tensor<T>&);                                                     \
  template Tensor<T> sum(const Tensor<T>&, int);                                                 \
  template Tensor<T> mean(const Tensor<T>&, int);                                                \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                                 \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> cross_entropy(const Tensor<T>&, const std::vector<std::size_t>&,            \
                                   const std::vector<T>&);                                       \
  template Tensor<T> embedding_lookup(const Tensor<T>&, const std::vector<std::size_t>&);        \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                 \
  template Tensor<T> slice(const Tensor<T>&, int, std::size_t, std::size_t);                     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                           \
  template Tensor<T> avg_pool(const Tensor<T>&, Pool2dAttrs);                                    \
  template Tensor<T> max_pool(const Tensor<T>&, Pool2dAttrs);                                    \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                          \
  template bool has_non_finite(const Tensor<T>&);

ENDONET_INSTANTIATE_OPS(float)
ENDONET_INSTANTIATE_OPS(double)

#undef ENDONET_INSTANTIATE_OPS

}  // namespace endonet::tensor::ops
