#pragma once

#include <functional>
#include <string>
#include <vector>

#include "endonet/common/rng.hpp"
#include "endonet/tensor/grad_check.hpp"
#include "endonet/tensor/ops.hpp"
#include "random_tensors.hpp"

// Random gradient-check instances for every differentiable op kind. Shared
// by the unit suite and the acceptance binary.
namespace endonet::testing {

struct GradCase {
  tensor::GradFn fn;
  std::vector<tensor::TensorD> inputs;
};

struct OpCaseFactory {
  std::string op;
  std::function<GradCase(Rng&, int instance)> make;
};

namespace detail {

using tensor::Shape;
using tensor::TensorD;
namespace ops = tensor::ops;

/// Contracts an arbitrary op output with a fixed random weight so every
/// output element contributes to the scalar.
inline TensorD contract(const TensorD& y, const TensorD& weights) {
  if (y.numel() == 1) return ops::scale(y, weights[0]);
  return ops::sum(ops::mul(y, weights));
}

inline GradCase unary_case(Rng& rng, TensorD x, std::function<TensorD(const TensorD&)> op,
                           Shape out_shape) {
  TensorD w = random_tensor(rng, std::move(out_shape));
  return {[op, w](const std::vector<TensorD>& in) { return contract(op(in[0]), w); }, {x}};
}

}  // namespace detail

inline std::vector<OpCaseFactory> gradcheck_factories() {
  using detail::contract;
  using tensor::Shape;
  using tensor::TensorD;
  namespace ops = tensor::ops;
  std::vector<OpCaseFactory> f;

  f.push_back({"matmul", [](Rng& rng, int i) {
                 const int variant = i % 4;
                 if (variant == 3) {
                   TensorD a = random_tensor(rng, {2, 3, 4});
                   TensorD b = random_tensor(rng, {2, 4, 2});
                   TensorD w = random_tensor(rng, {2, 3, 2});
                   return GradCase{[w](const std::vector<TensorD>& in) {
                                     return contract(ops::matmul(in[0], in[1]), w);
                                   },
                                   {a, b}};
                 }
                 const bool ta = variant == 1, tb = variant == 2;
                 TensorD a = random_tensor(rng, ta ? Shape{4, 3} : Shape{3, 4});
                 TensorD b = random_tensor(rng, tb ? Shape{5, 4} : Shape{4, 5});
                 TensorD w = random_tensor(rng, {3, 5});
                 return GradCase{[w, ta, tb](const std::vector<TensorD>& in) {
                                   return contract(ops::matmul(in[0], in[1], ta, tb), w);
                                 },
                                 {a, b}};
               }});

  f.push_back({"conv2d", [](Rng& rng, int i) {
                 const std::size_t stride = 1 + static_cast<std::size_t>(i % 2);
                 const std::size_t pad = static_cast<std::size_t>((i / 2) % 2);
                 TensorD x = random_tensor(rng, {2, 2, 5, 5});
                 TensorD k = random_tensor(rng, {3, 2, 3, 3});
                 TensorD b = random_tensor(rng, {3});
                 const std::size_t out = (5 + 2 * pad - 3) / stride + 1;
                 TensorD w = random_tensor(rng, {2, 3, out, out});
                 return GradCase{[w, stride, pad](const std::vector<TensorD>& in) {
                                   return contract(ops::conv2d(in[0], in[1], in[2], {stride, pad}), w);
                                 },
                                 {x, k, b}};
               }});

  f.push_back({"relu", [](Rng& rng, int) {
                 return detail::unary_case(rng, random_away_from_zero(rng, {3, 4}),
                                           [](const TensorD& x) { return ops::relu(x); }, {3, 4});
               }});

  f.push_back({"gelu", [](Rng& rng, int) {
                 return detail::unary_case(rng, random_tensor(rng, {3, 4}, -3.0, 3.0),
                                           [](const TensorD& x) { return ops::gelu(x); }, {3, 4});
               }});

  f.push_back({"layer_norm", [](Rng& rng, int) {
                 TensorD x = random_tensor(rng, {3, 8}, -2.0, 2.0);
                 TensorD g = random_tensor(rng, {8}, 0.5, 1.5);
                 TensorD b = random_tensor(rng, {8});
                 TensorD w = random_tensor(rng, {3, 8});
                 return GradCase{[w](const std::vector<TensorD>& in) {
                                   return contract(ops::layer_norm(in[0], in[1], in[2]), w);
                                 },
                                 {x, g, b}};
               }});

  f.push_back({"batch_norm", [](Rng& rng, int i) {
                 const bool training = i % 2 == 0;
                 TensorD x = random_tensor(rng, {4, 3, 2, 2}, -2.0, 2.0);
                 TensorD g = random_tensor(rng, {3}, 0.5, 1.5);
                 TensorD b = random_tensor(rng, {3});
                 TensorD rm = random_tensor(rng, {3}, -0.5, 0.5);
                 TensorD rv = random_tensor(rng, {3}, 0.5, 2.0);
                 TensorD w = random_tensor(rng, {4, 3, 2, 2});
                 return GradCase{[w, rm, rv, training](const std::vector<TensorD>& in) {
                                   // fresh copies so repeated evaluation is pure
                                   TensorD m = rm.clone(), v = rv.clone();
                                   return contract(ops::batch_norm(in[0], in[1], in[2], m, v, training), w);
                                 },
                                 {x, g, b}};
               }});

  f.push_back({"softmax", [](Rng& rng, int i) {
                 const int axis = i % 2 == 0 ? -1 : 0;
                 return detail::unary_case(rng, random_tensor(rng, {3, 5}, -3.0, 3.0),
                                           [axis](const TensorD& x) { return ops::softmax(x, axis); },
                                           {3, 5});
               }});

  f.push_back({"mean", [](Rng& rng, int i) {
                 if (i % 2 == 0) {
                   return detail::unary_case(rng, random_tensor(rng, {3, 4}),
                                             [](const TensorD& x) { return ops::mean(x); }, {1});
                 }
                 return detail::unary_case(rng, random_tensor(rng, {3, 4, 2}),
                                           [](const TensorD& x) { return ops::mean(x, 1); }, {3, 2});
               }});

  f.push_back({"sum", [](Rng& rng, int i) {
                 if (i % 2 == 0) {
                   return detail::unary_case(rng, random_tensor(rng, {3, 4}),
                                             [](const TensorD& x) { return ops::sum(x); }, {1});
                 }
                 return detail::unary_case(rng, random_tensor(rng, {3, 4}),
                                           [](const TensorD& x) { return ops::sum(x, 0); }, {4});
               }});

  auto binary_factory = [](std::string name,
                           std::function<TensorD(const TensorD&, const TensorD&)> op) {
    return OpCaseFactory{name, [op](Rng& rng, int i) {
                           Shape sa{3, 4}, sb{3, 4};
                           if (i % 3 == 1) sb = {4};
                           if (i % 3 == 2) {
                             sa = {3, 1};
                             sb = {1, 4};
                           }
                           TensorD a = random_tensor(rng, sa);
                           TensorD b = random_tensor(rng, sb);
                           TensorD w = random_tensor(rng, {3, 4});
                           return GradCase{[w, op](const std::vector<TensorD>& in) {
                                             return contract(op(in[0], in[1]), w);
                                           },
                                           {a, b}};
                         }};
  };
  f.push_back(binary_factory("add", [](const TensorD& a, const TensorD& b) { return ops::add(a, b); }));
  f.push_back(binary_factory("mul", [](const TensorD& a, const TensorD& b) { return ops::mul(a, b); }));
  f.push_back(binary_factory("sub", [](const TensorD& a, const TensorD& b) { return ops::sub(a, b); }));

  f.push_back({"scale", [](Rng& rng, int) {
                 const double s = rng.uniform(-2.0, 2.0);
                 return detail::unary_case(rng, random_tensor(rng, {2, 3}),
                                           [s](const TensorD& x) { return ops::scale(x, s); }, {2, 3});
               }});

  f.push_back({"mse", [](Rng& rng, int) {
                 TensorD a = random_tensor(rng, {3, 4});
                 TensorD b = random_tensor(rng, {3, 4});
                 return GradCase{[](const std::vector<TensorD>& in) { return ops::mse(in[0], in[1]); },
                                 {a, b}};
               }});

  f.push_back({"cross_entropy", [](Rng& rng, int i) {
                 TensorD z = random_tensor(rng, {4, 4}, -2.0, 2.0);
                 std::vector<std::size_t> targets(4);
                 for (auto& t : targets) t = rng.below(4);
                 std::vector<double> weights;
                 if (i % 2 == 1) weights = {0.5, 1.0, 2.0, 1.5};
                 return GradCase{[targets, weights](const std::vector<TensorD>& in) {
                                   return ops::cross_entropy(in[0], targets, weights);
                                 },
                                 {z}};
               }});

  f.push_back({"embedding_lookup", [](Rng& rng, int) {
                 TensorD table = random_tensor(rng, {5, 3});
                 std::vector<std::size_t> idx(6);
                 for (auto& v : idx) v = rng.below(5);
                 TensorD w = random_tensor(rng, {6, 3});
                 return GradCase{[idx, w](const std::vector<TensorD>& in) {
                                   return contract(ops::embedding_lookup(in[0], idx), w);
                                 },
                                 {table}};
               }});

  f.push_back({"concat", [](Rng& rng, int i) {
                 const int axis = i % 2;
                 TensorD a = random_tensor(rng, {2, 3});
                 TensorD b = random_tensor(rng, axis == 0 ? Shape{1, 3} : Shape{2, 2});
                 TensorD w = random_tensor(rng, axis == 0 ? Shape{3, 3} : Shape{2, 5});
                 return GradCase{[axis, w](const std::vector<TensorD>& in) {
                                   return contract(ops::concat<double>({in[0], in[1]}, axis), w);
                                 },
                                 {a, b}};
               }});

  f.push_back({"slice", [](Rng& rng, int i) {
                 const int axis = i % 2;
                 return detail::unary_case(
                     rng, random_tensor(rng, {4, 5}),
                     [axis](const TensorD& x) { return ops::slice(x, axis, 1, 3); },
                     axis == 0 ? Shape{2, 5} : Shape{4, 2});
               }});

  f.push_back({"reshape", [](Rng& rng, int) {
                 return detail::unary_case(rng, random_tensor(rng, {2, 6}),
                                           [](const TensorD& x) { return ops::reshape(x, {3, 4}); },
                                           {3, 4});
               }});

  f.push_back({"avg_pool", [](Rng& rng, int i) {
                 const tensor::ops::Pool2dAttrs attrs =
                     i % 2 == 0 ? tensor::ops::Pool2dAttrs{2, 2, 2, 0} : tensor::ops::Pool2dAttrs{3, 3, 2, 1};
                 const std::size_t out = (5 + 2 * attrs.padding - attrs.kernel_h) / attrs.stride + 1;
                 return detail::unary_case(rng, random_tensor(rng, {1, 2, 5, 5}),
                                           [attrs](const TensorD& x) { return ops::avg_pool(x, attrs); },
                                           {1, 2, out, out});
               }});

  f.push_back({"max_pool", [](Rng& rng, int i) {
                 const tensor::ops::Pool2dAttrs attrs =
                     i % 2 == 0 ? tensor::ops::Pool2dAttrs{2, 2, 2, 0} : tensor::ops::Pool2dAttrs{3, 3, 2, 1};
                 const std::size_t out = (5 + 2 * attrs.padding - attrs.kernel_h) / attrs.stride + 1;
                 // a random permutation of well-separated values avoids ties
                 TensorD x({1, 2, 5, 5});
                 std::vector<double> vals(x.numel());
                 for (std::size_t k = 0; k < vals.size(); ++k) vals[k] = 0.1 * static_cast<double>(k);
                 rng.shuffle(std::span<double>(vals));
                 for (std::size_t k = 0; k < vals.size(); ++k) x[k] = vals[k];
                 return detail::unary_case(rng, x,
                                           [attrs](const TensorD& v) { return ops::max_pool(v, attrs); },
                                           {1, 2, out, out});
               }});

  return f;
}

}  // namespace endonet::testing
