#include <doctest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include "endonet/common/error.hpp"
#include "endonet/tensor/grad_check.hpp"
#include "endonet/tensor/graph.hpp"
#include "endonet/tensor/ops.hpp"
#include "endonet/tensor/optimizer.hpp"
#include "endonet/tensor/serialize.hpp"
#include "gradcheck_cases.hpp"
#include "random_tensors.hpp"

using namespace endonet;
using namespace endonet::tensor;
using endonet::testing::random_tensor;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an endonet::Error");
  return ErrorCode::InvalidArgument;
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
  TensorD x({3}, 0.0);
  TensorD y = ops::softmax(x);
  for (std::size_t i = 0; i < 3; ++i) CHECK(y[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("matmul with identity returns the operand") {
  Rng rng(3);
  TensorD eye({3, 3}, 0.0);
  for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  TensorD a = random_tensor(rng, {3, 5});
  TensorD y = ops::matmul(eye, a);
  REQUIRE(y.shape() == Shape{3, 5});
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(y[i] == a[i]);
}

TEST_CASE("reference stem maps 224 to 56") {
  TensorF x({1, 3, 224, 224}, 0.5f);
  TensorF w({4, 3, 7, 7}, 0.01f);
  TensorF y = ops::conv2d(x, w, TensorF(), {2, 3});
  CHECK(y.shape() == Shape{1, 4, 112, 112});
  TensorF p = ops::max_pool(y, {3, 3, 2, 1});
  CHECK(p.shape() == Shape{1, 4, 56, 56});
}

TEST_CASE("backward of sum of squares") {
  TensorD x({2}, std::vector<double>{1.0, 2.0});
  x.set_requires_grad(true);
  Graph<double> g;
  {
    GraphScope<double> scope(g);
    TensorD loss = ops::sum(ops::mul(x, x));
    backward(g, loss);
  }
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 4.0);
}

TEST_CASE("mse of a tensor with itself has zero gradient") {
  TensorD x({4}, std::vector<double>{1.0, -2.0, 3.0, 0.5});
  x.set_requires_grad(true);
  Graph<double> g;
  GraphScope<double> scope(g);
  TensorD loss = ops::mse(x, x);
  g.backward(loss);
  for (double v : x.grad()) CHECK(v == 0.0);
}

TEST_CASE("three-layer MLP gradients match central differences") {
  Rng rng(11);
  std::vector<TensorD> inputs = {random_tensor(rng, {5, 6}), random_tensor(rng, {6, 8}),
                                 random_tensor(rng, {8}),    random_tensor(rng, {8, 8}),
                                 random_tensor(rng, {8}),    random_tensor(rng, {8, 3})};
  std::vector<std::size_t> targets = {0, 2, 1, 1, 0};
  auto fn = [targets](const std::vector<TensorD>& in) {
    TensorD h = ops::gelu(ops::add(ops::matmul(in[0], in[1]), in[2]));
    h = ops::gelu(ops::add(ops::matmul(h, in[3]), in[4]));
    return ops::cross_entropy(ops::matmul(h, in[5]), targets);
  };
  GradCheckReport r = grad_check(fn, inputs);
  CHECK(r.passed);
  CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("grad_check examples") {
  SUBCASE("relu at 1") {
    GradCheckReport r = grad_check(
        [](const std::vector<TensorD>& in) { return ops::sum(ops::relu(in[0])); },
        {TensorD({1}, std::vector<double>{1.0})});
    CHECK(r.passed);
    CHECK(r.analytic[0][0] == doctest::Approx(1.0));
  }
  SUBCASE("layer_norm on a random 8-vector") {
    Rng rng(5);
    TensorD w = random_tensor(rng, {8});
    GradCheckReport r = grad_check(
        [w](const std::vector<TensorD>& in) {
          return ops::sum(ops::mul(ops::layer_norm(in[0], in[1], in[2]), w));
        },
        {random_tensor(rng, {8}), random_tensor(rng, {8}, 0.5, 1.5), random_tensor(rng, {8})});
    CHECK(r.max_relative_error < 1e-4);
  }
  SUBCASE("softmax then cross entropy over 4 classes") {
    Rng rng(6);
    GradCheckReport r = grad_check(
        [](const std::vector<TensorD>& in) {
          TensorD p = ops::softmax(in[0]);
          return ops::cross_entropy(p, {3, 0});
        },
        {random_tensor(rng, {2, 4}, -2.0, 2.0)});
    CHECK(r.max_relative_error < 1e-4);
  }
}

TEST_CASE("grad_check rejects a non-deterministic function") {
  int calls = 0;
  auto fn = [&calls](const std::vector<TensorD>& in) {
    ++calls;
    return ops::scale(ops::sum(in[0]), static_cast<double>(calls));
  };
  CHECK(code_of([&] { grad_check(fn, {TensorD({2}, 1.0)}); }) == ErrorCode::NonDeterministic);
}

TEST_CASE("every op passes grad_check on 20 random instances") {
  Rng rng(2024);
  for (const auto& factory : endonet::testing::gradcheck_factories()) {
    CAPTURE(factory.op);
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
      auto c = factory.make(rng, i);
      GradCheckReport r = grad_check(c.fn, c.inputs);
      worst = std::max(worst, r.max_relative_error);
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("softmax is stable at large magnitudes") {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    TensorF x = random_tensor<float>(rng, {4, 7}, -1e4, 1e4);
    for (int axis : {0, 1}) {
      TensorF y = ops::softmax(x, axis);
      const std::size_t outer = axis == 0 ? 7 : 4, n = axis == 0 ? 4 : 7;
      for (std::size_t o = 0; o < outer; ++o) {
        double s = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const float v = axis == 0 ? y[k * 7 + o] : y[o * 7 + k];
          CHECK(v >= 0.0f);
          s += v;
        }
        CHECK(std::abs(s - 1.0) < 1e-6);
      }
    }
  }
}

TEST_CASE("softmax masks -inf entries and rejects empty axes") {
  const double inf = std::numeric_limits<double>::infinity();
  TensorD x({3}, std::vector<double>{0.0, -inf, 0.0});
  TensorD y = ops::softmax(x);
  CHECK(y[1] == 0.0);
  CHECK(y[0] == doctest::Approx(0.5));
  CHECK(code_of([] { ops::softmax(TensorD({2, 0}), -1); }) == ErrorCode::EmptyAxis);
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(21);
  TensorD a = random_tensor(rng, {3, 4});
  TensorD b = random_tensor(rng, {4, 2});
  const double s = 3.0;
  auto grads = [&](double factor) {
    TensorD x = a.clone();
    x.set_requires_grad(true);
    Graph<double> g;
    GraphScope<double> scope(g);
    TensorD loss = ops::sum(ops::gelu(ops::matmul(x, b)));
    if (factor != 1.0) loss = ops::scale(loss, factor);
    g.backward(loss);
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  auto g1 = grads(1.0), gs = grads(s);
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(std::abs(gs[i] - s * g1[i]) <= 1e-12);
}

TEST_CASE("graph replay is bit-identical in f32") {
  auto run = [] {
    Rng rng(77);
    TensorF x = random_tensor<float>(rng, {2, 3, 8, 8});
    TensorF w = random_tensor<float>(rng, {4, 3, 3, 3});
    w.set_requires_grad(true);
    Graph<float> g;
    GraphScope<float> scope(g);
    TensorF y = ops::conv2d(x, w, TensorF(), {1, 1});
    TensorF loss = ops::mean(ops::relu(y));
    g.backward(loss);
    std::vector<float> out(y.data().begin(), y.data().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  auto r1 = run(), r2 = run();
  REQUIRE(r1.size() == r2.size());
  CHECK(std::memcmp(r1.data(), r2.data(), r1.size() * sizeof(float)) == 0);
}

TEST_CASE("backward errors") {
  TensorD x({2}, 1.0);
  x.set_requires_grad(true);
  SUBCASE("non-scalar loss") {
    Graph<double> g;
    GraphScope<double> scope(g);
    TensorD y = ops::relu(x);
    CHECK(code_of([&] { g.backward(y); }) == ErrorCode::NonScalarLoss);
  }
  SUBCASE("second backward") {
    Graph<double> g;
    GraphScope<double> scope(g);
    TensorD loss = ops::sum(x);
    g.backward(loss);
    CHECK(code_of([&] { g.backward(loss); }) == ErrorCode::GraphConsumed);
  }
  SUBCASE("shape mismatch names the op") {
    try {
      ops::matmul(TensorD({2, 3}), TensorD({4, 2}));
      FAIL("no throw");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::ShapeMismatch);
      CHECK(std::string(e.what()).find("matmul") != std::string::npos);
    }
    CHECK(code_of([] { ops::add(TensorD({2, 3}), TensorD({4})); }) == ErrorCode::ShapeMismatch);
  }
}

TEST_CASE("optimizer recurrences") {
  SUBCASE("sgd") {
    TensorList params = {{"p", TensorF({1}, 1.0f)}};
    params[0].tensor.set_requires_grad(true);
    params[0].tensor.ensure_grad()[0] = 2.0f;
    OptimizerState st;
    st.config.kind = OptimizerKind::sgd;
    st.config.learning_rate = 0.1;
    optimizer_step(st, params);
    CHECK(params[0].tensor[0] == doctest::Approx(0.8f));
    CHECK(st.step_count == 1);
    params[0].tensor.zero_grad();
    optimizer_step(st, params);
    CHECK(params[0].tensor[0] == doctest::Approx(0.8f));
    CHECK(st.step_count == 2);
  }
  SUBCASE("adam first step") {
    TensorList params = {{"p", TensorF({1}, 0.0f)}};
    params[0].tensor.set_requires_grad(true);
    params[0].tensor.ensure_grad()[0] = 3.0f;
    OptimizerState st;
    st.config.learning_rate = 0.1;
    optimizer_step(st, params);
    // m_hat = 3, v_hat = 9 -> -lr * 3 / (3 + eps)
    CHECK(params[0].tensor[0] == doctest::Approx(-0.1).epsilon(1e-6));
    CHECK(st.first_moment.at("p").size() == 1);
  }
  SUBCASE("nan gradient names the parameter") {
    TensorList params = {{"encoder.w", TensorF({2}, 1.0f)}};
    params[0].tensor.set_requires_grad(true);
    params[0].tensor.ensure_grad()[1] = std::nanf("");
    OptimizerState st;
    try {
      optimizer_step(st, params);
      FAIL("no throw");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::NaNDetected);
      CHECK(std::string(e.what()).find("encoder.w") != std::string::npos);
    }
    CHECK(params[0].tensor[0] == 1.0f);
    CHECK(st.step_count == 0);
  }
  SUBCASE("moments round-trip through named tensors") {
    TensorList params = {{"a", TensorF({3}, 0.5f)}};
    params[0].tensor.set_requires_grad(true);
    for (auto& g : params[0].tensor.ensure_grad()) g = 0.25f;
    OptimizerState st;
    for (int i = 0; i < 3; ++i) optimizer_step(st, params);
    OptimizerState restored;
    restore_optimizer(restored, optimizer_tensors(st));
    CHECK(restored.step_count == 3);
    CHECK(restored.first_moment == st.first_moment);
    CHECK(restored.second_moment == st.second_moment);
  }
}

TEST_CASE("tensor segment round-trip") {
  Rng rng(1);
  TensorList list = {{"pos.table", random_tensor<float>(rng, {4, 3})},
                     {"tokens.class", random_tensor<float>(rng, {3})},
                     {"scalar", TensorF(Shape{}, std::vector<float>{2.5f})}};
  std::stringstream ss;
  write_tensor_segment(ss, list);
  std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "ENDT");
  TensorList back = read_tensor_segment(ss);
  REQUIRE(back.size() == list.size());
  for (std::size_t i = 0; i < list.size(); ++i) {
    CHECK(back[i].name == list[i].name);
    CHECK(back[i].tensor.shape() == list[i].tensor.shape());
    CHECK(back[i].tensor.values() == list[i].tensor.values());
  }
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK(code_of([&] { read_tensor_segment(truncated); }) == ErrorCode::Corrupt);
}

TEST_CASE("conv2d forward matches direct summation") {
  Rng rng(31);
  struct Geo {
    std::size_t c, h, w, o, k, stride, pad;
  };
  const std::vector<Geo> geos = {{3, 23, 19, 4, 7, 2, 3}, {2, 9, 9, 3, 3, 1, 1}, {4, 10, 7, 5, 3, 2, 1},
                                 {2, 8, 8, 3, 1, 2, 0}, {1, 6, 11, 2, 5, 3, 2}, {3, 7, 7, 2, 3, 1, 0}};
  for (const auto& g : geos) {
    TensorD x = random_tensor(rng, {2, g.c, g.h, g.w});
    TensorD wt = random_tensor(rng, {g.o, g.c, g.k, g.k});
    TensorD b = random_tensor(rng, {g.o});
    TensorD y = ops::conv2d(x, wt, b, {g.stride, g.pad});
    const std::size_t ho = (g.h + 2 * g.pad - g.k) / g.stride + 1, wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;
    REQUIRE(y.shape() == Shape{2, g.o, ho, wo});
    double worst = 0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t o = 0; o < g.o; ++o)
        for (std::size_t oy = 0; oy < ho; ++oy)
          for (std::size_t ox = 0; ox < wo; ++ox) {
            double acc = b[o];
            for (std::size_t c = 0; c < g.c; ++c)
              for (std::size_t i = 0; i < g.k; ++i)
                for (std::size_t j = 0; j < g.k; ++j) {
                  const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
                  const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
                  if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.h) || ix >= static_cast<long>(g.w)) continue;
                  acc += x[((n * g.c + c) * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] *
                         wt[((o * g.c + c) * g.k + i) * g.k + j];
                }
            worst = std::max(worst, std::abs(acc - y[((n * g.o + o) * ho + oy) * wo + ox]));
          }
    CHECK(worst < 1e-12);
  }
}
