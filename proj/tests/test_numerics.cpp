#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "mambatrack/gradcheck.hpp"
#include "mambatrack/ops.hpp"
#include "mambatrack/tensor.hpp"
#include "test_util.hpp"

using namespace mambatrack;
using testutil::randn;

TEST_CASE("linear: identity and hand arithmetic") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0});
  Tensor I = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor y = ops::linear(x, I);
  CHECK(y.at({0}) == 1.0);
  CHECK(y.at({1}) == 2.0);

  Tensor x2 = Tensor::from_data({1, 2}, {1.0, 1.0});
  Tensor W = Tensor::from_data({2, 1}, {2.0, 3.0});
  Tensor b = Tensor::from_data({1}, {0.5});
  Tensor out = ops::linear(x2, W, &b);
  CHECK(out.at({0, 0}) == doctest::Approx(5.5).epsilon(1e-12));
}

TEST_CASE("linear: shape mismatch names both shapes") {
  Tensor x = Tensor::zeros({3, 5});
  Tensor W = Tensor::zeros({4, 2});
  CHECK_THROWS_WITH_AS(ops::linear(x, W), doctest::Contains("[3,5]"), std::invalid_argument);
  try {
    ops::linear(x, W);
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("linear: gradient matches central finite differences") {
  std::mt19937_64 rng(7);
  Tensor x = randn({3, 4}, rng).set_requires_grad(true);
  Tensor W = randn({4, 5}, rng).set_requires_grad(true);
  Tensor b = randn({5}, rng).set_requires_grad(true);
  auto fwd = [&]() { return ops::sum(ops::linear(x, W, &b)); };
  auto res = grad_check(fwd, {{"x", x}, {"W", W}, {"b", b}});
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("depthwise_conv1d: identity kernel") {
  std::mt19937_64 rng(3);
  Tensor x = randn({6, 3}, rng);
  Tensor k = Tensor::full({1, 3}, 1.0);
  Tensor y = ops::depthwise_conv1d(x, k, true);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("depthwise_conv1d: causal impulse response reads kernel reversed") {
  // x = impulse at t=0; out[t] = kernel[K-1-t] for t < K.
  Tensor x = Tensor::zeros({5, 1});
  x.at_mut({0, 0}) = 1.0;
  Tensor k = Tensor::from_data({3, 1}, {0.3, -0.6, 1.1});  // [a,b,c]
  Tensor y = ops::depthwise_conv1d(x, k, true);
  CHECK(y.at({0, 0}) == doctest::Approx(1.1));
  CHECK(y.at({1, 0}) == doctest::Approx(-0.6));
  CHECK(y.at({2, 0}) == doctest::Approx(0.3));
  CHECK(y.at({3, 0}) == 0.0);
}

TEST_CASE("depthwise_conv1d: kernel edge cases") {
  Tensor x = Tensor::zeros({2, 1});
  CHECK_THROWS_AS(ops::depthwise_conv1d(x, Tensor::zeros({0, 1}), true), std::invalid_argument);
  // K > L is allowed via zero padding.
  Tensor k = Tensor::full({5, 1}, 1.0);
  Tensor y = ops::depthwise_conv1d(Tensor::full({2, 1}, 1.0), k, true);
  CHECK(y.at({0, 0}) == 1.0);
  CHECK(y.at({1, 0}) == 2.0);
}

TEST_CASE("depthwise_conv1d: gradient check on random 8x4") {
  std::mt19937_64 rng(11);
  for (bool causal : {true, false}) {
    Tensor x = randn({8, 4}, rng).set_requires_grad(true);
    Tensor k = randn({3, 4}, rng).set_requires_grad(true);
    auto fwd = [&]() { return ops::sum(ops::mul(ops::depthwise_conv1d(x, k, causal),
                                                ops::depthwise_conv1d(x, k, causal))); };
    auto res = grad_check(fwd, {{"x", x}, {"k", k}});
    CHECK(res.max_rel_err < 1e-6);
  }
}

TEST_CASE("activations: fixed points and gradients") {
  Tensor zero = Tensor::scalar(0.0);
  CHECK(ops::sigmoid(zero).item() == doctest::Approx(0.5));
  CHECK(ops::silu(zero).item() == 0.0);
  CHECK(ops::gelu(zero).item() == 0.0);

  for (Act kind : {Act::kSilu, Act::kGelu, Act::kSigmoid, Act::kSoftplus}) {
    Tensor x = Tensor::from_data({4}, {-2.0, -0.1, 0.3, 4.0}).set_requires_grad(true);
    auto fwd = [&]() { return ops::sum(ops::activation(x, kind)); };
    auto res = grad_check(fwd, {{"x", x}});
    CHECK(res.max_rel_err < 1e-6);
  }
}

TEST_CASE("activations: range invariants at extreme inputs") {
  for (double v : {-1e6, -700.0, -36.0, -1.0, 0.0, 1.0, 36.0, 700.0, 1e6}) {
    const double s = scalar::sigmoid(v);
    CHECK(s > 0.0);
    CHECK(s < 1.0);
    CHECK(scalar::softplus(v) > 0.0);
  }
}

TEST_CASE("layer_norm: constant row maps to zero, symmetric pair normalizes") {
  Tensor g = Tensor::full({3}, 1.0);
  Tensor b = Tensor::zeros({3});
  Tensor x = Tensor::full({1, 3}, 4.2);
  Tensor y = ops::layer_norm(x, g, b);
  for (int64_t i = 0; i < 3; ++i) CHECK(y.data()[i] == doctest::Approx(0.0));

  Tensor g2 = Tensor::full({2}, 1.0);
  Tensor b2 = Tensor::zeros({2});
  Tensor x2 = Tensor::from_data({1, 2}, {1.0, 3.0});
  Tensor y2 = ops::layer_norm(x2, g2, b2);
  CHECK(y2.at({0, 0}) == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(y2.at({0, 1}) == doctest::Approx(1.0).epsilon(1e-4));

  std::mt19937_64 rng(5);
  Tensor xr = randn({4, 8}, rng, 3.0);
  Tensor out = ops::layer_norm(xr, Tensor::full({8}, 1.0), Tensor::zeros({8}));
  for (int64_t r = 0; r < 4; ++r) {
    double m = 0;
    for (int64_t d = 0; d < 8; ++d) m += out.at({r, d});
    CHECK(std::fabs(m / 8.0) < 1e-9);
  }
}

TEST_CASE("layer_norm: gradient check") {
  std::mt19937_64 rng(13);
  Tensor x = randn({3, 6}, rng).set_requires_grad(true);
  Tensor g = randn({6}, rng).set_requires_grad(true);
  Tensor b = randn({6}, rng).set_requires_grad(true);
  auto fwd = [&]() {
    Tensor y = ops::layer_norm(x, g, b);
    return ops::sum(ops::mul(y, y));
  };
  auto res = grad_check(fwd, {{"x", x}, {"g", g}, {"b", b}});
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("backward: sum(W*x) gradient structure and contract cases") {
  Tensor x = Tensor::from_data({2, 2}, {1.0, 2.0, 3.0, 4.0});
  Tensor W = Tensor::zeros({2, 3}).set_requires_grad(true);
  Graph g;
  Tensor loss;
  {
    GraphContext ctx(g);
    loss = ops::sum(ops::linear(x, W));
  }
  g.backward(loss);
  // dW[i,j] = sum_l x[l,i]
  CHECK(W.grad()[0 * 3 + 0] == doctest::Approx(4.0));  // x[:,0] = 1+3
  CHECK(W.grad()[1 * 3 + 2] == doctest::Approx(6.0));  // x[:,1] = 2+4

  CHECK_THROWS_AS(g.backward(loss), std::runtime_error);

  // Accumulation across fresh graphs adds into grad.
  Graph g2;
  {
    GraphContext ctx(g2);
    loss = ops::sum(ops::linear(x, W));
  }
  g2.backward(loss);
  CHECK(W.grad()[0] == doctest::Approx(8.0));

  // Non-scalar loss rejected.
  Graph g3;
  Tensor vec;
  {
    GraphContext ctx(g3);
    vec = ops::linear(x, W);
  }
  CHECK_THROWS_AS(g3.backward(vec), std::invalid_argument);
}

TEST_CASE("support primitives: composite gradient check") {
  std::mt19937_64 rng(23);
  Tensor a = randn({4, 3}, rng).set_requires_grad(true);
  Tensor b = testutil::uniform({4, 3}, rng, 0.5, 2.0).set_requires_grad(true);
  Tensor s = Tensor::scalar(0.7).set_requires_grad(true);
  auto fwd = [&]() {
    Tensor m = ops::mul(a, b);
    Tensor d = ops::div(a, b);
    Tensor mx = ops::maximum(m, d);
    Tensor mn = ops::minimum(m, d);
    Tensor c = ops::concat_cols(mx, mn);
    Tensor rev = ops::reverse_rows(c);
    Tensor sl = ops::slice_rows(rev, 1, 2);
    Tensor sc = ops::scale_by(sl, s);
    Tensor mr = ops::mean_rows(sc);
    Tensor nm = ops::l2_norm(mr);
    Tensor parts = ops::stack_scalars({nm, ops::select(sc, 3), ops::mean(ops::abs(sc))});
    return ops::sum(ops::add(parts, parts));
  };
  auto res = grad_check(fwd, {{"a", a}, {"b", b}, {"s", s}});
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("conv2d and extract_patches: gradient check") {
  std::mt19937_64 rng(31);
  Tensor img = randn({6, 6, 2}, rng).set_requires_grad(true);
  Tensor k = randn({3, 3, 2, 4}, rng, 0.5).set_requires_grad(true);
  Tensor bias = randn({4}, rng).set_requires_grad(true);
  auto fwd = [&]() {
    Tensor y = ops::conv2d(img, k, &bias);
    Tensor act = ops::silu(y);
    Tensor p = ops::extract_patches(act, 3);
    return ops::mean(ops::mul(p, p));
  };
  auto res = grad_check(fwd, {{"img", img}, {"k", k}, {"bias", bias}});
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("extract_patches: token order is row-major over the patch grid") {
  // 4x4 single-channel grid, patch 2 -> 4 tokens.
  std::vector<double> v(16);
  for (int i = 0; i < 16; ++i) v[static_cast<size_t>(i)] = i;
  Tensor g = Tensor::from_data({4, 4, 1}, v);
  Tensor p = ops::extract_patches(g, 2);
  CHECK(p.shape() == std::vector<int64_t>{4, 4});
  CHECK(p.at({0, 0}) == 0.0);   // token (0,0) top-left element
  CHECK(p.at({1, 0}) == 2.0);   // token (0,1) starts at column 2
  CHECK(p.at({2, 0}) == 8.0);   // token (1,0) starts at row 2
  CHECK(p.at({3, 3}) == 15.0);  // token (1,1) bottom-right
}

TEST_CASE("forward determinism: identical inputs give bit-identical outputs") {
  std::mt19937_64 rng(41);
  Tensor x = randn({5, 7}, rng);
  Tensor W = randn({7, 7}, rng);
  Tensor y1 = ops::gelu(ops::linear(x, W));
  Tensor y2 = ops::gelu(ops::linear(x, W));
  for (int64_t i = 0; i < y1.numel(); ++i) CHECK(y1.data()[i] == y2.data()[i]);
}

TEST_CASE("gradcheck self-test: injected adjoint error is detected") {
  std::mt19937_64 rng(47);
  Tensor x = randn({3, 3}, rng).set_requires_grad(true);
  auto fwd = [&]() { return ops::sum(ops::silu(x)); };
  GradCheckOptions opts;
  opts.inject_error = 1.0;
  auto res = grad_check(fwd, {{"x", x}}, opts);
  CHECK_FALSE(res.passed(1e-4));
}
