#include <cmath>
#include <random>

#include "doctest.h"
#include "effecg/gradcheck.hpp"
#include "effecg/ops.hpp"
#include "test_util.hpp"

using namespace effecg;
using effecg::testing::pick;
using effecg::testing::probe;
using effecg::testing::random_tensor;

TEST_CASE("conv1d hand cross-correlation") {
  auto x = Tensor(Shape{1, 3}, {1, 2, 3});
  auto k = Tensor(Shape{1, 1, 3}, {1, 0, -1});
  auto y = conv1d(x, k, 1, Padding::valid);
  CHECK(y.shape() == Shape{1, 1});
  CHECK(y.at(0) == doctest::Approx(-2.0));
}

TEST_CASE("conv1d identity kernel and zero input") {
  std::mt19937_64 rng(3);
  auto x = random_tensor(rng, {3, 17});
  auto id = Tensor(Shape{3, 3, 1}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto y = conv1d(x, id, 1, Padding::same);
  CHECK(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));

  auto k = random_tensor(rng, {2, 3, 5});
  auto z = conv1d(Tensor::zeros({3, 17}), k, 2, Padding::same);
  for (double v : z.values()) CHECK(v == 0.0);
}

TEST_CASE("conv1d geometry") {
  // same padding keeps the length at stride 1 and takes ceil(N / s) otherwise
  CHECK(conv_geometry(100, 9, 1, Padding::same).out_length == 100);
  CHECK(conv_geometry(100, 9, 2, Padding::same).out_length == 50);
  CHECK(conv_geometry(101, 3, 2, Padding::same).out_length == 51);
  auto g = conv_geometry(10, 4, 1, Padding::same);
  CHECK(g.pad_left == 1);
  CHECK(g.pad_right == 2);
  CHECK(conv_geometry(10, 3, 3, Padding::valid).out_length == 3);
  CHECK_THROWS_AS(conv_geometry(2, 5, 1, Padding::valid), std::invalid_argument);
}

TEST_CASE("conv1d rejects channel mismatch") {
  auto x = Tensor::zeros({2, 8});
  auto k = Tensor::zeros({4, 3, 3});
  CHECK_THROWS_WITH_AS(conv1d(x, k, 1, Padding::same),
                       doctest::Contains("expect 3 input channels"), std::invalid_argument);
}

TEST_CASE("depthwise conv examples") {
  auto x = Tensor(Shape{1, 3}, {1, 2, 3});
  auto y = depthwise_conv1d(x, Tensor(Shape{1, 2}, {1, 1}), 1, Padding::valid);
  CHECK(y.shape() == Shape{1, 2});
  CHECK(y.at(0) == 3.0);
  CHECK(y.at(1) == 5.0);

  std::mt19937_64 rng(5);
  auto x2 = random_tensor(rng, {2, 6});
  auto scaled = depthwise_conv1d(x2, Tensor(Shape{2, 1}, {1, 2}), 1, Padding::same);
  for (std::size_t t = 0; t < 6; ++t) {
    CHECK(scaled.at({0, t}) == x2.at({0, t}));
    CHECK(scaled.at({1, t}) == 2.0 * x2.at({1, t}));
  }
  CHECK_THROWS_AS(depthwise_conv1d(x2, Tensor::zeros({3, 1}), 1, Padding::same),
                  std::invalid_argument);
}

TEST_CASE("depthwise conv channel independence") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor(rng, {2, 3, 12});
    auto k = random_tensor(rng, {3, 5});
    auto base = depthwise_conv1d(x, k, 2, Padding::same);
    auto perturbed_values = std::vector<double>(x.values().begin(), x.values().end());
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t t = 0; t < 12; ++t) perturbed_values[(b * 3 + 0) * 12 + t] += 10.0;
    }
    auto y = depthwise_conv1d(Tensor(x.shape(), perturbed_values), k, 2, Padding::same);
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t ch = 1; ch < 3; ++ch) {
        for (std::size_t t = 0; t < y.dim(2); ++t) CHECK(y.at({b, ch, t}) == base.at({b, ch, t}));
      }
    }
  }
}

TEST_CASE("matmul examples") {
  auto id = Tensor::matrix({{1, 0}, {0, 1}});
  auto m = Tensor::matrix({{1, 2}, {3, 4}});
  auto p = matmul(id, m);
  for (std::size_t i = 0; i < 4; ++i) CHECK(p.at(i) == m.at(i));
  CHECK(matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}})).item() == 11.0);
  auto z = matmul(Tensor::zeros({3, 2}), m);
  for (double v : z.values()) CHECK(v == 0.0);
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), m), std::invalid_argument);
}

TEST_CASE("activation values") {
  CHECK(sigmoid(Tensor::scalar(0)).item() == 0.5);
  CHECK(relu(Tensor::scalar(-3)).item() == 0.0);
  CHECK(relu(Tensor::scalar(3)).item() == 3.0);
  CHECK(swish(Tensor::scalar(0)).item() == 0.0);
  auto s = sigmoid(Tensor::vector({-800, -5, 5, 800}));
  for (double v : s.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(std::isfinite(v));
  }
}

TEST_CASE("softmax examples") {
  auto a = softmax(Tensor::vector({0, 0}), 0);
  CHECK(a.at(0) == 0.5);
  CHECK(a.at(1) == 0.5);
  auto b = softmax(Tensor::vector({1, 0}), 0);
  CHECK(b.at(0) == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(b.at(1) == doctest::Approx(0.2689).epsilon(1e-4));
  auto c = softmax(Tensor::vector({1000, 999}), 0);
  CHECK(std::isfinite(c.at(0)));
  CHECK(c.at(0) + c.at(1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("softmax slices sum to one and are shift invariant") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t a = pick(rng, 1, 4), b = pick(rng, 1, 5), c = pick(rng, 1, 3);
    const std::size_t axis = pick(rng, 0, 2);
    auto x = random_tensor(rng, {a, b, c}, -20, 20);
    const double shift = std::uniform_real_distribution<double>(-50, 50)(rng);
    auto y = softmax(x, axis);
    auto y2 = softmax(add_scalar(x, shift), axis);
    for (std::size_t i = 0; i < y.numel(); ++i) {
      CHECK(std::abs(y.at(i) - y2.at(i)) <= 1e-9);
      CHECK(y.at(i) > 0.0);
    }
    // sum along the axis
    const Shape& s = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < 3; ++i) inner *= s[i];
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        double total = 0;
        for (std::size_t k = 0; k < s[axis]; ++k) total += y.at((o * s[axis] + k) * inner + in);
        CHECK(std::abs(total - 1.0) <= 1e-9);
      }
    }
  }
}

TEST_CASE("reductions") {
  CHECK(global_avg_pool(Tensor(Shape{1, 3}, {1, 2, 3})).at(0) == 2.0);
  auto c = global_avg_pool(Tensor(Shape{2, 4}, 2.5));
  CHECK(c.at(0) == 2.5);
  CHECK(c.at(1) == 2.5);
  auto p1 = global_avg_pool(Tensor(Shape{1, 4}, {1, 5, 2, 8}));
  auto p2 = global_avg_pool(Tensor(Shape{1, 4}, {8, 2, 5, 1}));
  CHECK(p1.at(0) == p2.at(0));
  CHECK_THROWS_AS(global_avg_pool(Tensor::zeros({2, 0})), std::invalid_argument);
  CHECK(sum(Tensor::vector({1, 2, 3})).item() == 6.0);
  CHECK(mean(Tensor::vector({1, 2, 3})).item() == 2.0);
}

TEST_CASE("concat and slice") {
  auto c = concat({Tensor::vector({1, 2}), Tensor::vector({3})}, 0);
  CHECK(c.shape() == Shape{3});
  CHECK(c.at(2) == 3.0);
  auto x = Tensor::vector({4, 5});
  auto same = concat({x, Tensor::zeros({0})}, 0);
  CHECK(same.numel() == 2);
  CHECK(same.at(1) == 5.0);

  std::mt19937_64 rng(2);
  auto a = random_tensor(rng, {2, 3, 4});
  auto b = random_tensor(rng, {2, 5, 4});
  auto ab = concat({a, b}, 1);
  auto ra = slice(ab, 1, 0, 3);
  auto rb = slice(ab, 1, 3, 5);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(ra.at(i) == a.at(i));
  for (std::size_t i = 0; i < b.numel(); ++i) CHECK(rb.at(i) == b.at(i));
  CHECK_THROWS_AS(concat({a, random_tensor(rng, {3, 3, 4})}, 1), std::invalid_argument);
}

TEST_CASE("backward examples") {
  std::mt19937_64 rng(8);
  auto x = random_tensor(rng, {2, 3}).set_requires_grad();
  backward(sum(x));
  const auto gx = x.grad();
  for (double g : gx.values()) CHECK(g == 1.0);

  auto y = Tensor::vector({1, 2}).set_requires_grad();
  auto loss = sum(square(y));
  backward(loss);
  CHECK(y.grad().at(0) == 2.0);
  CHECK(y.grad().at(1) == 4.0);

  auto stranger = Tensor::vector({7, 7, 7}).set_requires_grad();
  CHECK_FALSE(stranger.has_grad());
  const auto gs = stranger.grad();
  for (double g : gs.values()) CHECK(g == 0.0);
  CHECK(stranger.grad().shape() == Shape{3});
}

TEST_CASE("backward errors") {
  auto x = Tensor::vector({1, 2}).set_requires_grad();
  CHECK_THROWS_AS(backward(square(x)), std::invalid_argument);
  auto loss = sum(square(x));
  backward(loss);
  CHECK_THROWS_AS(backward(loss), std::logic_error);
  // a fresh forward pass is fine again
  backward(sum(square(x)));
  CHECK(x.grad().at(1) == 8.0);
}

TEST_CASE("tape records each op once") {
  auto x = Tensor::vector({1, 2}).set_requires_grad();
  auto y = square(x);
  auto loss = sum(add(y, y));
  auto tape = Tape::trace(loss);
  // leaf, square, add, sum
  CHECK(tape.size() == 4);
  tape.replay();
  CHECK(x.grad().at(0) == 4.0);
  CHECK(x.grad().at(1) == 8.0);
}

TEST_CASE("grad_check examples") {
  auto r1 = grad_check([](const Tensor& x) { return sum(square(x)); }, Tensor::vector({1, 2, 3}));
  CHECK(r1.max_rel_error < 1e-7);

  std::mt19937_64 rng(13);
  auto r2 = grad_check([](const Tensor& x) { return sum(sigmoid(x)); },
                       random_tensor(rng, {4, 5}, -3, 3));
  CHECK(r2.max_rel_error < 1e-6);

  auto k = random_tensor(rng, {3, 2, 5});
  auto w = random_tensor(rng, {3});
  auto r3 = grad_check(
      [&](const Tensor& x) {
        return probe(global_avg_pool(swish(conv1d(x, k, 2, Padding::same))), w);
      },
      random_tensor(rng, {2, 11}));
  CHECK(r3.max_rel_error < 1e-5);
}

TEST_CASE("every differentiable op passes randomized gradient checks") {
  std::mt19937_64 rng(20260101);
  const int ops = 17;
  double worst = 0.0;
  for (int trial = 0; trial < 119; ++trial) {
    const int op = trial % ops;
    const std::size_t b = pick(rng, 2, 3), c = pick(rng, 1, 3), n = pick(rng, 3, 9);
    Tensor x = random_tensor(rng, {b, c, n});
    Tensor other = random_tensor(rng, {b, c, n});
    Tensor w;
    std::function<Tensor()> f;
    std::vector<Tensor> leaves{x};
    switch (op) {
      case 0: {
        auto k = random_tensor(rng, {pick(rng, 1, 3), c, pick(rng, 1, 3)});
        leaves.push_back(k);
        const std::size_t stride = pick(rng, 1, 2);
        w = random_tensor(rng, conv1d(x, k, stride, Padding::same).shape());
        f = [=] { return probe(conv1d(x, k, stride, Padding::same), w); };
        break;
      }
      case 1: {
        auto k = random_tensor(rng, {c, pick(rng, 1, 3)});
        leaves.push_back(k);
        w = random_tensor(rng, depthwise_conv1d(x, k, 2, Padding::valid).shape());
        f = [=] { return probe(depthwise_conv1d(x, k, 2, Padding::valid), w); };
        break;
      }
      case 2: {
        auto m = random_tensor(rng, {n, 4});
        leaves.push_back(m);
        w = random_tensor(rng, {b * c, 4});
        f = [=] { return probe(matmul(reshape(x, {b * c, n}), m), w); };
        break;
      }
      case 3: {
        auto m = random_tensor(rng, {b, n, 2});
        leaves.push_back(m);
        w = random_tensor(rng, {b, c, 2});
        f = [=] { return probe(batched_matmul(x, m), w); };
        break;
      }
      case 4:
        w = random_tensor(rng, x.shape());
        f = [=] { return probe(sigmoid(x), w); };
        break;
      case 5:
        w = random_tensor(rng, x.shape());
        f = [=] { return probe(swish(x), w); };
        break;
      case 6:
        w = random_tensor(rng, x.shape());
        f = [=] { return probe(tanh(x), w); };
        break;
      case 7: {
        const std::size_t axis = pick(rng, 0, 2);
        w = random_tensor(rng, x.shape());
        f = [=] { return probe(softmax(x, axis), w); };
        break;
      }
      case 8:
        w = random_tensor(rng, {b, c});
        f = [=] { return probe(global_avg_pool(x), w); };
        break;
      case 9:
        leaves.push_back(other);
        w = random_tensor(rng, {b, 2 * c, n});
        f = [=] { return probe(concat({x, other}, 1), w); };
        break;
      case 10:
        leaves.push_back(other);
        w = random_tensor(rng, x.shape());
        f = [=] { return probe(mul(x, sub(other, x)), w); };
        break;
      case 11: {
        auto bias = random_tensor(rng, {c});
        leaves.push_back(bias);
        w = random_tensor(rng, x.shape());
        f = [=] { return probe(add_bias(x, bias, 1), w); };
        break;
      }
      case 12: {
        auto s = random_tensor(rng, {b, c});
        leaves.push_back(s);
        w = random_tensor(rng, x.shape());
        f = [=] { return probe(channel_scale(x, s), w); };
        break;
      }
      case 13: {
        auto gamma = random_tensor(rng, {c}, 0.5, 1.5);
        auto beta = random_tensor(rng, {c});
        leaves.push_back(gamma);
        leaves.push_back(beta);
        w = random_tensor(rng, x.shape());
        f = [=] { return probe(batch_norm_train(x, gamma, beta, 1e-5, nullptr, nullptr), w); };
        break;
      }
      case 14: {
        auto gamma = random_tensor(rng, {c}, 0.5, 1.5);
        auto beta = random_tensor(rng, {c});
        leaves.push_back(gamma);
        leaves.push_back(beta);
        std::vector<double> rm(c, 0.1), rv(c, 0.7);
        w = random_tensor(rng, x.shape());
        f = [=] { return probe(batch_norm_eval(x, gamma, beta, rm, rv, 1e-5), w); };
        break;
      }
      case 15: {
        std::vector<bool> take(b);
        for (std::size_t i = 0; i < b; ++i) take[i] = (i + trial) % 2 == 0;
        leaves.push_back(other);
        w = random_tensor(rng, x.shape());
        f = [=] { return probe(row_select(take, x, other), w); };
        break;
      }
      default: {
        auto table = random_tensor(rng, {5, 3});
        leaves = {table};
        std::vector<std::size_t> rows{1, 4, 1};
        w = random_tensor(rng, {3, 3});
        f = [=] { return probe(slice(transpose(gather_rows(table, rows)), 0, 1, 2), slice(w, 0, 1, 2)); };
        break;
      }
    }
    auto r = grad_check(f, leaves);
    INFO("op " << op << " trial " << trial);
    CHECK(r.max_rel_error < 1e-5);
    worst = std::max(worst, r.max_rel_error);
  }
  MESSAGE("worst op gradient relative error: " << worst);
}
