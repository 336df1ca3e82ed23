// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <set>
#include <sstream>

#include "../support/kernel_suite.hpp"
#include "cwamsn/adamw.hpp"
#include "cwamsn/error.hpp"
#include "cwamsn/ndt_io.hpp"

using namespace cwamsn;
using namespace cwamsn::nd;

TEST_CASE("softmax of equal logits is uniform") {
  auto s = softmax(Tensor::from_data({2}, {0.f, 0.f}), 0);
  CHECK(s.data()[0] == doctest::Approx(0.5));
  CHECK(s.data()[1] == doctest::Approx(0.5));
}

TEST_CASE("l2_normalize of a 3-4-5 vector") {
  auto y = l2_normalize(Tensor::from_data({2}, {3.f, 4.f}), 0);
  CHECK(y.data()[0] == doctest::Approx(0.6).epsilon(1e-7));
  CHECK(y.data()[1] == doctest::Approx(0.8).epsilon(1e-7));
}

TEST_CASE("matmul with identity") {
  Rng rng(3);
  auto a = testing::random_tensor(rng, {3, 3});
  auto eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto c = matmul(eye, a);
  CHECK(c.to_vector() == a.to_vector());
}

TEST_CASE("fused affine and attention agree with their unfused compositions") {
  Rng rng(11);
  auto x = testing::random_tensor(rng, {3, 5, 6});
  auto w = testing::random_tensor(rng, {6, 4});
  auto b = testing::random_tensor(rng, {4});
  auto fused = affine(x, w, b);
  auto plain = add(matmul(x, w), b);
  for (std::size_t i = 0; i < fused.numel(); ++i) CHECK(fused.data()[i] == doctest::Approx(plain.data()[i]).epsilon(1e-6));

  // heads = 3, dh = 2 on [G=2, L=5, 3*6]
  const std::size_t G = 2, L = 5, H = 3, dh = 2, d = H * dh;
  auto qkv = testing::random_tensor(rng, {G, L, 3 * d}, -2.0, 2.0);
  auto att = multi_head_attention(qkv, H);
  REQUIRE(att.shape() == Shape{G, L, d});
  auto at = [&](std::size_t g, std::size_t l, std::size_t part, std::size_t h, std::size_t j) {
    return static_cast<double>(qkv.data()[(g * L + l) * 3 * d + part * d + h * dh + j]);
  };
  for (std::size_t g = 0; g < G; ++g) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < L; ++i) {
        std::vector<double> logits(L);
        double mx = -1e300;
        for (std::size_t k = 0; k < L; ++k) {
          double dot = 0;
          for (std::size_t j = 0; j < dh; ++j) dot += at(g, i, 0, h, j) * at(g, k, 1, h, j);
          logits[k] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, logits[k]);
        }
        double z = 0;
        for (auto& v : logits) z += (v = std::exp(v - mx));
        for (std::size_t j = 0; j < dh; ++j) {
          double o = 0;
          for (std::size_t k = 0; k < L; ++k) o += logits[k] / z * at(g, k, 2, h, j);
          CHECK(att.data()[(g * L + i) * d + h * dh + j] == doctest::Approx(o).epsilon(1e-5));
        }
      }
    }
  }
  CHECK_THROWS_AS(multi_head_attention(qkv, 4), ShapeError);
  CHECK_THROWS_AS(affine(x, w, testing::random_tensor(rng, {3})), ShapeError);
}

TEST_CASE("backward of sum of squares") {
  auto x = Tensor::from_data({2}, {1.f, 2.f}, true);
  backward(sum(mul(x, x)));
  REQUIRE(x.has_grad());
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("cross-entropy through softmax has gradient p - onehot") {
  auto logits = Tensor::from_data({4}, {0.3f, -1.2f, 2.0f, 0.1f}, true);
  auto onehot = Tensor::from_data({4}, {0.f, 0.f, 1.f, 0.f});
  auto p = softmax(logits, 0);
  backward(neg(sum(mul(onehot, log(p)))));
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(logits.grad()[i] == doctest::Approx(p.data()[i] - onehot.data()[i]).epsilon(1e-5));
  }
}

TEST_CASE("every kernel matches central differences over 10 seeds") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    for (const auto& check : testing::run_kernel_suite(seed)) {
      INFO("kernel " << check.kernel << " seed " << seed);
      CHECK(check.max_rel_error < 1e-3);
    }
  }
}

TEST_CASE("composite four-layer graph matches central differences") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    INFO("seed " << seed);
    CHECK(testing::run_composite_check(seed) < 1e-3);
  }
}

TEST_CASE("grad_check of a constant graph reports exactly zero") {
  auto build = [](auto& l) {
    using T = typename std::decay_t<decltype(l[0])>::value_type;
    return BasicTensor<T>::scalar(T(3));
  };
  Rng rng(1);
  auto report = grad_check(build, {{"x", testing::random_tensor(rng, {4})}});
  CHECK(report.max_rel_error() == 0.0);
}

TEST_CASE("softmax rows sum to one and l2 rows have unit norm") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    auto x = testing::random_tensor(rng, {7, 13}, -10.0, 10.0);
    auto s = softmax(x, 1);
    auto n = l2_normalize(x, 1);
    for (std::size_t r = 0; r < 7; ++r) {
      double total = 0, sq = 0;
      for (std::size_t c = 0; c < 13; ++c) {
        CHECK(s.data()[r * 13 + c] >= 0.0f);
        total += s.data()[r * 13 + c];
        sq += double(n.data()[r * 13 + c]) * n.data()[r * 13 + c];
      }
      CHECK(std::abs(total - 1.0) < 1e-6);
      CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("identical inputs give bit-identical outputs") {
  auto run = [] {
    Rng rng(42);
    auto x = testing::random_tensor(rng, {8, 16});
    auto w = testing::random_tensor(rng, {16, 16});
    auto g = Tensor::full({16}, 1.f);
    auto b = Tensor::zeros({16});
    return softmax(layer_norm(gelu(matmul(x, w)), g, b), 1).to_vector();
  };
  const auto a = run();
  const auto b = run();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

TEST_CASE("shape errors name the op and both shapes") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({4, 5});
  try {
    (void)matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,5]") != std::string::npos);
  }
  CHECK_THROWS_AS((void)add(a, Tensor::zeros({2})), ShapeError);
}

TEST_CASE("non-finite outputs raise NumericError") {
  CHECK_THROWS_AS((void)log(Tensor::from_data({2}, {1.f, -1.f})), NumericError);
  CHECK_THROWS_AS((void)log(Tensor::from_data({1}, {0.f})), NumericError);
}

TEST_CASE("backward on a non-scalar is a usage error") {
  auto x = Tensor::from_data({2}, {1.f, 2.f}, true);
  CHECK_THROWS_AS(backward(scale(x, 2.f)), UsageError);
}

TEST_CASE("stop_gradient blocks gradient flow") {
  auto a = Tensor::from_data({2}, {1.f, 2.f}, true);
  auto b = Tensor::from_data({2}, {3.f, 4.f}, true);
  auto blocked = stop_gradient(mul(b, b));
  backward(sum(mul(a, blocked)));
  CHECK(a.has_grad());
  CHECK_FALSE(b.has_grad());
  CHECK(a.grad()[0] == doctest::Approx(9.0));
}

TEST_CASE("no-grad mode records nothing") {
  auto a = Tensor::from_data({2}, {1.f, 2.f}, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = mul(a, a);
  }
  CHECK_FALSE(y.requires_grad());
  CHECK(GradMode::enabled());
}

TEST_CASE("tape visits each node once in reverse creation order") {
  auto x = Tensor::from_data({3}, {1.f, 2.f, 3.f}, true);
  auto h = mul(x, x);
  auto loss = sum(add(h, h));  // diamond: h is consumed twice
  auto tape = Tape<float>::collect(loss);
  std::set<const void*> seen;
  for (std::size_t i = 0; i < tape.size(); ++i) {
    CHECK(seen.insert(tape.nodes()[i].get()).second);
    if (i > 0) CHECK(tape.nodes()[i - 1]->seq > tape.nodes()[i]->seq);
  }
  CHECK(tape.size() == 4);
  backward(loss);
  CHECK(x.grad()[2] == doctest::Approx(12.0));
}

TEST_CASE("adamw with zero gradient and no decay leaves parameters unchanged") {
  std::vector<Tensor> params{Tensor::from_data({3}, {0.5f, -1.f, 2.f}, true)};
  const auto before = params[0].to_vector();
  AdamWState state;
  adamw_step(params, state, 1e-3, 0.0);
  CHECK(params[0].to_vector() == before);
  CHECK(state.step() == 1);
}

TEST_CASE("adamw decoupled decay scales by 1 - lr*wd") {
  std::vector<Tensor> params{Tensor::from_data({2}, {0.5f, -2.f}, true)};
  AdamWState state;
  const double lr = 0.01, wd = 0.4;
  adamw_step(params, state, lr, wd);
  CHECK(params[0].data()[0] == static_cast<float>(0.5 * (1 - lr * wd)));
  CHECK(params[0].data()[1] == static_cast<float>(-2.0 * (1 - lr * wd)));
}

TEST_CASE("adamw first step on x^2 moves x by about lr") {
  // Hand-rolled single step: g = 2, m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
  std::vector<Tensor> params{Tensor::from_data({1}, {1.f}, true)};
  backward(sum(mul(params[0], params[0])));
  AdamWState state;
  const double lr = 1e-3;
  adamw_step(params, state, lr, 0.0);
  const double expected = 1.0 - lr * 2.0 / (2.0 + 1e-8);
  CHECK(params[0].data()[0] == doctest::Approx(expected).epsilon(1e-7));
}

TEST_CASE("adamw rejects mismatched state") {
  std::vector<Tensor> params{Tensor::zeros({2}, true)};
  AdamWState state;
  adamw_step(params, state, 1e-3, 0.0);
  std::vector<Tensor> other{Tensor::zeros({3}, true)};
  CHECK_THROWS_AS(adamw_step(other, state, 1e-3, 0.0), ShapeError);
  CHECK(state.step() == 1);
}

TEST_CASE("NDT1 header layout and round trip") {
  Rng rng(9);
  auto t = testing::random_tensor(rng, {5, 4, 3});
  std::stringstream ss;
  write_ndt(ss, t);
  const std::string bytes = ss.str();
  REQUIRE(bytes.size() == 4 + 4 + 3 * 4 + 60 * 4);
  CHECK(bytes.substr(0, 4) == "NDT1");
  CHECK(bytes[4] == 3);
  CHECK(bytes[8] == 5);
  auto back = read_ndt(ss);
  CHECK(back.shape() == t.shape());
  CHECK(std::memcmp(back.data().data(), t.data().data(), 60 * sizeof(float)) == 0);

  std::stringstream bad("NDT2....");
  CHECK_THROWS_AS(read_ndt(bad), IoError);
}
