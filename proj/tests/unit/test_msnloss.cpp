// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "../support/full_graph.hpp"
#include "../support/kernel_suite.hpp"
#include "cwamsn/error.hpp"
#include "cwamsn/msnloss.hpp"
#include "cwamsn/ops.hpp"

using namespace cwamsn;
using namespace cwamsn::msn;

namespace {

nd::Tensor64 random_rows(Rng& rng, nd::Shape shape) {
  std::vector<double> v(nd::numel_of(shape));
  for (auto& x : v) x = rng.normal();
  return nd::Tensor64::from_data(std::move(shape), std::move(v));
}

/// Softmax rows over the last axis of random logits.
nd::Tensor64 random_simplex(Rng& rng, nd::Shape shape, double spread) {
  auto logits = random_rows(rng, shape);
  return nd::softmax(nd::scale(logits, spread), -1);
}

double entropy_of(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0) h -= v * std::log(v);
  }
  return h;
}

}  // namespace

TEST_CASE("assignments concentrate on the aligned prototype at low temperature") {
  std::vector<double> protos(4 * 4, 0.0);
  for (int k = 0; k < 4; ++k) protos[k * 4 + k] = 1.0;
  auto o = nd::Tensor64::from_data({4, 4}, protos);
  auto z = nd::Tensor64::from_data({1, 4}, {0.0, 0.0, 3.0, 0.0});
  auto s = assignment_scores(o, z, 0.01);
  CHECK(s.data()[2] > 0.999);
}

TEST_CASE("identical prototypes give uniform assignments") {
  std::vector<double> protos;
  for (int k = 0; k < 6; ++k) protos.insert(protos.end(), {0.3, -1.0, 2.0});
  auto o = nd::Tensor64::from_data({6, 3}, protos);
  Rng rng(1);
  auto s = assignment_scores(o, random_rows(rng, {5, 3}), 0.1);
  for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
}

TEST_CASE("default bank has 1024 prototypes and gives rows of that length") {
  auto bank = PrototypeBank::init(1024, 256, 0);
  CHECK(bank.count() == 1024);
  CHECK(bank.tau_anchor == 0.1);
  CHECK(bank.tau_target == 0.025);
  Rng rng(2);
  std::vector<float> z(3 * 256);
  for (auto& x : z) x = static_cast<float>(rng.normal());
  auto s = assignment_scores(bank.prototypes, nd::Tensor::from_data({3, 256}, z), bank.tau_anchor);
  CHECK(s.shape() == nd::Shape{3, 1024});
}

TEST_CASE("assignment rows are distributions and ignore the scale of z") {
  Rng rng(3);
  auto o = random_rows(rng, {16, 8});
  auto z = random_rows(rng, {4, 3, 8});
  auto s = assignment_scores(o, z, 0.1);
  REQUIRE(s.shape() == nd::Shape{4, 3, 16});
  for (std::size_t r = 0; r < 12; ++r) {
    double total = 0.0;
    for (std::size_t k = 0; k < 16; ++k) {
      const double v = s.data()[r * 16 + k];
      CHECK(v >= 0.0);
      total += v;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  }
  std::vector<double> scaled(z.data().begin(), z.data().end());
  for (std::size_t r = 0; r < 12; ++r) {
    const double c = 0.01 + 7.0 * static_cast<double>(r);
    for (std::size_t j = 0; j < 8; ++j) scaled[r * 8 + j] *= c;
  }
  auto s2 = assignment_scores(o, nd::Tensor64::from_data({4, 3, 8}, scaled), 0.1);
  for (std::size_t i = 0; i < s.numel(); ++i) CHECK(std::abs(s.data()[i] - s2.data()[i]) < 1e-6);
}

TEST_CASE("assignment_scores rejects zero rows and mismatched widths") {
  Rng rng(4);
  auto o = random_rows(rng, {4, 3});
  auto z = nd::Tensor64::from_data({2, 3}, {1.0, 2.0, 3.0, 0.0, 0.0, 0.0});
  CHECK_THROWS_AS(assignment_scores(o, z, 0.1), NumericError);
  CHECK_THROWS_AS(assignment_scores(o, random_rows(rng, {2, 5}), 0.1), ShapeError);
  auto bad = nd::Tensor64::from_data({2, 3}, {0.0, 0.0, 0.0, 1.0, 1.0, 1.0});
  CHECK_THROWS_AS(assignment_scores(bad, random_rows(rng, {2, 3}), 0.1), NumericError);
}

TEST_CASE("identical one-hot rows give zero loss without the entropy term") {
  std::vector<double> onehot{0, 1, 0, 0, 0, 0, 0, 1};
  auto target = nd::Tensor64::from_data({2, 4}, onehot);
  std::vector<double> anchors;
  for (int v = 0; v < 3; ++v) anchors.insert(anchors.end(), onehot.begin(), onehot.begin() + 4);
  for (int v = 0; v < 3; ++v) anchors.insert(anchors.end(), onehot.begin() + 4, onehot.end());
  auto anchor = nd::Tensor64::from_data({2, 3, 4}, anchors);
  auto terms = msn_loss(target, anchor, LossConfig{1.0, 0.0});
  CHECK(terms.loss.item() == 0.0);
  CHECK(terms.cross_entropy == 0.0);
}

TEST_CASE("uniform anchors with only the entropy term give -log T") {
  const std::size_t T = 16;
  auto uniform = nd::Tensor64::full({3, 2, T}, 1.0 / T);
  Rng rng(5);
  auto target = random_simplex(rng, {3, T}, 2.0);
  auto terms = msn_loss(target, uniform, LossConfig{0.0, 1.0});
  CHECK(terms.loss.item() == doctest::Approx(-std::log(static_cast<double>(T))).epsilon(1e-12));
  CHECK(terms.entropy == doctest::Approx(std::log(static_cast<double>(T))).epsilon(1e-12));
}

TEST_CASE("loss matches a scalar-loop oracle") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const std::size_t B = 3, V = 4, T = 7;
    auto target = random_simplex(rng, {B, 1, T}, 3.0);
    auto anchor = random_simplex(rng, {B, V, T}, 1.5);
    const LossConfig cfg{0.7, 1.3};
    auto terms = msn_loss(target, anchor, cfg);

    const auto sp = target.data();
    const auto s = anchor.data();
    double ce = 0.0;
    std::vector<double> mean(T, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t v = 0; v < V; ++v) {
        for (std::size_t m = 0; m < T; ++m) {
          const double q = s[(b * V + v) * T + m];
          ce -= sp[b * T + m] * std::log(q);
          mean[m] += q / static_cast<double>(B * V);
        }
      }
    }
    ce /= static_cast<double>(B * V);
    const double h = entropy_of(mean);
    CHECK(std::abs(terms.loss.item() - (0.7 * ce - 1.3 * h)) < 1e-6);
    CHECK(std::abs(terms.cross_entropy - ce) < 1e-6);
    CHECK(std::abs(terms.entropy - h) < 1e-6);
  }
}

TEST_CASE("msn_loss rejects rows that do not pair up") {
  Rng rng(6);
  auto anchor = random_simplex(rng, {3, 2, 5}, 1.0);
  CHECK_THROWS_AS(msn_loss(random_simplex(rng, {2, 5}, 1.0), anchor, LossConfig{}), ShapeError);
  CHECK_THROWS_AS(msn_loss(random_simplex(rng, {3, 4}, 1.0), anchor, LossConfig{}), ShapeError);
  CHECK_NOTHROW(msn_loss(random_simplex(rng, {3, 5}, 1.0), anchor, LossConfig{}));
}

TEST_CASE("gradients stop at the target branch") {
  const auto cfg = vit::EncoderConfig::tiny();
  auto anchor_w = vit::init_encoder(cfg, 1);
  auto target_w = anchor_w.clone();
  anchor_w.for_each_parameter([](const std::string&, nd::Tensor& t) { t.set_requires_grad(true); });
  target_w.for_each_parameter([](const std::string&, nd::Tensor& t) { t.set_requires_grad(true); });
  auto bank = PrototypeBank::init(8, cfg.projection_dim, 1);
  bank.prototypes.set_requires_grad(true);

  Rng rng(7);
  std::vector<float> tok(2 * 16 * cfg.token_dim());
  for (auto& x : tok) x = static_cast<float>(rng.uniform());
  auto tokens = nd::Tensor::from_data({2, 16, cfg.token_dim()}, tok);
  std::vector<std::size_t> keep;
  for (int g = 0; g < 2; ++g) {
    for (std::size_t i = 0; i < 16; ++i) keep.push_back(i);
  }
  auto zt = vit::project(vit::encode(tokens, keep, target_w, cfg), target_w);
  auto za = vit::project(vit::encode(tokens, keep, anchor_w, cfg), anchor_w);
  auto s_plus = assignment_scores(bank.prototypes, zt, bank.tau_target);
  auto s = assignment_scores(bank.prototypes, nd::reshape(za, {2, 1, cfg.projection_dim}), bank.tau_anchor);
  nd::backward(msn_loss(s_plus, s, LossConfig{}).loss);

  target_w.for_each_parameter([](const std::string& name, const nd::Tensor& t) {
    INFO(name);
    CHECK_FALSE(t.has_grad());
  });
  std::size_t with_grad = 0;
  anchor_w.for_each_parameter([&](const std::string&, const nd::Tensor& t) { with_grad += t.has_grad(); });
  CHECK(with_grad > 0);
  CHECK(bank.prototypes.has_grad());
}

TEST_CASE("a small step on the entropy term alone does not lower the mean entropy") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    auto protos = random_rows(rng, {12, 6});
    auto z = random_rows(rng, {4, 3, 6}).set_requires_grad(true);
    auto target = random_simplex(rng, {4, 12}, 2.0);
    auto terms = msn_loss(target, assignment_scores(protos, z, 0.1), LossConfig{0.0, 1.0});
    nd::backward(terms.loss);
    std::vector<double> stepped(z.data().begin(), z.data().end());
    for (std::size_t i = 0; i < stepped.size(); ++i) stepped[i] -= 1e-3 * z.grad()[i];
    nd::NoGradGuard no_grad;
    auto after = msn_loss(target, assignment_scores(protos, nd::Tensor64::from_data({4, 3, 6}, stepped), 0.1),
                          LossConfig{0.0, 1.0});
    CHECK(after.entropy >= terms.entropy);
  }
}

TEST_CASE("full anchor graph matches central differences on the tiny preset") {
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    const auto check = testing::run_full_graph_check(seed, 12);
    INFO("seed " << seed << " worst leaf " << check.worst_leaf);
    CHECK(check.max_rel_error < 2e-3);
  }
}

TEST_CASE("ema_update endpoints and closed form") {
  const auto cfg = vit::EncoderConfig::tiny();
  const auto anchor = vit::init_encoder(cfg, 1);
  const auto original = vit::init_encoder(cfg, 2);

  auto fixed = original.clone();
  ema_update(fixed, anchor, 1.0);
  auto copied = original.clone();
  ema_update(copied, anchor, 0.0);
  auto mixed = original.clone();
  ema_update(mixed, anchor, 0.996);

  const auto o = original.named_parameters(), a = anchor.named_parameters(), f = fixed.named_parameters(),
             c = copied.named_parameters(), m = mixed.named_parameters();
  for (std::size_t i = 0; i < o.size(); ++i) {
    CHECK(f[i].second.to_vector() == o[i].second.to_vector());
    CHECK(c[i].second.to_vector() == a[i].second.to_vector());
    for (std::size_t k = 0; k < o[i].second.numel(); ++k) {
      const double expect = 0.996 * o[i].second.data()[k] + 0.004 * a[i].second.data()[k];
      CHECK(std::abs(m[i].second.data()[k] - expect) < 1e-7);
    }
  }
}

TEST_CASE("ema_update rejects mismatched trees and out-of-range momentum") {
  auto small = vit::EncoderConfig::tiny();
  auto wide = small;
  wide.embed_dim = 64;
  auto target = vit::init_encoder(small, 0);
  CHECK_THROWS_AS(ema_update(target, vit::init_encoder(wide, 0), 0.5), ShapeError);
  auto deep = small;
  deep.depth = 3;
  CHECK_THROWS_AS(ema_update(target, vit::init_encoder(deep, 0), 0.5), ShapeError);
  CHECK_THROWS_AS(ema_update(target, vit::init_encoder(small, 0), 1.5), ConfigError);
}

TEST_CASE("loss, bank and schedule configs validate their invariants") {
  CHECK_NOTHROW(LossConfig{}.validate());
  CHECK_NOTHROW(LossConfig{0.0, 0.0}.validate());
  CHECK_THROWS_AS((LossConfig{1.0, -0.1}.validate()), ConfigError);
  CHECK_THROWS_AS((LossConfig{-1.0, 1.0}.validate()), ConfigError);
  CHECK_THROWS_AS(PrototypeBank::init(1, 4, 0), ConfigError);
  auto bank = PrototypeBank::init(4, 4, 0);
  bank.tau_target = 0.2;
  CHECK_THROWS_AS(bank.validate(), ConfigError);
  CHECK_NOTHROW(EmaSchedule{}.validate());
  CHECK_THROWS_AS((EmaSchedule{0.9, 0.8}.validate()), ConfigError);
  CHECK_THROWS_AS((EmaSchedule{0.9, 1.1}.validate()), ConfigError);
}
