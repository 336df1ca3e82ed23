// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference checks for every differentiable kernel. Shared by the
// ndtensor unit tests and the acceptance suite.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cwamsn/gradcheck.hpp"
#include "cwamsn/ops.hpp"
#include "cwamsn/rng.hpp"

namespace cwamsn::testing {

struct KernelCheck {
  std::string kernel;
  double max_rel_error = 0.0;
};

inline nd::Tensor random_tensor(Rng& rng, nd::Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<float> v(nd::numel_of(shape));
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return nd::Tensor::from_data(std::move(shape), std::move(v));
}

/// Fixed random weights used to turn a tensor-valued op into a scalar, so that
/// every output element influences the checked gradient.
template <typename T>
nd::BasicTensor<T> weighted_sum(const nd::BasicTensor<T>& x, std::uint64_t seed) {
  Rng rng(seed, "weighted_sum");
  std::vector<T> w(x.numel());
  for (auto& v : w) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  auto weights = nd::BasicTensor<T>::from_data(x.shape(), std::move(w));
  return nd::sum(nd::mul(x, weights));
}

inline std::vector<KernelCheck> run_kernel_suite(std::uint64_t seed) {
  using namespace nd;
  Rng rng(seed, "kernel_suite");
  GradCheckOptions opts;
  opts.seed = seed;
  std::vector<KernelCheck> out;
  auto run = [&](const std::string& name, auto&& build, std::vector<std::pair<std::string, Tensor>> leaves) {
    out.push_back({name, grad_check(build, leaves, opts).max_rel_error()});
  };
  const std::uint64_t ws = seed * 7919 + 1;

  run("matmul", [&](auto& l) { return weighted_sum(matmul(l[0], l[1]), ws); },
      {{"a", random_tensor(rng, {2, 3, 4})}, {"b", random_tensor(rng, {4, 5})}});
  run("matmul_batched", [&](auto& l) { return weighted_sum(matmul(l[0], l[1]), ws); },
      {{"a", random_tensor(rng, {3, 2, 4})}, {"b", random_tensor(rng, {3, 4, 3})}});
  run("affine", [&](auto& l) { return weighted_sum(affine(l[0], l[1], l[2]), ws); },
      {{"x", random_tensor(rng, {2, 3, 4})}, {"w", random_tensor(rng, {4, 5})}, {"b", random_tensor(rng, {5})}});
  run("multi_head_attention", [&](auto& l) { return weighted_sum(multi_head_attention(l[0], 2), ws); },
      {{"qkv", random_tensor(rng, {2, 4, 12}, -1.5, 1.5)}});
  run("add", [&](auto& l) { return weighted_sum(add(l[0], l[1]), ws); },
      {{"a", random_tensor(rng, {3, 4})}, {"b", random_tensor(rng, {4})}});
  run("sub", [&](auto& l) { return weighted_sum(sub(l[0], l[1]), ws); },
      {{"a", random_tensor(rng, {3, 4})}, {"b", random_tensor(rng, {3, 4})}});
  run("mul", [&](auto& l) { return weighted_sum(mul(l[0], l[1]), ws); },
      {{"a", random_tensor(rng, {2, 3, 4})}, {"b", random_tensor(rng, {3, 4})}});
  run("scalar_ops", [&](auto& l) {
        using T = typename std::decay_t<decltype(l[0])>::value_type;
        return weighted_sum(neg(add_scalar(scale(l[0], T(2.5)), T(0.75))), ws);
      },
      {{"a", random_tensor(rng, {5})}});
  run("transpose", [&](auto& l) { return weighted_sum(transpose(l[0], 0, 2), ws); },
      {{"a", random_tensor(rng, {2, 3, 4})}});
  run("permute", [&](auto& l) { return weighted_sum(permute(l[0], {2, 0, 3, 1}), ws); },
      {{"a", random_tensor(rng, {2, 3, 2, 4})}});
  run("reshape", [&](auto& l) { return weighted_sum(reshape(l[0], {4, 3}), ws); },
      {{"a", random_tensor(rng, {2, 6})}});
  run("concat", [&](auto& l) { return weighted_sum(concat<typename std::decay_t<decltype(l[0])>::value_type>({l[0], l[1]}, 1), ws); },
      {{"a", random_tensor(rng, {2, 3, 2})}, {"b", random_tensor(rng, {2, 1, 2})}});
  run("slice", [&](auto& l) { return weighted_sum(slice(l[0], 1, 1, 3), ws); },
      {{"a", random_tensor(rng, {2, 4, 3})}});
  run("gather_rows", [&](auto& l) {
        const std::vector<std::size_t> idx{2, 0, 2, 1};
        return weighted_sum(gather_rows(l[0], idx), ws);
      },
      {{"a", random_tensor(rng, {3, 4})}});
  run("softmax", [&](auto& l) { return weighted_sum(softmax(l[0], 1), ws); },
      {{"a", random_tensor(rng, {2, 5, 3}, -2.0, 2.0)}});
  run("log", [&](auto& l) { return weighted_sum(log(l[0]), ws); },
      {{"a", random_tensor(rng, {6}, 0.5, 2.0)}});
  run("xlogy", [&](auto& l) { return weighted_sum(xlogy(l[0], l[1]), ws); },
      {{"x", random_tensor(rng, {6})}, {"y", random_tensor(rng, {6}, 0.5, 2.0)}});
  run("exp", [&](auto& l) { return weighted_sum(exp(l[0]), ws); },
      {{"a", random_tensor(rng, {6})}});
  run("sum_axis", [&](auto& l) { return weighted_sum(sum(l[0], 1), ws); },
      {{"a", random_tensor(rng, {3, 4, 2})}});
  run("mean_axis", [&](auto& l) { return weighted_sum(mean(l[0], -1, true), ws); },
      {{"a", random_tensor(rng, {3, 4})}});
  run("mean_all", [&](auto& l) { return mean(mul(l[0], l[0])); },
      {{"a", random_tensor(rng, {3, 4})}});
  run("layer_norm", [&](auto& l) { return weighted_sum(layer_norm(l[0], l[1], l[2]), ws); },
      {{"x", random_tensor(rng, {4, 6}, -2.0, 2.0)},
       {"gamma", random_tensor(rng, {6}, 0.5, 1.5)},
       {"beta", random_tensor(rng, {6})}});
  run("gelu", [&](auto& l) { return weighted_sum(gelu(l[0]), ws); },
      {{"x", random_tensor(rng, {10}, -3.0, 3.0)}});
  run("l2_normalize", [&](auto& l) { return weighted_sum(l2_normalize(l[0], 1), ws); },
      {{"x", random_tensor(rng, {3, 4}, 0.2, 1.0)}});
  return out;
}

/// matmul -> bias -> gelu -> layer_norm -> matmul -> softmax -> log -> mean.
template <typename T>
nd::BasicTensor<T> composite_graph(std::vector<nd::BasicTensor<T>>& l) {
  using namespace nd;
  auto h = gelu(add(matmul(l[0], l[1]), l[2]));
  h = layer_norm(h, l[3], l[4]);
  auto p = softmax(matmul(h, l[5]), -1);
  return mean(log(p));
}

inline double run_composite_check(std::uint64_t seed) {
  Rng rng(seed, "composite");
  nd::GradCheckOptions opts;
  opts.seed = seed;
  auto build = [](auto& l) { return composite_graph(l); };
  return nd::grad_check(build,
                        {{"x", random_tensor(rng, {4, 5})},
                         {"w1", random_tensor(rng, {5, 6})},
                         {"b1", random_tensor(rng, {6})},
                         {"gamma", random_tensor(rng, {6}, 0.5, 1.5)},
                         {"beta", random_tensor(rng, {6})},
                         {"w2", random_tensor(rng, {6, 3})}},
                        opts)
      .max_rel_error();
}

}  // namespace cwamsn::testing
