// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference check of the whole anchor branch on the tiny preset:
// masked tokens -> encode -> project -> prototype assignments -> loss, with
// the target branch computed from a fixed copy of the weights.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cwamsn/gradcheck.hpp"
#include "cwamsn/msnloss.hpp"
#include "cwamsn/ops.hpp"
#include "cwamsn/rng.hpp"
#include "cwamsn/vitencoder.hpp"
#include "cwamsn/wellsampler.hpp"

namespace cwamsn::testing {

struct FullGraphCheck {
  double max_rel_error = 0.0;
  std::string worst_leaf;
};

inline FullGraphCheck run_full_graph_check(std::uint64_t seed, std::size_t elements_per_leaf = 24) {
  const auto cfg = vit::EncoderConfig::tiny();
  constexpr std::size_t perturbations = 2, views = 2, n_protos = 8;
  // Larger than the init scale so attention and the MLP are far from identity.
  auto weights = vit::init_encoder(cfg, seed);
  weights.for_each_parameter([](const std::string&, nd::Tensor& t) {
    for (auto& x : t.data_mut()) x *= 5.0f;
  });
  auto bank = msn::PrototypeBank::init(n_protos, cfg.projection_dim, seed);
  const msn::LossConfig loss_cfg;

  Rng rng(seed, "full_graph");
  std::vector<std::size_t> keep;
  for (std::size_t v = 0; v < perturbations * views; ++v) {
    auto k = sampler::sample_keep_indices(cfg.n_patches(), 0.25, rng);
    keep.insert(keep.end(), k.begin(), k.end());
  }
  const std::size_t n_keep = keep.size() / (perturbations * views);
  std::vector<float> a(perturbations * views * n_keep * cfg.token_dim());
  std::vector<float> t(perturbations * cfg.n_patches() * cfg.token_dim());
  for (auto& x : a) x = static_cast<float>(rng.uniform());
  for (auto& x : t) x = static_cast<float>(rng.uniform());
  const auto anchor_tokens = nd::Tensor::from_data({perturbations * views, n_keep, cfg.token_dim()}, a);
  const auto target_tokens = nd::Tensor::from_data({perturbations, cfg.n_patches(), cfg.token_dim()}, t);
  std::vector<std::size_t> full;
  for (std::size_t p = 0; p < perturbations; ++p) {
    for (std::size_t i = 0; i < cfg.n_patches(); ++i) full.push_back(i);
  }

  auto leaves = weights.named_parameters();
  leaves.emplace_back("prototypes", bank.prototypes);
  auto build = [&](auto& params) {
    using T = typename std::decay_t<decltype(params)>::value_type::value_type;
    std::vector<nd::BasicTensor<T>> encoder_params(params.begin(), params.end() - 1);
    const auto& protos = params.back();
    auto w = vit::weights_from_list<T>(cfg, encoder_params);
    nd::BasicTensor<T> s_plus;
    {
      nd::NoGradGuard no_grad;
      const auto target_w = weights.template cast<T>();
      auto zt = vit::project(vit::encode(target_tokens.template cast<T>(), full, target_w, cfg), target_w);
      // fixed prototypes: differences must not see through the stop-gradient
      s_plus = msn::assignment_scores(bank.prototypes.template cast<T>(), zt, bank.tau_target);
    }
    auto z = vit::project(vit::encode(anchor_tokens.template cast<T>(), keep, w, cfg), w);
    auto s = msn::assignment_scores(protos, nd::reshape(z, {perturbations, views, cfg.projection_dim}),
                                    bank.tau_anchor);
    return msn::msn_loss(s_plus, s, loss_cfg).loss;
  };

  nd::GradCheckOptions opts;
  opts.step = 1e-5;
  opts.analytic_in_double = true;
  opts.max_elements_per_leaf = elements_per_leaf;
  opts.seed = seed;
  const auto report = nd::grad_check(build, leaves, opts);
  FullGraphCheck out;
  for (const auto& leaf : report.leaves) {
    if (leaf.max_rel_error >= out.max_rel_error) {
      out.max_rel_error = leaf.max_rel_error;
      out.worst_leaf = leaf.name;
    }
  }
  return out;
}

}  // namespace cwamsn::testing
