// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "cwamsn/rng.hpp"
#include "cwamsn/tensor.hpp"

namespace cwamsn::nd {

struct GradCheckOptions {
  double step = 1e-4;
  /// 0 checks every element; otherwise a seeded random subset per leaf.
  std::size_t max_elements_per_leaf = 0;
  std::uint64_t seed = 0;
  /// Elements whose gradient is tiny relative to the leaf's largest one are
  /// compared against floor_ratio * max|grad| instead of their own magnitude.
  double floor_ratio = 1e-3;
  double abs_floor = 1e-7;
  /// Run the autodiff pass in double too. Deep graphs with large weights lose
  /// more than the tolerance to float rounding alone.
  bool analytic_in_double = false;
};

struct LeafGradError {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::vector<LeafGradError> leaves;

  double max_rel_error() const {
    double worst = 0.0;
    for (const auto& l : leaves) worst = std::max(worst, l.max_rel_error);
    return worst;
  }
};

/// Compares autodiff gradients (float unless `analytic_in_double`) against
/// central differences evaluated in double precision.
///
/// `build` must be generic over the scalar type: it receives a
/// `std::vector<BasicTensor<T>>&` holding the leaves (in the order given) and
/// returns a scalar `BasicTensor<T>`. It is called once in float with grad
/// recording and twice per checked element in double under NoGradGuard.
template <class Builder>
GradCheckReport grad_check(Builder&& build, const std::vector<std::pair<std::string, Tensor>>& leaves,
                           const GradCheckOptions& opts = {}) {
  std::vector<Tensor> f32;
  std::vector<Tensor64> f64;
  for (const auto& [name, t] : leaves) {
    f32.push_back(t.detach().set_requires_grad(true));
    f64.push_back(t.template cast<double>());
  }
  std::vector<Tensor64> g64;
  if (opts.analytic_in_double) {
    for (const auto& t : f64) g64.push_back(t.detach().set_requires_grad(true));
    backward(build(g64));
  } else {
    backward(build(f32));
  }
  auto analytic_at = [&](std::size_t li, std::size_t e) -> double {
    if (opts.analytic_in_double) return g64[li].has_grad() ? g64[li].grad()[e] : 0.0;
    return f32[li].has_grad() ? static_cast<double>(f32[li].grad()[e]) : 0.0;
  };

  Rng rng(opts.seed, "grad_check");
  GradCheckReport report;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    const std::size_t n = f64[li].numel();
    std::vector<std::size_t> elements(n);
    std::iota(elements.begin(), elements.end(), std::size_t{0});
    if (opts.max_elements_per_leaf != 0 && n > opts.max_elements_per_leaf) {
      std::shuffle(elements.begin(), elements.end(), rng.engine());
      elements.resize(opts.max_elements_per_leaf);
      std::sort(elements.begin(), elements.end());
    }
    std::vector<double> analytic, numeric;
    for (std::size_t e : elements) {
      auto values = f64[li].data_mut();
      const double original = values[e];
      double plus = 0.0, minus = 0.0;
      {
        NoGradGuard guard;
        values[e] = original + opts.step;
        plus = build(f64).item();
        values[e] = original - opts.step;
        minus = build(f64).item();
      }
      values[e] = original;
      numeric.push_back((plus - minus) / (2.0 * opts.step));
      analytic.push_back(analytic_at(li, e));
    }
    double scale = 0.0;
    for (double v : numeric) scale = std::max(scale, std::abs(v));
    const double floor = opts.floor_ratio * scale + opts.abs_floor;
    LeafGradError err{leaves[li].first, 0.0, elements.size()};
    for (std::size_t k = 0; k < elements.size(); ++k) {
      const double diff = std::abs(analytic[k] - numeric[k]);
      if (diff == 0.0) continue;
      const double denom = std::max({std::abs(analytic[k]), std::abs(numeric[k]), floor});
      err.max_rel_error = std::max(err.max_rel_error, diff / denom);
    }
    report.leaves.push_back(std::move(err));
  }
  return report;
}

}  // namespace cwamsn::nd
