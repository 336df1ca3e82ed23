// SPDX-License-Identifier: Apache-2.0
//
// Prototype assignments, the alignment loss with mean-entropy maximization,
// and the EMA target update.
//
// The loss is
//
//   loss = lambda1 * mean_rows CE(s+, s) - lambda2 * H(mean_rows s)
//
// where each anchor row s is paired with the target row s+ of its
// perturbation. The regularizer is the entropy of the mean prediction; a plain
// average of softmax entries would be the constant 1/T.
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "cwamsn/tensor.hpp"
#include "cwamsn/vitencoder.hpp"

namespace cwamsn::msn {

struct PrototypeBank {
  nd::Tensor prototypes;  // T x D, normalized at use only
  double tau_anchor = 0.1;
  double tau_target = 0.025;

  /// Unit Gaussian entries from a dedicated stream of `seed`.
  static PrototypeBank init(std::size_t count, std::size_t dim, std::uint64_t seed);

  std::size_t count() const { return prototypes.size(0); }
  std::size_t dim() const { return prototypes.size(1); }
  /// T >= 2 and 0 < tau_target <= tau_anchor.
  void validate() const;
};

struct LossConfig {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  void validate() const;
};

struct EmaSchedule {
  double start = 0.996;
  double end = 1.0;
  void validate() const;
};

/// softmax_k(cos(z_row, O_k) / tau) for every row of z ([..., D] -> [..., T]).
/// Throws NumericError when a z row or prototype is exactly zero.
template <typename T>
nd::BasicTensor<T> assignment_scores(const nd::BasicTensor<T>& prototypes, const nd::BasicTensor<T>& z, double tau);

template <typename T>
struct LossTerms {
  nd::BasicTensor<T> loss;  // scalar on the tape
  double cross_entropy = 0.0;
  double entropy = 0.0;  // H of the mean anchor row
};

/// anchor: B x V x T (or rows x T), target: B x T or B x 1 x T. Target rows are
/// cut from the tape before use.
template <typename T>
LossTerms<T> msn_loss(const nd::BasicTensor<T>& target, const nd::BasicTensor<T>& anchor, const LossConfig& cfg);

/// target <- m * target + (1 - m) * anchor for every encoder parameter, with no
/// tape recording. Prototypes are not part of the target.
void ema_update(vit::EncoderWeights<float>& target, const vit::EncoderWeights<float>& anchor, double m);

}  // namespace cwamsn::msn
