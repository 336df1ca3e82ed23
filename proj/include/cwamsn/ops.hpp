// SPDX-License-Identifier: Apache-2.0
//
// Differentiable kernels. Every op validates shapes (ShapeError naming the op
// and the offending shapes), rejects non-finite outputs (NumericError) and
// records itself on the tape when grad mode is on and an input requires grad.
//
// Broadcasting is deliberately narrow: for add/sub/mul the right operand must
// either match the left shape or equal one of its suffixes (e.g. a [d] bias
// added to a [n, d] activation).
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cwamsn/tensor.hpp"

namespace cwamsn::nd {

/// [.., m, k] x [k, n] -> [.., m, n], or batched [g, m, k] x [g, k, n] -> [g, m, n].
template <typename T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
/// x W + b for x [.., k], W [k, n], b [n].
template <typename T>
BasicTensor<T> affine(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias);

template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T> BasicTensor<T> add_scalar(const BasicTensor<T>& a, T value);
template <typename T> BasicTensor<T> scale(const BasicTensor<T>& a, T factor);
template <typename T> BasicTensor<T> neg(const BasicTensor<T>& a);

template <typename T> BasicTensor<T> permute(const BasicTensor<T>& a, const std::vector<std::size_t>& axes);
template <typename T> BasicTensor<T> transpose(const BasicTensor<T>& a, int axis0, int axis1);
template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape);
template <typename T> BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis);
/// Copy of [begin, end) along `axis`.
template <typename T> BasicTensor<T> slice(const BasicTensor<T>& a, int axis, std::size_t begin, std::size_t end);
/// Rows of `a` (first axis) selected by `indices`; repeats are allowed.
template <typename T> BasicTensor<T> gather_rows(const BasicTensor<T>& a, std::span<const std::size_t> indices);

template <typename T> BasicTensor<T> softmax(const BasicTensor<T>& a, int axis);
template <typename T> BasicTensor<T> log(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> exp(const BasicTensor<T>& a);
/// x * log(y) with 0 wherever x == 0; the x-gradient is taken as 0 where y == 0.
template <typename T> BasicTensor<T> xlogy(const BasicTensor<T>& x, const BasicTensor<T>& y);

template <typename T> BasicTensor<T> sum(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> sum(const BasicTensor<T>& a, int axis, bool keepdim = false);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& a, int axis, bool keepdim = false);

/// Normalizes over the last axis, then applies gamma/beta of shape [last].
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps = T(1e-6));
/// Exact (erf) GELU.
template <typename T> BasicTensor<T> gelu(const BasicTensor<T>& x);
/// Scaled dot-product self-attention over packed projections.
/// qkv: [G, L, 3 * heads * dh], features ordered (q|k|v, head, dh).
/// Returns [G, L, heads * dh] with features ordered (head, dh).
template <typename T> BasicTensor<T> multi_head_attention(const BasicTensor<T>& qkv, std::size_t heads);
/// x / max(||x||, eps) along `axis`.
template <typename T> BasicTensor<T> l2_normalize(const BasicTensor<T>& x, int axis, T eps = T(1e-8));

/// Tape barrier: same values, no path back to `a`.
template <typename T> BasicTensor<T> stop_gradient(const BasicTensor<T>& a);

}  // namespace cwamsn::nd
