// SPDX-License-Identifier: Apache-2.0
#include "cwamsn/ops.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "cwamsn/error.hpp"

namespace cwamsn::nd {
namespace {

template <typename T>
using Node = detail::Node<T>;
template <typename T>
using BackwardFn = std::function<void(Node<T>&)>;
template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
ArrMap<T> arr(std::span<T> s) {
  return ArrMap<T>(s.data(), static_cast<Eigen::Index>(s.size()));
}
template <typename T>
ArrMap<T> arr(Buffer<T>& v) {
  return ArrMap<T>(v.data(), static_cast<Eigen::Index>(v.size()));
}
template <typename T>
ConstArrMap<T> carr(std::span<const T> s) {
  return ConstArrMap<T>(s.data(), static_cast<Eigen::Index>(s.size()));
}
template <typename T>
ConstArrMap<T> carr(const Buffer<T>& v) {
  return ConstArrMap<T>(v.data(), static_cast<Eigen::Index>(v.size()));
}

/// Row-major [rows, inner] view of a buffer for suffix broadcasting.
template <typename T>
MatMap<T> rows_of(std::span<T> s, std::size_t inner) {
  return MatMap<T>(s.data(), static_cast<Eigen::Index>(s.size() / inner), static_cast<Eigen::Index>(inner));
}
template <typename T>
ConstMatMap<T> crows_of(std::span<const T> s, std::size_t inner) {
  return ConstMatMap<T>(s.data(), static_cast<Eigen::Index>(s.size() / inner), static_cast<Eigen::Index>(inner));
}
template <typename T>
Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> crow(std::span<const T> s) {
  return Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(s.data(), static_cast<Eigen::Index>(s.size()));
}
template <typename T>
Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> row(std::span<T> s) {
  return Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(s.data(), static_cast<Eigen::Index>(s.size()));
}

std::size_t norm_axis(int axis, std::size_t rank, std::string_view op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

[[noreturn]] void shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

template <typename T>
void check_finite(std::string_view op, const Buffer<T>& values) {
  if (carr(values).isFinite().all()) return;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string(op) + ": non-finite output at flat index " + std::to_string(i));
    }
  }
}

template <typename T>
BasicTensor<T> make_result(std::string_view op, Shape shape, Buffer<T> data,
                           std::vector<std::shared_ptr<Node<T>>> inputs, BackwardFn<T> fn) {
  check_finite(op, data);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  node->seq = detail::next_seq();
  const bool track = GradMode::enabled() &&
                     std::any_of(inputs.begin(), inputs.end(), [](const auto& n) { return n->requires_grad; });
  if (track) {
    node->requires_grad = true;
    node->parents = std::move(inputs);
    node->backward = std::move(fn);
  }
  return BasicTensor<T>(std::move(node));
}

/// Gradient buffer of parent `i`, or an empty span when it does not need one.
template <typename T>
std::span<T> parent_grad(Node<T>& out, std::size_t i) {
  auto& p = *out.parents[i];
  if (!p.requires_grad) return {};
  return p.grad_buffer();
}

template <typename T>
const Buffer<T>& parent_data(const Node<T>& out, std::size_t i) {
  return out.parents[i]->data;
}

/// (outer, length, inner) decomposition around `axis`.
struct AxisSplit {
  std::size_t outer = 1, length = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

/// Calls f(out_index, in_index) for every element of permute(in_shape, axes).
template <typename F>
void for_each_permuted(const Shape& in_shape, const std::vector<std::size_t>& axes, F&& f) {
  const std::size_t rank = in_shape.size();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(rank);
  std::vector<std::size_t> stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[axes[i]];
    stride[i] = in_strides[axes[i]];
  }
  const std::size_t total = numel_of(in_shape);
  if (total == 0) return;
  if (rank == 0) {
    f(0, 0);
    return;
  }
  std::vector<std::size_t> idx(rank, 0);
  const std::size_t last = rank - 1;
  const std::size_t run = out_shape[last];
  const std::size_t step = stride[last];
  std::size_t base = 0;
  for (std::size_t out = 0; out < total; out += run) {
    for (std::size_t j = 0; j < run; ++j) f(out + j, base + j * step);
    // advance the odometer over all but the last axis
    for (std::size_t d = last; d-- > 0;) {
      base += stride[d];
      if (++idx[d] < out_shape[d]) break;
      base -= stride[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

}  // namespace

// ---------------------------------------------------------------- affine

template <typename T>
BasicTensor<T> affine(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  const Shape& sx = x.shape();
  const Shape& sw = weight.shape();
  if (sx.empty() || sw.size() != 2 || sw[0] != sx.back()) shape_mismatch("affine", sx, sw);
  if (bias.shape() != Shape{sw[1]}) shape_mismatch("affine", sw, bias.shape());
  const auto K = static_cast<Eigen::Index>(sw[0]), N = static_cast<Eigen::Index>(sw[1]);
  const auto M = static_cast<Eigen::Index>(x.numel() / std::max<std::size_t>(sw[0], 1));
  Shape out_shape = sx;
  out_shape.back() = sw[1];
  Buffer<T> out(static_cast<std::size_t>(M * N));
  MatMap<T> o(out.data(), M, N);
  o.noalias() = ConstMatMap<T>(x.data().data(), M, K) * ConstMatMap<T>(weight.data().data(), K, N);
  o.rowwise() += crow(bias.data());
  return make_result<T>("affine", std::move(out_shape), std::move(out),
                        {x.node_ptr(), weight.node_ptr(), bias.node_ptr()}, [M, K, N](Node<T>& r) {
                          ConstMatMap<T> g(r.grad.data(), M, N);
                          if (auto gx = parent_grad(r, 0); !gx.empty()) {
                            MatMap<T>(gx.data(), M, K).noalias() +=
                                g * ConstMatMap<T>(parent_data(r, 1).data(), K, N).transpose();
                          }
                          if (auto gw = parent_grad(r, 1); !gw.empty()) {
                            MatMap<T>(gw.data(), K, N).noalias() +=
                                ConstMatMap<T>(parent_data(r, 0).data(), M, K).transpose() * g;
                          }
                          if (auto gb = parent_grad(r, 2); !gb.empty()) row(gb) += g.colwise().sum();
                        });
}

// ---------------------------------------------------------------- matmul

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() >= 1 && sb.size() == 2) {
    const std::size_t k = sa.back();
    if (sb[0] != k) shape_mismatch("matmul", sa, sb);
    const std::size_t m = a.numel() / std::max<std::size_t>(k, 1);
    const std::size_t n = sb[1];
    Shape out_shape = sa;
    out_shape.back() = n;
    Buffer<T> out(m * n);
    const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
               N = static_cast<Eigen::Index>(n);
    MatMap<T>(out.data(), M, N).noalias() =
        ConstMatMap<T>(a.data().data(), M, K) * ConstMatMap<T>(b.data().data(), K, N);
    return make_result<T>("matmul", std::move(out_shape), std::move(out), {a.node_ptr(), b.node_ptr()},
                          [M, K, N](Node<T>& o) {
                            ConstMatMap<T> g(o.grad.data(), M, N);
                            if (auto ga = parent_grad(o, 0); !ga.empty()) {
                              MatMap<T>(ga.data(), M, K).noalias() +=
                                  g * ConstMatMap<T>(parent_data(o, 1).data(), K, N).transpose();
                            }
                            if (auto gb = parent_grad(o, 1); !gb.empty()) {
                              MatMap<T>(gb.data(), K, N).noalias() +=
                                  ConstMatMap<T>(parent_data(o, 0).data(), M, K).transpose() * g;
                            }
                          });
  }
  if (sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] && sa[2] == sb[1]) {
    const std::size_t groups = sa[0];
    const auto M = static_cast<Eigen::Index>(sa[1]), K = static_cast<Eigen::Index>(sa[2]),
               N = static_cast<Eigen::Index>(sb[2]);
    Buffer<T> out(groups * static_cast<std::size_t>(M * N));
    for (std::size_t g = 0; g < groups; ++g) {
      MatMap<T>(out.data() + g * M * N, M, N).noalias() =
          ConstMatMap<T>(a.data().data() + g * M * K, M, K) * ConstMatMap<T>(b.data().data() + g * K * N, K, N);
    }
    return make_result<T>(
        "matmul", Shape{groups, sa[1], sb[2]}, std::move(out), {a.node_ptr(), b.node_ptr()},
        [groups, M, K, N](Node<T>& o) {
          auto ga = parent_grad(o, 0);
          auto gb = parent_grad(o, 1);
          const auto& ad = parent_data(o, 0);
          const auto& bd = parent_data(o, 1);
          for (std::size_t g = 0; g < groups; ++g) {
            ConstMatMap<T> grad(o.grad.data() + g * M * N, M, N);
            if (!ga.empty()) {
              MatMap<T>(ga.data() + g * M * K, M, K).noalias() +=
                  grad * ConstMatMap<T>(bd.data() + g * K * N, K, N).transpose();
            }
            if (!gb.empty()) {
              MatMap<T>(gb.data() + g * K * N, K, N).noalias() +=
                  ConstMatMap<T>(ad.data() + g * M * K, M, K).transpose() * grad;
            }
          }
        });
  }
  shape_mismatch("matmul", sa, sb);
}

// ---------------------------------------------------------------- elementwise

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (!is_suffix(b.shape(), a.shape())) shape_mismatch("add", a.shape(), b.shape());
  const std::size_t inner = std::max<std::size_t>(b.numel(), 1);
  Buffer<T> out(a.data().begin(), a.data().end());
  if (b.numel() != 0) rows_of<T>(out, inner).rowwise() += crow(b.data());
  return make_result<T>("add", a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()}, [inner](Node<T>& o) {
    if (auto ga = parent_grad(o, 0); !ga.empty()) arr(ga) += carr(o.grad);
    if (auto gb = parent_grad(o, 1); !gb.empty()) {
      row(gb) += crows_of<T>(o.grad, inner).colwise().sum();
    }
  });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (!is_suffix(b.shape(), a.shape())) shape_mismatch("sub", a.shape(), b.shape());
  const std::size_t inner = std::max<std::size_t>(b.numel(), 1);
  Buffer<T> out(a.data().begin(), a.data().end());
  if (b.numel() != 0) rows_of<T>(out, inner).rowwise() -= crow(b.data());
  return make_result<T>("sub", a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()}, [inner](Node<T>& o) {
    if (auto ga = parent_grad(o, 0); !ga.empty()) arr(ga) += carr(o.grad);
    if (auto gb = parent_grad(o, 1); !gb.empty()) {
      row(gb) -= crows_of<T>(o.grad, inner).colwise().sum();
    }
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (!is_suffix(b.shape(), a.shape())) shape_mismatch("mul", a.shape(), b.shape());
  const std::size_t inner = std::max<std::size_t>(b.numel(), 1);
  Buffer<T> out(a.data().begin(), a.data().end());
  if (b.numel() != 0) {
    auto m = rows_of<T>(out, inner);
    const auto bv = crow(b.data()).array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) m.row(r).array() *= bv;
  }
  return make_result<T>("mul", a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()}, [inner](Node<T>& o) {
    const auto& ad = parent_data(o, 0);
    const auto& bd = parent_data(o, 1);
    const auto g = crows_of<T>(o.grad, inner);
    if (auto ga = parent_grad(o, 0); !ga.empty()) {
      auto m = rows_of(ga, inner);
      const auto bv = crow(std::span<const T>(bd)).array();
      for (Eigen::Index r = 0; r < m.rows(); ++r) m.row(r).array() += g.row(r).array() * bv;
    }
    if (auto gb = parent_grad(o, 1); !gb.empty()) {
      row(gb) += (g.array() * crows_of(std::span<const T>(ad), inner).array()).colwise().sum().matrix();
    }
  });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T value) {
  Buffer<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += value;
  return make_result<T>("add_scalar", a.shape(), std::move(out), {a.node_ptr()}, [](Node<T>& o) {
    auto ga = parent_grad(o, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  Buffer<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return make_result<T>("scale", a.shape(), std::move(out), {a.node_ptr()}, [factor](Node<T>& o) {
    auto ga = parent_grad(o, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * factor;
  });
}

template <typename T>
BasicTensor<T> neg(const BasicTensor<T>& a) {
  return scale(a, T{-1});
}

template <typename T>
BasicTensor<T> log(const BasicTensor<T>& a) {
  Buffer<T> out(a.numel());
  arr(out) = carr(a.data()).log();
  return make_result<T>("log", a.shape(), std::move(out), {a.node_ptr()}, [](Node<T>& o) {
    auto ga = parent_grad(o, 0);
    arr(ga) += carr(o.grad) / carr(parent_data(o, 0));
  });
}

template <typename T>
BasicTensor<T> xlogy(const BasicTensor<T>& x, const BasicTensor<T>& y) {
  if (x.shape() != y.shape()) shape_mismatch("xlogy", x.shape(), y.shape());
  const auto xv = x.data();
  const auto yv = y.data();
  Buffer<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] == T(0) ? T(0) : xv[i] * std::log(yv[i]);
  return make_result<T>("xlogy", x.shape(), std::move(out), {x.node_ptr(), y.node_ptr()}, [](Node<T>& o) {
    const auto& xd = parent_data(o, 0);
    const auto& yd = parent_data(o, 1);
    if (auto gx = parent_grad(o, 0); !gx.empty()) {
      for (std::size_t i = 0; i < gx.size(); ++i) {
        if (yd[i] > T(0)) gx[i] += o.grad[i] * std::log(yd[i]);
      }
    }
    if (auto gy = parent_grad(o, 1); !gy.empty()) {
      for (std::size_t i = 0; i < gy.size(); ++i) {
        if (xd[i] != T(0)) gy[i] += o.grad[i] * xd[i] / yd[i];
      }
    }
  });
}

template <typename T>
BasicTensor<T> exp(const BasicTensor<T>& a) {
  Buffer<T> out(a.numel());
  arr(out) = carr(a.data()).exp();
  return make_result<T>("exp", a.shape(), std::move(out), {a.node_ptr()}, [](Node<T>& o) {
    auto ga = parent_grad(o, 0);
    arr(ga) += carr(o.grad) * carr(o.data);
  });
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  Buffer<T> out(x.numel());
  const auto xv = carr(x.data());
  arr(out) = T(0.5) * xv * (T(1) + (xv * inv_sqrt2).erf());
  return make_result<T>("gelu", x.shape(), std::move(out), {x.node_ptr()}, [](Node<T>& o) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
    const auto xv = carr(parent_data(o, 0));
    auto gx = parent_grad(o, 0);
    const auto cdf = T(0.5) * (T(1) + (xv * inv_sqrt2).erf());
    const auto pdf = inv_sqrt_2pi * (T(-0.5) * xv.square()).exp();
    arr(gx) += carr(o.grad) * (cdf + xv * pdf);
  });
}

// ---------------------------------------------------------------- layout

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& a, const std::vector<std::size_t>& axes) {
  const Shape& in_shape = a.shape();
  if (axes.size() != in_shape.size()) {
    throw ShapeError("permute: " + std::to_string(axes.size()) + " axes for shape " + to_string(in_shape));
  }
  std::vector<bool> used(axes.size(), false);
  for (auto ax : axes) {
    if (ax >= axes.size() || used[ax]) throw ShapeError("permute: axes are not a permutation of " + to_string(in_shape));
    used[ax] = true;
  }
  Shape out_shape(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) out_shape[i] = in_shape[axes[i]];
  Buffer<T> out(a.numel());
  const auto ad = a.data();
  for_each_permuted(in_shape, axes, [&](std::size_t o, std::size_t i) { out[o] = ad[i]; });
  return make_result<T>("permute", std::move(out_shape), std::move(out), {a.node_ptr()},
                        [in_shape, axes](Node<T>& o) {
                          auto ga = parent_grad(o, 0);
                          for_each_permuted(in_shape, axes, [&](std::size_t out, std::size_t in) {
                            ga[in] += o.grad[out];
                          });
                        });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a, int axis0, int axis1) {
  const std::size_t x = norm_axis(axis0, a.rank(), "transpose");
  const std::size_t y = norm_axis(axis1, a.rank(), "transpose");
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[x], axes[y]);
  return permute(a, axes);
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel()) shape_mismatch("reshape", a.shape(), shape);
  Buffer<T> out(a.data().begin(), a.data().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {a.node_ptr()}, [](Node<T>& o) {
    auto ga = parent_grad(o, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
  });
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  const std::size_t ax = norm_axis(axis, first.size(), "concat");
  std::vector<std::size_t> lengths;
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) shape_mismatch("concat", first, s);
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != ax && s[d] != first[d]) shape_mismatch("concat", first, s);
    }
    lengths.push_back(s[ax]);
    out_shape[ax] += s[ax];
  }
  const AxisSplit split = split_at(out_shape, ax);
  Buffer<T> out(numel_of(out_shape));
  std::vector<std::shared_ptr<Node<T>>> inputs;
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto src = parts[p].data();
    const std::size_t chunk = lengths[p] * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(src.data() + o * chunk, chunk, out.data() + o * split.length * split.inner + offset);
    }
    offset += chunk;
    inputs.push_back(parts[p].node_ptr());
  }
  return make_result<T>("concat", std::move(out_shape), std::move(out), std::move(inputs),
                        [lengths, split](Node<T>& o) {
                          std::size_t offset = 0;
                          for (std::size_t p = 0; p < lengths.size(); ++p) {
                            const std::size_t chunk = lengths[p] * split.inner;
                            if (auto gp = parent_grad(o, p); !gp.empty()) {
                              for (std::size_t r = 0; r < split.outer; ++r) {
                                const T* src = o.grad.data() + r * split.length * split.inner + offset;
                                T* dst = gp.data() + r * chunk;
                                for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
                              }
                            }
                            offset += chunk;
                          }
                        });
}

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& a, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = norm_axis(axis, a.rank(), "slice");
  if (begin > end || end > a.shape()[ax]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                     to_string(a.shape()));
  }
  const AxisSplit split = split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[ax] = end - begin;
  const std::size_t chunk = (end - begin) * split.inner;
  Buffer<T> out(split.outer * chunk);
  const auto ad = a.data();
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(ad.data() + (o * split.length + begin) * split.inner, chunk, out.data() + o * chunk);
  }
  return make_result<T>("slice", std::move(out_shape), std::move(out), {a.node_ptr()},
                        [split, begin, chunk](Node<T>& o) {
                          auto ga = parent_grad(o, 0);
                          for (std::size_t r = 0; r < split.outer; ++r) {
                            T* dst = ga.data() + (r * split.length + begin) * split.inner;
                            const T* src = o.grad.data() + r * chunk;
                            for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
                          }
                        });
}

template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& a, std::span<const std::size_t> indices) {
  if (a.rank() == 0) throw ShapeError("gather_rows: scalar input");
  const std::size_t rows = a.shape()[0];
  const std::size_t width = rows ? a.numel() / rows : 0;
  for (auto i : indices) {
    if (i >= rows) {
      throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range for " + to_string(a.shape()));
    }
  }
  Shape out_shape = a.shape();
  out_shape[0] = indices.size();
  Buffer<T> out(indices.size() * width);
  const auto ad = a.data();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(ad.data() + indices[r] * width, width, out.data() + r * width);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result<T>("gather_rows", std::move(out_shape), std::move(out), {a.node_ptr()},
                        [idx = std::move(idx), width](Node<T>& o) {
                          auto ga = parent_grad(o, 0);
                          for (std::size_t r = 0; r < idx.size(); ++r) {
                            T* dst = ga.data() + idx[r] * width;
                            const T* src = o.grad.data() + r * width;
                            for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
                          }
                        });
}

// ---------------------------------------------------------------- reductions

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& a, int axis) {
  const std::size_t ax = norm_axis(axis, a.rank(), "softmax");
  const AxisSplit s = split_at(a.shape(), ax);
  Buffer<T> out(a.numel());
  const auto ad = a.data();
  if (s.inner == 1 && s.length > 0) {
    for (std::size_t o = 0; o < s.outer; ++o) {
      const auto L = static_cast<Eigen::Index>(s.length);
      ConstArrMap<T> in(ad.data() + o * s.length, L);
      ArrMap<T> dst(out.data() + o * s.length, L);
      dst = (in - in.maxCoeff()).exp();
      dst /= dst.sum();
    }
  }
  for (std::size_t o = 0; o < s.outer && s.inner != 1; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.length * s.inner + i;
      T peak = ad[base];
      for (std::size_t j = 1; j < s.length; ++j) peak = std::max(peak, ad[base + j * s.inner]);
      T total = 0;
      for (std::size_t j = 0; j < s.length; ++j) {
        const T e = std::exp(ad[base + j * s.inner] - peak);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.length; ++j) out[base + j * s.inner] /= total;
    }
  }
  return make_result<T>("softmax", a.shape(), std::move(out), {a.node_ptr()}, [s](Node<T>& o) {
    auto ga = parent_grad(o, 0);
    if (s.inner == 1) {
      const auto L = static_cast<Eigen::Index>(s.length);
      for (std::size_t r = 0; r < s.outer; ++r) {
        ConstArrMap<T> g(o.grad.data() + r * s.length, L), y(o.data.data() + r * s.length, L);
        ArrMap<T>(ga.data() + r * s.length, L) += y * (g - (g * y).sum());
      }
      return;
    }
    for (std::size_t r = 0; r < s.outer; ++r) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = r * s.length * s.inner + i;
        T dot = 0;
        for (std::size_t j = 0; j < s.length; ++j) dot += o.grad[base + j * s.inner] * o.data[base + j * s.inner];
        for (std::size_t j = 0; j < s.length; ++j) {
          const std::size_t k = base + j * s.inner;
          ga[k] += o.data[k] * (o.grad[k] - dot);
        }
      }
    }
  });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T total = 0;
  for (T v : a.data()) total += v;
  return make_result<T>("sum", Shape{}, Buffer<T>{total}, {a.node_ptr()}, [](Node<T>& o) {
    auto ga = parent_grad(o, 0);
    const T g = o.grad[0];
    for (auto& v : ga) v += g;
  });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a, int axis, bool keepdim) {
  const std::size_t ax = norm_axis(axis, a.rank(), "sum");
  const AxisSplit s = split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  Buffer<T> out(s.outer * s.inner, T{0});
  const auto ad = a.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.length; ++j) {
      const T* src = ad.data() + (o * s.length + j) * s.inner;
      T* dst = out.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  return make_result<T>("sum", std::move(out_shape), std::move(out), {a.node_ptr()}, [s](Node<T>& o) {
    auto ga = parent_grad(o, 0);
    for (std::size_t r = 0; r < s.outer; ++r) {
      for (std::size_t j = 0; j < s.length; ++j) {
        T* dst = ga.data() + (r * s.length + j) * s.inner;
        const T* src = o.grad.data() + r * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a, int axis, bool keepdim) {
  const std::size_t len = a.shape()[norm_axis(axis, a.rank(), "mean")];
  if (len == 0) throw ShapeError("mean: empty axis in " + to_string(a.shape()));
  return scale(sum(a, axis, keepdim), T(1) / static_cast<T>(len));
}

// ---------------------------------------------------------------- normalization

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          T eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d}) shape_mismatch("layer_norm", x.shape(), gamma.shape());
  if (beta.shape() != Shape{d}) shape_mismatch("layer_norm", x.shape(), beta.shape());
  const std::size_t rows = x.numel() / d;
  Buffer<T> out(x.numel());
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * d;
    double mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + static_cast<double>(eps));
    T* dst = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) dst[j] = static_cast<T>((row[j] - mu) * rstd) * gd[j] + bd[j];
  }
  return make_result<T>(
      "layer_norm", x.shape(), std::move(out), {x.node_ptr(), gamma.node_ptr(), beta.node_ptr()},
      [d, rows, eps](Node<T>& o) {
        const auto& xd = parent_data(o, 0);
        const auto& gd = parent_data(o, 1);
        auto gx = parent_grad(o, 0);
        auto gg = parent_grad(o, 1);
        auto gb = parent_grad(o, 2);
        std::vector<double> xhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* row = xd.data() + r * d;
          const T* g = o.grad.data() + r * d;
          double mu = 0;
          for (std::size_t j = 0; j < d; ++j) mu += row[j];
          mu /= static_cast<double>(d);
          double var = 0;
          for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
          var /= static_cast<double>(d);
          const double rstd = 1.0 / std::sqrt(var + static_cast<double>(eps));
          double mean_dxhat = 0, mean_dxhat_xhat = 0;
          for (std::size_t j = 0; j < d; ++j) {
            xhat[j] = (row[j] - mu) * rstd;
            const double dxhat = static_cast<double>(g[j]) * gd[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat[j];
            if (!gg.empty()) gg[j] += static_cast<T>(g[j] * xhat[j]);
            if (!gb.empty()) gb[j] += g[j];
          }
          if (gx.empty()) continue;
          mean_dxhat /= static_cast<double>(d);
          mean_dxhat_xhat /= static_cast<double>(d);
          T* dst = gx.data() + r * d;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxhat = static_cast<double>(g[j]) * gd[j];
            dst[j] += static_cast<T>(rstd * (dxhat - mean_dxhat - xhat[j] * mean_dxhat_xhat));
          }
        }
      });
}

template <typename T>
BasicTensor<T> l2_normalize(const BasicTensor<T>& x, int axis, T eps) {
  const std::size_t ax = norm_axis(axis, x.rank(), "l2_normalize");
  const AxisSplit s = split_at(x.shape(), ax);
  Buffer<T> out(x.numel());
  Buffer<T> norms(s.outer * s.inner);
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.length * s.inner + i;
      double sq = 0;
      for (std::size_t j = 0; j < s.length; ++j) sq += double(xd[base + j * s.inner]) * xd[base + j * s.inner];
      const T norm = static_cast<T>(std::sqrt(sq));
      norms[o * s.inner + i] = norm;
      const T denom = std::max(norm, eps);
      for (std::size_t j = 0; j < s.length; ++j) out[base + j * s.inner] = xd[base + j * s.inner] / denom;
    }
  }
  return make_result<T>("l2_normalize", x.shape(), std::move(out), {x.node_ptr()},
                        [s, eps, norms = std::move(norms)](Node<T>& o) {
                          auto gx = parent_grad(o, 0);
                          for (std::size_t r = 0; r < s.outer; ++r) {
                            for (std::size_t i = 0; i < s.inner; ++i) {
                              const std::size_t base = r * s.length * s.inner + i;
                              const T norm = norms[r * s.inner + i];
                              if (norm > eps) {
                                T dot = 0;
                                for (std::size_t j = 0; j < s.length; ++j) {
                                  dot += o.grad[base + j * s.inner] * o.data[base + j * s.inner];
                                }
                                for (std::size_t j = 0; j < s.length; ++j) {
                                  const std::size_t k = base + j * s.inner;
                                  gx[k] += (o.grad[k] - o.data[k] * dot) / norm;
                                }
                              } else {
                                for (std::size_t j = 0; j < s.length; ++j) {
                                  const std::size_t k = base + j * s.inner;
                                  gx[k] += o.grad[k] / eps;
                                }
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------- attention

template <typename T>
BasicTensor<T> multi_head_attention(const BasicTensor<T>& qkv, std::size_t heads) {
  const Shape& s = qkv.shape();
  if (s.size() != 3 || heads == 0 || s[2] % (3 * heads) != 0) {
    throw ShapeError("multi_head_attention: expected [G, L, 3 * heads * dh] with " + std::to_string(heads) +
                     " heads, got " + to_string(s));
  }
  using Strided = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
  using ConstStrided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
  const std::size_t G = s[0], L = s[1], d = s[2] / 3, dh = d / heads;
  const auto Li = static_cast<Eigen::Index>(L), dhi = static_cast<Eigen::Index>(dh);
  const Eigen::OuterStride<> in_stride(static_cast<Eigen::Index>(3 * d)), out_stride(static_cast<Eigen::Index>(d));
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  // probabilities are kept for the backward pass
  auto probs = std::make_shared<Buffer<T>>(G * heads * L * L);
  Buffer<T> out(G * L * d);
  const T* in = qkv.data().data();
  for (std::size_t g = 0; g < G; ++g) {
    for (std::size_t h = 0; h < heads; ++h) {
      const T* base = in + g * L * 3 * d + h * dh;
      ConstStrided q(base, Li, dhi, in_stride), k(base + d, Li, dhi, in_stride), v(base + 2 * d, Li, dhi, in_stride);
      MatMap<T> p(probs->data() + (g * heads + h) * L * L, Li, Li);
      p.noalias() = scale * (q * k.transpose());
      for (Eigen::Index r = 0; r < Li; ++r) {
        auto pr = p.row(r).array();
        pr = (pr - pr.maxCoeff()).exp();
        pr /= pr.sum();
      }
      Strided(out.data() + g * L * d + h * dh, Li, dhi, out_stride).noalias() = p * v;
    }
  }
  return make_result<T>(
      "multi_head_attention", Shape{G, L, d}, std::move(out), {qkv.node_ptr()},
      [=](Node<T>& r) {
        auto gin = parent_grad(r, 0);
        if (gin.empty()) return;
        const T* in_data = parent_data(r, 0).data();
        RowMat<T> dp(Li, Li);
        for (std::size_t g = 0; g < G; ++g) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = g * L * 3 * d + h * dh;
            ConstStrided q(in_data + off, Li, dhi, in_stride), k(in_data + off + d, Li, dhi, in_stride),
                v(in_data + off + 2 * d, Li, dhi, in_stride);
            Strided gq(gin.data() + off, Li, dhi, in_stride), gk(gin.data() + off + d, Li, dhi, in_stride),
                gv(gin.data() + off + 2 * d, Li, dhi, in_stride);
            ConstStrided go(r.grad.data() + g * L * d + h * dh, Li, dhi, out_stride);
            ConstMatMap<T> p(probs->data() + (g * heads + h) * L * L, Li, Li);
            gv.noalias() += p.transpose() * go;
            dp.noalias() = go * v.transpose();
            // softmax backward: dS = P * (dP - rowsum(dP * P)), folded with the scale
            const auto rowdot = (dp.array() * p.array()).rowwise().sum().eval();
            dp = (scale * p.array() * (dp.array().colwise() - rowdot)).matrix();
            gq.noalias() += dp * k;
            gk.noalias() += dp.transpose() * q;
          }
        }
      });
}

template <typename T>
BasicTensor<T> stop_gradient(const BasicTensor<T>& a) {
  auto node = std::make_shared<Node<T>>();
  node->shape = a.shape();
  node->data.assign(a.data().begin(), a.data().end());
  node->op = "stop_gradient";
  node->seq = detail::next_seq();
  return BasicTensor<T>(std::move(node));
}

#define CWAMSN_INSTANTIATE_OPS(T)                                                                        \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template BasicTensor<T> affine(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);   \
  template BasicTensor<T> multi_head_attention(const BasicTensor<T>&, std::size_t);                      \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                             \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                             \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                             \
  template BasicTensor<T> add_scalar(const BasicTensor<T>&, T);                                          \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                               \
  template BasicTensor<T> neg(const BasicTensor<T>&);                                                    \
  template BasicTensor<T> permute(const BasicTensor<T>&, const std::vector<std::size_t>&);               \
  template BasicTensor<T> transpose(const BasicTensor<T>&, int, int);                                    \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                         \
  template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, int);                               \
  template BasicTensor<T> slice(const BasicTensor<T>&, int, std::size_t, std::size_t);                   \
  template BasicTensor<T> gather_rows(const BasicTensor<T>&, std::span<const std::size_t>);              \
  template BasicTensor<T> softmax(const BasicTensor<T>&, int);                                           \
  template BasicTensor<T> log(const BasicTensor<T>&);                                                    \
  template BasicTensor<T> exp(const BasicTensor<T>&);                                                    \
  template BasicTensor<T> xlogy(const BasicTensor<T>&, const BasicTensor<T>&);                           \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                    \
  template BasicTensor<T> sum(const BasicTensor<T>&, int, bool);                                         \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                   \
  template BasicTensor<T> mean(const BasicTensor<T>&, int, bool);                                        \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, \
                                     T);                                                                 \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                                   \
  template BasicTensor<T> l2_normalize(const BasicTensor<T>&, int, T);                                   \
  template BasicTensor<T> stop_gradient(const BasicTensor<T>&);

CWAMSN_INSTANTIATE_OPS(float)
CWAMSN_INSTANTIATE_OPS(double)

#undef CWAMSN_INSTANTIATE_OPS

}  // namespace cwamsn::nd
