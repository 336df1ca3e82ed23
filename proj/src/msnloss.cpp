// SPDX-License-Identifier: Apache-2.0
#include "cwamsn/msnloss.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "cwamsn/error.hpp"
#include "cwamsn/ops.hpp"
#include "cwamsn/rng.hpp"

namespace cwamsn::msn {
namespace {

template <typename T>
void reject_zero_rows(const nd::BasicTensor<T>& x, const char* what) {
  const std::size_t d = x.shape().back();
  const auto values = x.data();
  for (std::size_t r = 0; r * d < values.size(); ++r) {
    bool zero = true;
    for (std::size_t j = 0; j < d && zero; ++j) zero = values[r * d + j] == T(0);
    if (zero) throw NumericError(std::string("assignment_scores: ") + what + " row " + std::to_string(r) + " is zero");
  }
}

}  // namespace

PrototypeBank PrototypeBank::init(std::size_t count, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed, "prototypes");
  std::vector<float> v(count * dim);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  PrototypeBank bank;
  bank.prototypes = nd::Tensor::from_data({count, dim}, std::move(v));
  bank.validate();
  return bank;
}

void PrototypeBank::validate() const {
  if (!prototypes.defined() || prototypes.rank() != 2) throw ConfigError("prototype bank must be a T x D matrix");
  if (count() < 2) throw ConfigError("prototype bank needs at least 2 prototypes, got " + std::to_string(count()));
  if (!(tau_target > 0.0) || !(tau_target <= tau_anchor)) {
    throw ConfigError("temperatures must satisfy 0 < tau_target <= tau_anchor, got " + std::to_string(tau_target) +
                      " and " + std::to_string(tau_anchor));
  }
}

void LossConfig::validate() const {
  if (!(lambda1 >= 0.0)) throw ConfigError("lambda1 must be >= 0, got " + std::to_string(lambda1));
  if (!(lambda2 >= 0.0)) throw ConfigError("lambda2 must be >= 0, got " + std::to_string(lambda2));
}

void EmaSchedule::validate() const {
  if (!(0.0 <= start && start <= end && end <= 1.0)) {
    throw ConfigError("EMA momentum must satisfy 0 <= start <= end <= 1, got " + std::to_string(start) + " and " +
                      std::to_string(end));
  }
}

template <typename T>
nd::BasicTensor<T> assignment_scores(const nd::BasicTensor<T>& prototypes, const nd::BasicTensor<T>& z, double tau) {
  if (prototypes.rank() != 2 || z.rank() == 0 || z.shape().back() != prototypes.size(1)) {
    throw ShapeError("assignment_scores: rows of " + nd::to_string(z.shape()) + " do not match prototypes " +
                     nd::to_string(prototypes.shape()));
  }
  if (!(tau > 0.0)) throw ConfigError("assignment_scores: temperature must be > 0");
  reject_zero_rows(z, "embedding");
  reject_zero_rows(prototypes, "prototype");
  auto zn = nd::l2_normalize(z, -1);
  auto on = nd::l2_normalize(prototypes, -1);
  auto logits = nd::scale(nd::matmul(zn, nd::transpose(on, 0, 1)), static_cast<T>(1.0 / tau));
  return nd::softmax(logits, -1);
}

template <typename T>
LossTerms<T> msn_loss(const nd::BasicTensor<T>& target, const nd::BasicTensor<T>& anchor, const LossConfig& cfg) {
  if (anchor.rank() < 2 || target.rank() < 2) {
    throw ShapeError("msn_loss: expected score rows, got " + nd::to_string(anchor.shape()) + " and " +
                     nd::to_string(target.shape()));
  }
  const std::size_t n_protos = anchor.shape().back();
  const std::size_t rows = anchor.numel() / n_protos;
  const std::size_t targets = target.numel() / std::max<std::size_t>(target.shape().back(), 1);
  const bool shaped_ok = target.shape().back() == n_protos && targets > 0 && rows % targets == 0 &&
                         (anchor.rank() == 2 ? targets == rows : targets == anchor.size(0));
  if (!shaped_ok) {
    throw ShapeError("msn_loss: target rows " + nd::to_string(target.shape()) + " do not pair with anchor rows " +
                     nd::to_string(anchor.shape()));
  }
  const std::size_t views = rows / targets;
  std::vector<std::size_t> owner(rows);
  for (std::size_t r = 0; r < rows; ++r) owner[r] = r / views;

  auto s = nd::reshape(anchor, {rows, n_protos});
  auto s_plus = nd::gather_rows(nd::reshape(nd::stop_gradient(target), {targets, n_protos}),
                                std::span<const std::size_t>(owner));
  auto ce = nd::scale(nd::sum(nd::xlogy(s_plus, s)), static_cast<T>(-1.0 / static_cast<double>(rows)));
  auto mean_s = nd::mean(s, 0);
  auto entropy = nd::neg(nd::sum(nd::xlogy(mean_s, mean_s)));
  auto loss = nd::sub(nd::scale(ce, static_cast<T>(cfg.lambda1)), nd::scale(entropy, static_cast<T>(cfg.lambda2)));
  return {loss, static_cast<double>(ce.item()), static_cast<double>(entropy.item())};
}

void ema_update(vit::EncoderWeights<float>& target, const vit::EncoderWeights<float>& anchor, double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("EMA momentum must be in [0, 1], got " + std::to_string(m));
  std::vector<nd::Tensor> sources;
  anchor.for_each_parameter([&](const std::string&, const nd::Tensor& t) { sources.push_back(t); });
  std::size_t i = 0;
  nd::NoGradGuard no_grad;
  target.for_each_parameter([&](const std::string& name, nd::Tensor& t) {
    if (i >= sources.size() || sources[i].shape() != t.shape()) {
      throw ShapeError("ema_update: parameter " + name + " does not match the anchor");
    }
    auto dst = t.data_mut();
    const auto src = sources[i++].data();
    for (std::size_t k = 0; k < dst.size(); ++k) {
      dst[k] = static_cast<float>(m * static_cast<double>(dst[k]) + (1.0 - m) * static_cast<double>(src[k]));
    }
  });
  if (i != sources.size()) throw ShapeError("ema_update: anchor and target have different depths");
}

#define CWAMSN_INSTANTIATE_MSN(T)                                                                                \
  template nd::BasicTensor<T> assignment_scores<T>(const nd::BasicTensor<T>&, const nd::BasicTensor<T>&, double); \
  template LossTerms<T> msn_loss<T>(const nd::BasicTensor<T>&, const nd::BasicTensor<T>&, const LossConfig&);

CWAMSN_INSTANTIATE_MSN(float)
CWAMSN_INSTANTIATE_MSN(double)

}  // namespace cwamsn::msn
