#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "relcbm/tensor.hpp"

namespace relcbm::ad {

inline constexpr double kLogClamp = 1e-7;

enum class LossKind { kBce, kCe };

/// Mean binary cross-entropy. Predictions are clamped to [1e-7, 1-1e-7]
/// before the log; clamped elements receive no gradient.
inline Tensor bce_loss(const Tensor& prediction, const Tensor& target) {
  if (prediction.shape() != target.shape()) {
    throw Error(ErrorCode::kShapeMismatch, "bce " + shape_str(prediction.shape()) + " vs " + shape_str(target.shape()));
  }
  if (prediction.size() == 0) throw Error(ErrorCode::kShapeMismatch, "bce on empty tensors");
  auto p = prediction.data();
  auto y = target.data();
  const double n = static_cast<double>(p.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (y[i] < 0.0 || y[i] > 1.0 || std::isnan(y[i])) {
      throw Error(ErrorCode::kInvalidTarget, "bce target " + std::to_string(y[i]));
    }
    const double pc = std::clamp(p[i], kLogClamp, 1.0 - kLogClamp);
    total -= y[i] * std::log(pc) + (1.0 - y[i]) * std::log(1.0 - pc);
  }
  return make_result({}, {total / n}, {prediction, target}, "bce", [n](Node& self) {
    const auto& pp = self.parents[0];
    const auto& py = self.parents[1];
    if (!pp->requires_grad) return;
    auto& g = pp->ensure_grad();
    for (std::size_t i = 0; i < pp->value.size(); ++i) {
      const double pv = pp->value[i];
      if (pv < kLogClamp || pv > 1.0 - kLogClamp) continue;
      const double yv = py->value[i];
      g[i] += self.grad[0] * (-yv / pv + (1.0 - yv) / (1.0 - pv)) / n;
    }
  });
}

/// Mean categorical cross-entropy over rows of class probabilities.
inline Tensor ce_loss(const Tensor& prediction, const std::vector<std::size_t>& target) {
  if (prediction.dim() != 2 || prediction.rows() != target.size()) {
    throw Error(ErrorCode::kShapeMismatch, "ce " + shape_str(prediction.shape()) + " with " +
                                               std::to_string(target.size()) + " targets");
  }
  if (target.empty()) throw Error(ErrorCode::kShapeMismatch, "ce on empty batch");
  const std::size_t c = prediction.cols();
  for (auto t : target) {
    if (t >= c) throw Error(ErrorCode::kInvalidTarget, "class index " + std::to_string(t));
  }
  auto p = prediction.data();
  const double n = static_cast<double>(target.size());
  double total = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    total -= std::log(std::clamp(p[i * c + target[i]], kLogClamp, 1.0 - kLogClamp));
  }
  return make_result({}, {total / n}, {prediction}, "ce", [target, c, n](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    const auto& v = self.parents[0]->value;
    for (std::size_t i = 0; i < target.size(); ++i) {
      const double pv = v[i * c + target[i]];
      if (pv < kLogClamp || pv > 1.0 - kLogClamp) continue;
      g[i * c + target[i]] -= self.grad[0] / (pv * n);
    }
  });
}

/// Dispatch by kind. For `kCe` the target holds one class index per row.
inline Tensor loss_eval(LossKind kind, const Tensor& prediction, const Tensor& target) {
  if (kind == LossKind::kBce) return bce_loss(prediction, target);
  std::vector<std::size_t> idx;
  for (double v : target.data()) {
    if (v < 0 || v != std::floor(v)) throw Error(ErrorCode::kInvalidTarget, "class index " + std::to_string(v));
    idx.push_back(static_cast<std::size_t>(v));
  }
  return ce_loss(prediction, idx);
}

}  // namespace relcbm::ad
