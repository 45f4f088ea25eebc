#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "relcbm/error.hpp"
#include "relcbm/tensor.hpp"

namespace relcbm {

using Rng = std::mt19937_64;

struct Parameter {
  std::string name;
  ad::Tensor tensor;
};

/// Owns the trainable tensors of a model in creation order.
class ParameterStore {
 public:
  ad::Tensor create(const std::string& name, ad::Shape shape, std::vector<double> values) {
    if (find(name)) throw Error(ErrorCode::kSchemaMismatch, "duplicate parameter name '" + name + "'");
    params_.push_back({name, ad::Tensor(std::move(shape), std::move(values), true)});
    return params_.back().tensor;
  }

  // Glorot-uniform weights.
  ad::Tensor create_weight(const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    std::vector<double> v(in * out);
    for (auto& x : v) x = dist(rng);
    return create(name, {in, out}, std::move(v));
  }

  ad::Tensor create_bias(const std::string& name, std::size_t out, double value = 0.0) {
    return create(name, {1, out}, std::vector<double>(out, value));
  }

  const Parameter* find(const std::string& name) const {
    for (const auto& p : params_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& p : params_) {
      nlohmann::ordered_json e;
      e["shape"] = p.tensor.shape();
      e["data"] = std::vector<double>(p.tensor.data().begin(), p.tensor.data().end());
      j[p.name] = std::move(e);
    }
    return j;
  }

  // Loads values by name; every stored parameter must be present with a matching shape.
  void load_json(const nlohmann::ordered_json& j) {
    for (auto& p : params_) {
      if (!j.contains(p.name)) throw Error(ErrorCode::kSchemaMismatch, "checkpoint lacks parameter '" + p.name + "'");
      const auto& e = j.at(p.name);
      auto shape = e.at("shape").get<ad::Shape>();
      auto data = e.at("data").get<std::vector<double>>();
      if (shape != p.tensor.shape() || data.size() != p.tensor.size()) {
        throw Error(ErrorCode::kShapeMismatch, "checkpoint shape for '" + p.name + "'");
      }
      std::copy(data.begin(), data.end(), p.tensor.mutable_data().begin());
    }
  }

 private:
  std::vector<Parameter> params_;
};

/// Affine map x·W + b on row-major batches.
struct Dense {
  ad::Tensor weight;
  ad::Tensor bias;

  Dense() = default;
  Dense(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng)
      : weight(store.create_weight(name + ".w", in, out, rng)), bias(store.create_bias(name + ".b", out)) {}

  std::size_t in() const { return weight.rows(); }
  std::size_t out() const { return weight.cols(); }

  ad::Tensor operator()(const ad::Tensor& x) const { return ad::add(ad::matmul(x, weight), bias); }
};

/// Dense layers with relu between them and no activation on the output.
struct Mlp {
  std::vector<Dense> layers;

  Mlp() = default;
  Mlp(ParameterStore& store, const std::string& name, const std::vector<std::size_t>& sizes, Rng& rng) {
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
      layers.emplace_back(store, name + "." + std::to_string(i), sizes[i], sizes[i + 1], rng);
    }
  }

  std::size_t in() const { return layers.front().in(); }
  std::size_t out() const { return layers.back().out(); }

  ad::Tensor operator()(const ad::Tensor& x) const {
    if (x.dim() != 2 || x.cols() != in()) {
      throw Error(ErrorCode::kDimMismatch, "mlp expects " + std::to_string(in()) + " inputs, got " +
                                               ad::shape_str(x.shape()));
    }
    ad::Tensor h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = layers[i](h);
      if (i + 1 < layers.size()) h = ad::relu(h);
    }
    return h;
  }
};

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  const OptimizerConfig& config() const { return cfg_; }
  std::int64_t steps() const { return step_; }

  /// Applies one update. Gradients are read, not cleared.
  void step(std::vector<Parameter>& params) {
    for (const auto& p : params) {
      if (p.tensor.size() > 0 && !p.tensor.has_grad()) throw Error(ErrorCode::kMissingGrad, p.name);
    }
    ++step_;
    const double t = static_cast<double>(step_);
    for (auto& p : params) {
      if (p.tensor.size() == 0) continue;
      auto value = p.tensor.mutable_data();
      auto grad = p.tensor.grad();
      if (cfg_.kind == OptimizerKind::kSgd) {
        for (std::size_t i = 0; i < value.size(); ++i) value[i] -= cfg_.learning_rate * grad[i];
        continue;
      }
      auto& m = first_[p.name];
      auto& v = second_[p.name];
      if (m.size() != value.size()) {
        m.assign(value.size(), 0.0);
        v.assign(value.size(), 0.0);
      }
      const double c1 = 1.0 - std::pow(cfg_.beta1, t);
      const double c2 = 1.0 - std::pow(cfg_.beta2, t);
      for (std::size_t i = 0; i < value.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * grad[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
        value[i] -= cfg_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.epsilon);
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::int64_t step_ = 0;
  std::map<std::string, std::vector<double>> first_;
  std::map<std::string, std::vector<double>> second_;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  bool non_differentiable = false;  // a max/min tie was met; the point is excluded
  bool passed = false;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. Relative error is |a - n| / max(|a|, |n|, 1e-3).
inline GradCheckReport gradient_check(const std::function<ad::Tensor(const ad::Tensor&)>& f, const ad::Tensor& x,
                                      double tol, double h = 1e-5) {
  GradCheckReport r;
  ad::Tensor probe(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  ad::Tensor y = f(probe);
  if (y.size() != 1) throw Error(ErrorCode::kNotScalar, "gradient_check needs a scalar function");
  if (ad::has_tie(y)) {
    r.non_differentiable = true;
    return r;
  }
  ad::backward(y);
  std::vector<double> analytic(probe.grad().begin(), probe.grad().end());
  if (analytic.empty()) analytic.assign(probe.size(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::vector<double> plus(x.data().begin(), x.data().end());
    std::vector<double> minus = plus;
    plus[i] += h;
    minus[i] -= h;
    const double fp = f(ad::Tensor(x.shape(), plus)).item();
    const double fm = f(ad::Tensor(x.shape(), minus)).item();
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-3});
    r.max_relative_error = std::max(r.max_relative_error, std::abs(analytic[i] - numeric) / denom);
    ++r.checked;
  }
  r.passed = r.max_relative_error <= tol;
  return r;
}

}  // namespace relcbm
