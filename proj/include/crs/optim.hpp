#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>

#include "autodiff.hpp"

namespace crs {

enum class OptimizerKind { sgd, adam, rmsprop };

inline OptimizerKind parse_optimizer_kind(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  if (s == "rmsprop") return OptimizerKind::rmsprop;
  throw std::invalid_argument("unknown optimizer '" + std::string(s) + "'");
}

inline std::string_view to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::rmsprop: return "rmsprop";
  }
  return "?";
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd;
  double learning_rate = 0.001;
  double beta1 = 0.9;    // adam
  double beta2 = 0.999;  // adam
  double decay = 0.9;    // rmsprop moving-average coefficient
  double epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("OptimizerConfig: learning_rate must be >= 0");
    if (!(epsilon > 0.0)) throw std::invalid_argument("OptimizerConfig: epsilon must be > 0");
  }
};

/// Stateful first-order optimizer bound to one ParameterSet layout.
///   sgd:     p -= lr * g
///   adam:    Kingma & Ba with bias correction
///   rmsprop: v = decay*v + (1-decay)*g^2;  p -= lr * g / (sqrt(v) + eps)
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const OptimizerConfig& config() const noexcept { return cfg_; }
  long steps() const noexcept { return t_; }

  void step(ParameterSet& params, const Gradients& grads) {
    if (grads.size() != params.size())
      throw DimensionError("Optimizer::step: " + std::to_string(grads.size()) + " gradients for " +
                           std::to_string(params.size()) + " parameters");
    for (std::size_t i = 0; i < params.size(); ++i)
      if (grads[i].shape() != params[i].shape())
        throw DimensionError("Optimizer::step: gradient for '" + params.name(i) + "' has shape " +
                             shape_str(grads[i].shape()) + ", parameter has " + shape_str(params[i].shape()));
    if (first_.empty() && cfg_.kind != OptimizerKind::sgd) {
      first_ = zero_gradients(params);
      second_ = zero_gradients(params);
    } else if (!first_.empty() && first_.size() != params.size()) {
      throw DimensionError("Optimizer::step: parameter registry changed between steps");
    }
    ++t_;
    const double lr = cfg_.learning_rate;
    switch (cfg_.kind) {
      case OptimizerKind::sgd:
        for (std::size_t i = 0; i < params.size(); ++i)
          for (std::size_t k = 0; k < params[i].size(); ++k) params[i][k] -= lr * grads[i][k];
        break;
      case OptimizerKind::adam: {
        const double b1 = cfg_.beta1, b2 = cfg_.beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i)
          for (std::size_t k = 0; k < params[i].size(); ++k) {
            const double g = grads[i][k];
            double& m = first_[i][k];
            double& v = second_[i][k];
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            params[i][k] -= lr * (m / c1) / (std::sqrt(v / c2) + cfg_.epsilon);
          }
        break;
      }
      case OptimizerKind::rmsprop: {
        const double rho = cfg_.decay;
        for (std::size_t i = 0; i < params.size(); ++i)
          for (std::size_t k = 0; k < params[i].size(); ++k) {
            const double g = grads[i][k];
            double& v = second_[i][k];
            v = rho * v + (1.0 - rho) * g * g;
            params[i][k] -= lr * g / (std::sqrt(v) + cfg_.epsilon);
          }
        break;
      }
    }
    for (std::size_t i = 0; i < params.size(); ++i)
      if (!params[i].all_finite()) throw NumericError("Optimizer::step: parameter '" + params.name(i) + "' became non-finite");
  }

 private:
  OptimizerConfig cfg_;
  Gradients first_;
  Gradients second_;
  long t_ = 0;
};

}  // namespace crs
