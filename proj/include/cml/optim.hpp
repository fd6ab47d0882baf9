#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "cml/core/errors.hpp"
#include "cml/core/tensor.hpp"

namespace cml {

// Triangular cyclical learning rate: rises linearly from base to max over
// half a cycle, falls back over the other half, and repeats.
struct CyclicLR {
  double base_lr = 1e-4;
  double max_lr = 1e-3;
  std::size_t cycle_length = 20;  // steps per full up-and-down cycle

  void validate() const {
    if (!(base_lr >= 0.0)) throw ConfigError("lr_base", "must be >= 0");
    if (!(max_lr >= base_lr)) throw ConfigError("lr_max", "must be >= lr_base");
    if (cycle_length < 2 || cycle_length % 2 != 0) throw ConfigError("lr_cycle", "must be an even number >= 2");
  }

  double at(std::size_t step) const {
    const double half = static_cast<double>(cycle_length) / 2.0;
    const double cycle = std::floor(1.0 + static_cast<double>(step) / (2.0 * half));
    const double x = std::abs(static_cast<double>(step) / half - 2.0 * cycle + 1.0);
    return base_lr + (max_lr - base_lr) * std::max(0.0, 1.0 - x);
  }
};

// Adam with decoupled weight decay:
//   p <- p * (1 - lr * wd);  p <- p - lr * m_hat / (sqrt(v_hat) + eps)
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
  };

  AdamW() = default;
  explicit AdamW(Options o) : opt_(o) {}

  const Options& options() const { return opt_; }
  std::size_t step_count() const { return step_; }
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  void set_step_count(std::size_t s) { step_ = s; }

  void step(std::span<Tensor* const> params, std::span<const Tensor> grads, double lr) {
    if (params.size() != grads.size()) throw ContractError("AdamW: parameter/gradient count mismatch");
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->rows(), p->cols());
        v_.emplace_back(p->rows(), p->cols());
      }
    }
    if (m_.size() != params.size()) throw ContractError("AdamW: parameter list changed between steps");
    ++step_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
    const double decay = 1.0 - lr * opt_.weight_decay;
    for (std::size_t j = 0; j < params.size(); ++j) {
      Tensor& p = *params[j];
      const Tensor& g = grads[j];
      if (!p.same_shape(g)) throw ShapeError("AdamW: gradient " + g.shape() + " for parameter " + p.shape());
      Tensor& m = m_[j];
      Tensor& v = v_[j];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g[i];
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
        p[i] *= decay;
        p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt_.eps);
      }
    }
  }

 private:
  Options opt_;
  std::size_t step_ = 0;
  std::vector<Tensor> m_, v_;
};

}  // namespace cml
