#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cml/core/tape.hpp"

namespace cml::ad {

// Builds a scalar from leaf variables on the given tape.
using ScalarFunction = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t entries_checked = 0;
  bool passed = false;
};

inline double evaluate_scalar(const ScalarFunction& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  // leaves, not constants: f may itself take gradients of its inputs
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  return f(tape, leaves).value().item();
}

// Compares reverse-mode gradients against central differences entry by entry.
// Error metric: |analytic - numeric| / max(1, |numeric|).
inline GradCheckResult check_gradients(std::string name, const ScalarFunction& f, std::vector<Tensor> inputs,
                                       double h = 1e-5, double tolerance = 1e-4) {
  GradCheckResult result{std::move(name)};
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
    Var loss = f(tape, leaves);
    analytic = tape.gradient_values(loss, leaves);
  }
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + h;
      const double up = evaluate_scalar(f, inputs);
      inputs[k][i] = orig - h;
      const double down = evaluate_scalar(f, inputs);
      inputs[k][i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double err = std::abs(analytic[k][i] - numeric) / std::max(1.0, std::abs(numeric));
      if (!std::isfinite(err)) {
        result.max_rel_error = INFINITY;
      } else {
        result.max_rel_error = std::max(result.max_rel_error, err);
      }
      ++result.entries_checked;
    }
  }
  result.passed = result.max_rel_error < tolerance;
  return result;
}

}  // namespace cml::ad
