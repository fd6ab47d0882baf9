#pragma once

#include <random>
#include <vector>

#include "cml/core/tensor.hpp"
#include "cml/data.hpp"

namespace cml::testing {

inline Tensor random_tensor(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(rows, cols);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Each (u, i, k) present independently with probability `density`.
inline std::vector<Interaction> random_triples(std::size_t users, std::size_t items, std::size_t behaviors,
                                               double density, std::mt19937_64& rng) {
  std::bernoulli_distribution on(density);
  std::vector<Interaction> out;
  for (std::size_t k = 0; k < behaviors; ++k)
    for (std::size_t u = 0; u < users; ++u)
      for (std::size_t i = 0; i < items; ++i)
        if (on(rng)) out.push_back({static_cast<Index>(u), static_cast<Index>(i), static_cast<Index>(k)});
  return out;
}

}  // namespace cml::testing
