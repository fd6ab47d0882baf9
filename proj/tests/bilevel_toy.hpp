#pragma once

#include <cstdint>
#include <utility>

#include "cml/synth.hpp"
#include "cml/trainer.hpp"

namespace cml::testing {

// Mean learned weight of the (buy, clean) and (buy, noisy) pairs after 200
// bilevel iterations on the clean-vs-noisy toy.
inline std::pair<double, double> clean_noisy_weights(std::uint64_t seed) {
  auto d = make_clean_noisy(60, 80, seed);
  TrainConfig c;
  c.dim = 8;
  c.layers = 1;
  c.train_batch = 64;
  c.meta_batch = 32;
  c.cl_negatives = 32;
  c.lr_base = 1e-2;
  c.lr_max = 1e-2;
  c.meta_dropout = 0.0;
  c.seed = seed;
  Trainer tr(d, c);
  EpochStats acc;
  for (int it = 0; it < 200; ++it)
    if (!tr.iterate(acc)) throw NumericalError("bilevel toy diverged");
  Tensor w = tr.user_pair_weights();
  double clean = 0.0, noisy = 0.0;
  for (std::size_t u = 0; u < w.rows(); ++u) {
    clean += w(u, 0);
    noisy += w(u, 1);
  }
  return {clean / static_cast<double>(w.rows()), noisy / static_cast<double>(w.rows())};
}

}  // namespace cml::testing
