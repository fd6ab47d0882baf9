#pragma once

// Synthetic multi-behavior logs with planted cluster structure, for smoke
// runs and tests when no real dataset is at hand.

#include <algorithm>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "cml/data.hpp"

namespace cml {

struct SynthOptions {
  std::size_t users = 200;
  std::size_t items = 300;
  std::size_t clusters = 8;
  std::size_t views_per_user = 30;
  double in_cluster = 0.8;     // chance a view lands in the user's cluster
  double cart_rate = 0.4;      // views that become carts
  double buy_rate = 0.5;       // carts that become purchases
  std::size_t min_buys = 3;
  std::uint64_t seed = 7;
};

// Behaviors view, cart, buy (target). Each user views items, mostly from
// their own cluster; purchases are a subset of carts, carts of views.
// Timestamps follow the funnel so the last purchase is well defined.
inline InteractionStore make_synthetic(const SynthOptions& o) {
  if (o.users == 0 || o.items < o.clusters || o.clusters == 0) throw ConfigError("synth", "need users, and items >= clusters > 0");
  std::mt19937_64 rng(o.seed);
  InteractionStore s;
  for (std::size_t u = 0; u < o.users; ++u) s.user_ids.push_back("u" + std::to_string(u));
  for (std::size_t i = 0; i < o.items; ++i) s.item_ids.push_back("i" + std::to_string(i));
  s.behavior_names = {"view", "cart", "buy"};
  s.target = 2;

  std::vector<std::vector<Index>> by_cluster(o.clusters);
  for (std::size_t i = 0; i < o.items; ++i) by_cluster[i % o.clusters].push_back(static_cast<Index>(i));
  std::bernoulli_distribution home(o.in_cluster), cart(o.cart_rate), buy(o.buy_rate);
  std::uniform_int_distribution<std::size_t> any_item(0, o.items - 1);

  double clock = 0.0;
  for (std::size_t u = 0; u < o.users; ++u) {
    const auto& own = by_cluster[u % o.clusters];
    std::uniform_int_distribution<std::size_t> own_item(0, own.size() - 1);
    std::vector<Index> viewed;
    const std::size_t n_views = std::min(o.views_per_user, o.items);
    for (std::size_t tries = 0; viewed.size() < n_views && tries < 50 * n_views; ++tries) {
      Index i = home(rng) ? own[own_item(rng)] : static_cast<Index>(any_item(rng));
      if (std::find(viewed.begin(), viewed.end(), i) == viewed.end()) viewed.push_back(i);
    }
    std::size_t buys = 0;
    for (std::size_t j = 0; j < viewed.size(); ++j) {
      Index i = viewed[j];
      s.triples.push_back({static_cast<Index>(u), i, 0, clock += 1.0});
      // in-cluster items convert; the first few always do so every user has
      // enough purchases to split
      const bool homey = (i % o.clusters) == (u % o.clusters);
      const bool force = homey && buys < o.min_buys;
      if (force || (homey && cart(rng))) {
        s.triples.push_back({static_cast<Index>(u), i, 1, clock += 1.0});
        if (force || buy(rng)) {
          s.triples.push_back({static_cast<Index>(u), i, 2, clock += 1.0});
          ++buys;
        }
      }
    }
  }
  s.validate();
  return s;
}

// Target "buy" plus two auxiliary behaviors built from the same page views:
// "clean" keeps each user's own views, "noisy" hands every user the views of
// a randomly chosen other user. Only the clean view agrees with a user's
// purchases, so contrasting against the noisy one pulls users toward
// strangers.
inline PreparedData make_clean_noisy(std::size_t users, std::size_t items, std::uint64_t seed) {
  SynthOptions o;
  o.users = users;
  o.items = items;
  o.clusters = 4;
  o.views_per_user = std::min<std::size_t>(12, items);
  o.in_cluster = 0.9;
  o.seed = seed;
  InteractionStore base = make_synthetic(o);

  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<Index> perm(users);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);

  InteractionStore s;
  s.user_ids = base.user_ids;
  s.item_ids = base.item_ids;
  s.behavior_names = {"buy", "clean", "noisy"};
  s.target = 0;
  for (const auto& t : base.triples) {
    if (t.behavior == base.target) s.triples.push_back({t.user, t.item, 0, t.timestamp});
    if (t.behavior == 0) {
      s.triples.push_back({t.user, t.item, 1, t.timestamp});
      s.triples.push_back({perm[t.user], t.item, 2, t.timestamp});
    }
  }
  s.validate();

  PreparedData d;
  d.store = s;
  SplitOptions so;
  so.meta_fraction = 0.2;
  so.seed = seed;
  so.drop_aux_of_test_pair = true;
  d.split = split_leave_one_out(s, so);
  return d;
}

}  // namespace cml
