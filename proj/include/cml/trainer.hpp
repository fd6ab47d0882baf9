#pragma once

// BPR ranking objective and the three-phase bilevel training loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cml/contrastive.hpp"
#include "cml/core/log.hpp"
#include "cml/data.hpp"
#include "cml/encoder.hpp"
#include "cml/eval.hpp"
#include "cml/meta.hpp"
#include "cml/optim.hpp"

namespace cml {

enum class Ablation { none, clf, mcn, mke };

inline Ablation parse_ablation(std::string_view s) {
  if (s == "none" || s.empty()) return Ablation::none;
  if (s == "clf") return Ablation::clf;
  if (s == "mcn") return Ablation::mcn;
  if (s == "mke") return Ablation::mke;
  throw ConfigError("ablate", "expected one of none, clf, mcn, mke; got '" + std::string(s) + "'");
}

inline const char* to_string(Ablation a) {
  switch (a) {
    case Ablation::clf: return "clf";
    case Ablation::mcn: return "mcn";
    case Ablation::mke: return "mke";
    default: return "none";
  }
}

struct TrainConfig {
  std::size_t dim = 32;
  std::size_t layers = 3;
  double temperature = 0.1;
  std::size_t cl_negatives = 256;
  double gamma = 10.0;
  double beta = 1.0;
  double lambda = 1e-3;
  double meta_dropout = 0.1;
  std::size_t meta_batch = 512;
  std::size_t train_batch = 1024;
  std::size_t epochs = 100;
  std::size_t patience = 10;
  std::uint64_t seed = 42;
  double lr_base = 1e-4;
  double lr_max = 1e-3;
  std::size_t lr_cycle = 100;  // iterations per full cycle
  double weight_decay = 0.01;
  double meta_lr_scale = 0.1;  // meta step size relative to the scheduled rate
  Similarity similarity = Similarity::cosine;
  bool normalize = true;
  bool bpr_all_behaviors = false;
  bool detach_meta_inputs = true;
  Ablation ablation = Ablation::none;
  std::size_t eval_negatives = 99;

  CyclicLR schedule() const { return {lr_base, lr_max, lr_cycle}; }

  void validate() const {
    auto positive = [](const char* f, double v) {
      if (!(v > 0.0)) throw ConfigError(f, "must be > 0");
    };
    positive("dim", static_cast<double>(dim));
    positive("layers", static_cast<double>(layers));
    positive("temperature", temperature);
    positive("cl_negatives", static_cast<double>(cl_negatives));
    positive("gamma", gamma);
    if (!(beta >= 0.0)) throw ConfigError("beta", "must be >= 0");
    if (!(lambda >= 0.0)) throw ConfigError("lambda", "must be >= 0");
    if (!(meta_dropout >= 0.0 && meta_dropout < 1.0)) throw ConfigError("meta_dropout", "must lie in [0, 1)");
    positive("meta_batch", static_cast<double>(meta_batch));
    positive("train_batch", static_cast<double>(train_batch));
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay", "must be >= 0");
    if (!(meta_lr_scale >= 0.0)) throw ConfigError("meta_lr_scale", "must be >= 0");
    positive("eval_negatives", static_cast<double>(eval_negatives));
    schedule().validate();
    if (meta_batch > train_batch)
      log::warn("meta_batch (" + std::to_string(meta_batch) + ") exceeds train_batch (" + std::to_string(train_batch) + ")");
  }

  nlohmann::json to_json() const {
    return {{"dim", dim},
            {"layers", layers},
            {"temperature", temperature},
            {"cl_negatives", cl_negatives},
            {"gamma", gamma},
            {"beta", beta},
            {"lambda", lambda},
            {"meta_dropout", meta_dropout},
            {"meta_batch", meta_batch},
            {"train_batch", train_batch},
            {"epochs", epochs},
            {"patience", patience},
            {"seed", seed},
            {"lr_base", lr_base},
            {"lr_max", lr_max},
            {"lr_cycle", lr_cycle},
            {"weight_decay", weight_decay},
            {"meta_lr_scale", meta_lr_scale},
            {"similarity", to_string(similarity)},
            {"normalize", normalize},
            {"bpr_all_behaviors", bpr_all_behaviors},
            {"detach_meta_inputs", detach_meta_inputs},
            {"ablate", to_string(ablation)},
            {"eval_negatives", eval_negatives}};
  }

  // Keys present in `j` override the current values; unknown keys are errors.
  void merge(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config", "expected a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      try {
        set(k, it.value());
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(k, std::string("bad value: ") + e.what());
      }
    }
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.merge(j);
    return c;
  }

  std::string hash() const { return hex64(fnv1a(to_json().dump())); }

 private:
  void set(const std::string& k, const nlohmann::json& v) {
    if (k == "dim") dim = v.get<std::size_t>();
    else if (k == "layers") layers = v.get<std::size_t>();
    else if (k == "temperature") temperature = v.get<double>();
    else if (k == "cl_negatives") cl_negatives = v.get<std::size_t>();
    else if (k == "gamma") gamma = v.get<double>();
    else if (k == "beta") beta = v.get<double>();
    else if (k == "lambda") lambda = v.get<double>();
    else if (k == "meta_dropout") meta_dropout = v.get<double>();
    else if (k == "meta_batch") meta_batch = v.get<std::size_t>();
    else if (k == "train_batch") train_batch = v.get<std::size_t>();
    else if (k == "epochs") epochs = v.get<std::size_t>();
    else if (k == "patience") patience = v.get<std::size_t>();
    else if (k == "seed") seed = v.get<std::uint64_t>();
    else if (k == "lr_base") lr_base = v.get<double>();
    else if (k == "lr_max") lr_max = v.get<double>();
    else if (k == "lr_cycle") lr_cycle = v.get<std::size_t>();
    else if (k == "weight_decay") weight_decay = v.get<double>();
    else if (k == "meta_lr_scale") meta_lr_scale = v.get<double>();
    else if (k == "similarity") similarity = parse_similarity(v.get<std::string>());
    else if (k == "normalize") normalize = v.get<bool>();
    else if (k == "bpr_all_behaviors") bpr_all_behaviors = v.get<bool>();
    else if (k == "detach_meta_inputs") detach_meta_inputs = v.get<bool>();
    else if (k == "ablate") ablation = parse_ablation(v.get<std::string>());
    else if (k == "eval_negatives") eval_negatives = v.get<std::size_t>();
    else throw ConfigError(k, "unknown configuration key");
  }
};

struct BprSample {
  Index user = 0;
  Index positive = 0;
  Index negative = 0;
  Index behavior = 0;
};

// Positives uniform over `triples` of behavior k; negatives uniform over
// items outside `positives` for that user. Users with every item as a
// positive cannot yield a negative, so their draw is replaced.
template <class Rng>
std::vector<BprSample> sample_bpr(std::span<const Interaction> triples, const PositiveSets& positives, Index k,
                                  std::size_t num_items, std::size_t n, Rng& rng) {
  std::vector<std::size_t> pool;
  for (std::size_t j = 0; j < triples.size(); ++j)
    if (triples[j].behavior == k) pool.push_back(j);
  if (pool.empty()) throw DataError("behavior " + std::to_string(k) + " has no training interactions");
  std::uniform_int_distribution<std::size_t> pick_pos(0, pool.size() - 1);
  std::uniform_int_distribution<Index> pick_item(0, static_cast<Index>(num_items - 1));
  std::vector<BprSample> out;
  out.reserve(n);
  std::size_t saturated = 0;
  while (out.size() < n) {
    const auto& t = triples[pool[pick_pos(rng)]];
    const auto& have = positives.items(t.user);
    if (have.size() >= num_items) {
      if (++saturated > 100 * n + 1000) throw DataError("no user has an unobserved item to sample as negative");
      continue;
    }
    Index neg = 0;
    if (have.size() * 2 > num_items) {
      // Dense user: pick among the complement directly.
      std::uniform_int_distribution<std::size_t> pick(0, num_items - have.size() - 1);
      std::size_t r = pick(rng);
      for (Index i = 0;; ++i) {
        if (positives.contains(t.user, i)) continue;
        if (r-- == 0) {
          neg = i;
          break;
        }
      }
    } else {
      do neg = pick_item(rng);
      while (positives.contains(t.user, neg));
    }
    out.push_back({t.user, t.item, neg, k});
  }
  if (saturated > 0) log::info("resampled " + std::to_string(saturated) + " positives of users with no unobserved item");
  return out;
}

inline std::vector<BprSample> sample_bpr(const InteractionStore& store, Index k, std::size_t n, std::uint64_t seed) {
  PositiveSets pos(store.num_users(), store.triples, k);
  std::mt19937_64 rng(seed);
  return sample_bpr(store.triples, pos, k, store.num_items(), n, rng);
}

struct BprLoss {
  ad::Var total;       // sum over samples plus lambda * ||params||^2
  ad::Var per_sample;  // B x 1, regularizer excluded
};

inline ad::Var l2_regularizer(const std::vector<ad::Var>& params, double lambda) {
  if (params.empty()) throw ContractError("l2_regularizer: no parameters");
  ad::Var acc = ad::squared_norm(params.front());
  for (std::size_t j = 1; j < params.size(); ++j) acc = ad::add(acc, ad::squared_norm(params[j]));
  return ad::scale(acc, lambda);
}

// -ln sigma(x+ - x-) per sample, with x = <final user, final item>.
inline ad::Var bpr_per_sample(const EmbeddingState& state, std::span<const BprSample> samples) {
  std::vector<std::size_t> u, ip, in;
  for (const auto& s : samples) {
    u.push_back(s.user);
    ip.push_back(s.positive);
    in.push_back(s.negative);
  }
  using namespace ad;
  Var eu = gather_rows(state.final_user, u);
  Var diff = sub(row_dot(eu, gather_rows(state.final_item, ip)), row_dot(eu, gather_rows(state.final_item, in)));
  return neg(log_sigmoid(diff));
}

inline BprLoss bpr_loss(const EmbeddingState& state, std::span<const BprSample> samples, double lambda,
                        const std::vector<ad::Var>& params) {
  if (samples.empty()) throw ContractError("bpr_loss: no samples");
  ad::Var per = bpr_per_sample(state, samples);
  ad::Var total = ad::sum(per);
  if (lambda != 0.0 && !params.empty()) total = ad::add(total, l2_regularizer(params, lambda));
  return {total, per};
}

inline std::vector<ad::Var> as_list(const EncoderVars& v) {
  std::vector<ad::Var> out;
  for (const auto* p : v.flat()) out.push_back(*p);
  return out;
}

inline std::vector<ad::Var> as_list(const MetaVars& v) {
  std::vector<ad::Var> out;
  for (const auto* p : v.flat()) out.push_back(*p);
  return out;
}

// One iteration's inputs.
struct Batch {
  std::vector<BprSample> bpr;     // grouped by behavior
  ContrastiveBatch contrastive;   // anchors = unique users of `bpr`
};

struct ObjectiveParts {
  ad::Var total;
  double bpr = 0.0;                    // unweighted BPR sum
  std::size_t bpr_samples = 0;
  std::vector<double> cl;              // unweighted InfoNCE sum per pair
  std::vector<double> omega;           // mean weight per pair
  std::size_t anchors = 0;
};

// Weighted training objective for one batch. Contrastive terms carry
// per-user weights from the meta heads (or gates / ones under ablations);
// BPR terms likewise, grouped by behavior.
template <class Rng>
ObjectiveParts build_objective(const BehaviorGraph& graph, const EncoderVars& enc, const MetaVars& meta,
                               const Batch& batch, Index target, const TrainConfig& cfg, bool training, Rng& rng) {
  using namespace ad;
  Tape& tape = *enc.user_embedding.tape;
  const EmbeddingState st = encode(graph, enc);
  ObjectiveParts parts;
  std::vector<WeightedTerm> terms;
  auto ones = [&](std::size_t n) { return tape.constant(Tensor(n, 1, 1.0)); };
  auto maybe_detach = [&](const Var& v) { return cfg.detach_meta_inputs ? detach(v) : v; };

  if (cfg.ablation != Ablation::clf && !batch.contrastive.anchors.empty()) {
    auto pairs = all_pairs_losses(st, target, batch.contrastive);
    const std::vector<std::size_t> anchors(batch.contrastive.anchors.begin(), batch.contrastive.anchors.end());
    const std::size_t B = anchors.size();
    parts.anchors = B;
    std::optional<Var> user_emb;
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      Var w;
      switch (cfg.ablation) {
        case Ablation::mcn: w = ones(B); break;
        case Ablation::mke: w = expand(slice_cols(meta.pair_gates, p, 1), B, 1); break;
        default: {
          if (!user_emb) user_emb = maybe_detach(gather_rows(st.final_user, anchors));
          Var aux = maybe_detach(gather_rows(st.behavior_final_user[pairs[p].auxiliary], anchors));
          auto z = encode_meta_knowledge(maybe_detach(pairs[p].per_user), *user_emb, aux, cfg.gamma);
          w = meta_weight(meta.cl_broadcast, meta.cl_scaled, z, cfg.meta_dropout, training, rng);
        }
      }
      parts.cl.push_back(pairs[p].total.value().item());
      parts.omega.push_back(w.value().sum() / static_cast<double>(B));
      terms.push_back({w, pairs[p].per_user, true});
    }
  }

  std::size_t begin = 0;
  while (begin < batch.bpr.size()) {
    std::size_t end = begin;
    while (end < batch.bpr.size() && batch.bpr[end].behavior == batch.bpr[begin].behavior) ++end;
    std::span<const BprSample> group(batch.bpr.data() + begin, end - begin);
    Var per = bpr_per_sample(st, group);
    Var w;
    if (cfg.ablation == Ablation::mcn || cfg.ablation == Ablation::mke) {
      w = ones(group.size());
    } else {
      // The positive item's embedding stands in for the auxiliary view.
      std::vector<std::size_t> users, items;
      for (const auto& s : group) {
        users.push_back(s.user);
        items.push_back(s.positive);
      }
      Var ue = maybe_detach(gather_rows(st.final_user, users));
      Var ae = maybe_detach(gather_rows(st.final_item, items));
      auto z = encode_meta_knowledge(maybe_detach(per), ue, ae, cfg.gamma);
      w = meta_weight(meta.bpr_broadcast, meta.bpr_scaled, z, cfg.meta_dropout, training, rng);
    }
    parts.bpr += per.value().sum();
    parts.bpr_samples += group.size();
    terms.push_back({w, per, false});
    begin = end;
  }

  std::optional<Var> reg;
  if (cfg.lambda != 0.0) reg = l2_regularizer(as_list(enc), cfg.lambda);
  parts.total = weighted_objective(terms, cfg.beta, reg);
  return parts;
}

// Phases 1 and 2: one SGD lookahead step of the encoder under the weighted
// objective, then the unweighted meta-batch BPR of the stepped encoder,
// differentiated back to the meta parameters through the step.
struct Lookahead {
  double meta_loss = 0.0;
  std::vector<Tensor> meta_grads;  // aligned with MetaParams::flat()
};

// Meta-batch BPR of the encoder after one SGD step of size `step` on the
// weighted objective. Differentiable in both parameter sets.
template <class Rng>
ad::Var lookahead_loss(const BehaviorGraph& graph, const EncoderVars& ev, const MetaVars& mv, const Batch& batch,
                       std::span<const BprSample> meta_batch, Index target, const TrainConfig& cfg, double step,
                       bool training, Rng& rng) {
  auto parts = build_objective(graph, ev, mv, batch, target, cfg, training, rng);
  auto gp = as_list(ev);
  auto g = ev.user_embedding.tape->gradients(parts.total, gp, true);
  EncoderVars stepped = ev;
  auto dst = stepped.flat();
  for (std::size_t j = 0; j < dst.size(); ++j) *dst[j] = ad::sub(gp[j], ad::scale(g[j], step));
  return ad::sum(bpr_per_sample(encode(graph, stepped), meta_batch));
}

template <class Rng>
Lookahead lookahead_meta_gradient(const BehaviorGraph& graph, const EncoderParams& enc, const MetaParams& meta,
                                  const Batch& batch, std::span<const BprSample> meta_batch, Index target,
                                  const TrainConfig& cfg, double step, bool training, Rng& rng) {
  ad::Tape tape;
  EncoderVars ev = bind(tape, enc, true);
  MetaVars mv = bind(tape, meta, true);
  ad::Var loss = lookahead_loss(graph, ev, mv, batch, meta_batch, target, cfg, step, training, rng);
  Lookahead out;
  out.meta_loss = loss.value().item();
  auto mp = as_list(mv);
  out.meta_grads = tape.gradient_values(loss, mp);
  return out;
}

struct EpochStats {
  std::size_t epoch = 0;
  std::size_t iterations = 0;
  double l_bpr = 0.0;                   // mean per sample
  std::map<std::string, double> l_cl;   // mean per anchor, by pair
  std::map<std::string, double> omega;  // mean weight, by pair
  double l_meta = 0.0;                  // mean per meta sample (phase 2)
  double lr = 0.0;                      // at the last iteration
  std::optional<double> hr10;
  std::optional<double> ndcg10;
  bool diverged = false;

  nlohmann::json to_json() const {
    nlohmann::json j{{"epoch", epoch}, {"iterations", iterations}, {"l_bpr", l_bpr}, {"l_cl", l_cl},
                     {"omega", omega}, {"l_meta", l_meta}, {"lr", lr}};
    j["hr10"] = hr10 ? nlohmann::json(*hr10) : nlohmann::json(nullptr);
    j["ndcg10"] = ndcg10 ? nlohmann::json(*ndcg10) : nlohmann::json(nullptr);
    if (diverged) j["diverged"] = true;
    return j;
  }
};

namespace detail {

inline nlohmann::json tensor_json(const Tensor& t) {
  return {{"rows", t.rows()}, {"cols", t.cols()}, {"data", std::vector<double>(t.data().begin(), t.data().end())}};
}

inline Tensor tensor_from_json(const nlohmann::json& j) {
  return Tensor(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(), j.at("data").get<std::vector<double>>());
}

template <class W>
nlohmann::json params_json(const W& w) {
  nlohmann::json j = nlohmann::json::object();
  auto names = w.names();
  auto flat = w.flat();
  for (std::size_t i = 0; i < flat.size(); ++i) j[names[i]] = tensor_json(*flat[i]);
  return j;
}

template <class W>
void params_from_json(W& w, const nlohmann::json& j) {
  auto names = w.names();
  auto flat = w.flat();
  for (std::size_t i = 0; i < flat.size(); ++i) {
    Tensor t = tensor_from_json(j.at(names[i]));
    if (!t.same_shape(*flat[i])) throw DataError("checkpoint tensor " + names[i] + " has shape " + t.shape());
    *flat[i] = std::move(t);
  }
}

inline nlohmann::json adam_json(const AdamW& a) {
  nlohmann::json m = nlohmann::json::array(), v = nlohmann::json::array();
  for (const auto& t : a.first_moments()) m.push_back(tensor_json(t));
  for (const auto& t : a.second_moments()) v.push_back(tensor_json(t));
  return {{"step", a.step_count()}, {"m", m}, {"v", v}};
}

inline void adam_from_json(AdamW& a, const nlohmann::json& j) {
  a.set_step_count(j.at("step").get<std::size_t>());
  a.first_moments().clear();
  a.second_moments().clear();
  for (const auto& t : j.at("m")) a.first_moments().push_back(tensor_from_json(t));
  for (const auto& t : j.at("v")) a.second_moments().push_back(tensor_from_json(t));
}

inline bool all_finite(const std::vector<Tensor>& ts) {
  return std::all_of(ts.begin(), ts.end(), [](const Tensor& t) { return t.all_finite(); });
}

}  // namespace detail

class Trainer {
 public:
  static constexpr int kCheckpointVersion = 1;

  Trainer(const PreparedData& data, TrainConfig cfg)
      : store_(data.store), split_(data.split), cfg_(std::move(cfg)), rng_(cfg_.seed) {
    cfg_.validate();
    if (store_.num_users() == 0 || store_.num_items() == 0) throw DataError("empty dataset");
    graph_ = build_graph(store_.num_users(), store_.num_items(), store_.num_behaviors(), split_.graph_triples(),
                         cfg_.normalize);
    encoder_ = init_encoder(store_.num_users(), store_.num_items(), cfg_.dim, cfg_.layers, rng_);
    meta_ = init_meta(cfg_.dim, store_.num_behaviors() > 0 ? store_.num_behaviors() - 1 : 0);
    adam_g_ = AdamW({0.9, 0.999, 1e-8, cfg_.weight_decay});
    adam_m_ = AdamW({0.9, 0.999, 1e-8, cfg_.weight_decay});

    std::vector<Interaction> seen = split_.graph_triples();
    for (std::size_t k = 0; k < store_.num_behaviors(); ++k)
      seen_.emplace_back(store_.num_users(), seen, static_cast<Index>(k));
    for (std::size_t k = 0; k < store_.num_behaviors(); ++k)
      if (cfg_.bpr_all_behaviors || k == store_.target) bpr_behaviors_.push_back(static_cast<Index>(k));

    meta_pool_.clear();
    for (const auto& t : split_.meta)
      if (t.behavior == store_.target) meta_pool_.push_back(t);
    if (meta_pool_.empty()) {
      log::warn("meta split has no target interactions; meta batches are drawn from the training split");
      for (const auto& t : split_.train)
        if (t.behavior == store_.target) meta_pool_.push_back(t);
    }

    validation_.assign(store_.num_users(), std::nullopt);
    for (const auto& t : split_.meta)
      if (t.behavior == store_.target) validation_[t.user] = t.item;

    std::size_t n_target = 0;
    for (const auto& t : split_.train) n_target += t.behavior == store_.target;
    if (n_target == 0) throw DataError("training split has no target-behavior interactions");
    iterations_per_epoch_ = std::max<std::size_t>(1, (n_target + cfg_.train_batch - 1) / cfg_.train_batch);
    for (std::size_t k = 0; k < store_.num_behaviors(); ++k)
      if (k != store_.target) pair_names_.push_back(pair_name(store_.behavior_names, store_.target, static_cast<Index>(k)));
  }

  const TrainConfig& config() const { return cfg_; }
  const BehaviorGraph& graph() const { return graph_; }
  const InteractionStore& store() const { return store_; }
  const SplitAssignment& split() const { return split_; }
  EncoderParams& encoder() { return encoder_; }
  MetaParams& meta() { return meta_; }
  const EncoderParams& encoder() const { return encoder_; }
  const MetaParams& meta() const { return meta_; }
  const std::vector<std::string>& pair_names() const { return pair_names_; }
  std::size_t iterations_per_epoch() const { return iterations_per_epoch_; }
  std::size_t global_step() const { return step_; }
  std::size_t epoch() const { return epoch_; }
  std::mt19937_64& rng() { return rng_; }

  Batch sample_batch() {
    Batch b;
    for (Index k : bpr_behaviors_) {
      auto s = sample_bpr(split_.train, seen_[k], k, store_.num_items(), cfg_.train_batch, rng_);
      b.bpr.insert(b.bpr.end(), s.begin(), s.end());
    }
    std::vector<Index> users;
    for (const auto& s : b.bpr) users.push_back(s.user);
    b.contrastive = sample_contrastive_batch(std::move(users), store_.num_users(), cfg_.cl_negatives, cfg_.temperature,
                                             cfg_.similarity, rng_);
    if (cfg_.ablation == Ablation::clf) b.contrastive.anchors.clear();
    return b;
  }

  std::vector<BprSample> sample_meta_batch() {
    return sample_bpr(meta_pool_, seen_[store_.target], store_.target, store_.num_items(), cfg_.meta_batch, rng_);
  }

  // One full iteration. Returns false (leaving parameters untouched) when a
  // loss or gradient is not finite.
  bool iterate(EpochStats& acc) {
    const double lr = cfg_.schedule().at(step_);
    Batch batch = sample_batch();

    double meta_loss = 0.0;
    std::size_t meta_n = 0;
    const MetaParams meta_before = meta_;
    const AdamW adam_m_before = adam_m_;
    auto rollback = [&] {
      meta_ = meta_before;
      adam_m_ = adam_m_before;
      return false;
    };
    if (cfg_.ablation != Ablation::mcn) {
      auto mb = sample_meta_batch();
      auto la = lookahead_meta_gradient(graph_, encoder_, meta_, batch, mb, store_.target, cfg_, lr, true, rng_);
      if (!std::isfinite(la.meta_loss) || !detail::all_finite(la.meta_grads)) return false;
      auto mp = meta_.flat();
      adam_m_.step(mp, la.meta_grads, lr * cfg_.meta_lr_scale);
      meta_loss = la.meta_loss;
      meta_n = mb.size();
    }

    ad::Tape tape;
    EncoderVars ev = bind(tape, encoder_, true);
    MetaVars mv = bind(tape, meta_, false);
    auto parts = build_objective(graph_, ev, mv, batch, store_.target, cfg_, true, rng_);
    if (!std::isfinite(parts.total.value().item())) return rollback();
    auto gp = as_list(ev);
    auto grads = tape.gradient_values(parts.total, gp);
    if (!detail::all_finite(grads)) return rollback();
    auto ep = encoder_.flat();
    adam_g_.step(ep, grads, lr);
    ++step_;

    acc.iterations += 1;
    acc.lr = lr;
    acc.l_bpr += parts.bpr / static_cast<double>(std::max<std::size_t>(1, parts.bpr_samples));
    if (meta_n) acc.l_meta += meta_loss / static_cast<double>(meta_n);
    for (std::size_t p = 0; p < parts.cl.size() && p < pair_names_.size(); ++p) {
      acc.l_cl[pair_names_[p]] += parts.cl[p] / static_cast<double>(parts.anchors);
      acc.omega[pair_names_[p]] += parts.omega[p];
    }
    return true;
  }

  // Runs one epoch. On divergence the epoch stops early and the returned
  // stats cover the iterations that finished.
  EpochStats train_epoch() {
    EpochStats s;
    s.epoch = ++epoch_;
    for (std::size_t it = 0; it < iterations_per_epoch_; ++it) {
      if (!iterate(s)) {
        s.diverged = true;
        log::error("non-finite loss or gradient at epoch " + std::to_string(epoch_) + ", iteration " + std::to_string(it));
        break;
      }
    }
    if (s.iterations > 0) {
      const double n = static_cast<double>(s.iterations);
      s.l_bpr /= n;
      s.l_meta /= n;
      for (auto& [k, v] : s.l_cl) v /= n;
      for (auto& [k, v] : s.omega) v /= n;
    }
    return s;
  }

  EmbeddingSnapshot snapshot() const { return cml::snapshot(graph_, encoder_); }

  // HR/NDCG@10 on the meta-split target interactions.
  std::optional<MetricReport> validate() const {
    if (std::none_of(validation_.begin(), validation_.end(), [](auto& o) { return o.has_value(); })) return std::nullopt;
    EvalProtocol p;
    p.num_negatives = cfg_.eval_negatives;
    p.seed = cfg_.seed;
    auto tasks = build_ranking_tasks(store_, validation_, p);
    auto snap = snapshot();
    return evaluate_tasks(tasks, embedding_scorer(snap), p.k, p.describe());
  }

  struct FitResult {
    std::vector<EpochStats> history;
    std::size_t best_epoch = 0;
    double best_hr = -1.0;
    bool diverged = false;
  };

  // Trains with early stopping on validation HR@10 and restores the best
  // parameters. `on_epoch` sees each epoch's stats as they complete.
  FitResult fit(const std::function<void(const EpochStats&)>& on_epoch = {}) {
    FitResult r;
    EncoderParams best_enc = encoder_;
    MetaParams best_meta = meta_;
    std::size_t since_best = 0;
    for (std::size_t e = 0; e < cfg_.epochs; ++e) {
      EncoderParams before_enc = encoder_;
      MetaParams before_meta = meta_;
      EpochStats s = train_epoch();
      if (s.diverged) {
        encoder_ = before_enc;
        meta_ = before_meta;
        r.diverged = true;
        r.history.push_back(s);
        if (on_epoch) on_epoch(s);
        break;
      }
      auto rep = validate();
      if (rep) {
        s.hr10 = rep->hr;
        s.ndcg10 = rep->ndcg;
      }
      r.history.push_back(s);
      if (on_epoch) on_epoch(s);
      const double hr = rep ? rep->hr : 0.0;
      if (!rep || hr > r.best_hr) {
        r.best_hr = hr;
        r.best_epoch = s.epoch;
        best_enc = encoder_;
        best_meta = meta_;
        since_best = 0;
      } else if (++since_best >= cfg_.patience) {
        log::info("early stop at epoch " + std::to_string(s.epoch) + ", best epoch " + std::to_string(r.best_epoch));
        break;
      }
    }
    encoder_ = std::move(best_enc);
    meta_ = std::move(best_meta);
    return r;
  }

  // Per-user weight for every contrastive pair, computed on all users with
  // one sampled negative pool and no dropout.
  Tensor user_pair_weights() {
    const std::size_t N = store_.num_users();
    const std::size_t P = pair_names_.size();
    Tensor out(N, P, 1.0);
    if (P == 0 || cfg_.ablation == Ablation::mcn || cfg_.ablation == Ablation::clf) return out;
    if (cfg_.ablation == Ablation::mke) {
      for (std::size_t u = 0; u < N; ++u)
        for (std::size_t p = 0; p < P; ++p) out(u, p) = meta_.pair_gates(0, p);
      return out;
    }
    ad::Tape tape;
    ad::Tape::NoGrad ng(tape);
    EncoderVars ev = bind(tape, encoder_, false);
    MetaVars mv = bind(tape, meta_, false);
    auto st = encode(graph_, ev);
    std::vector<Index> all(N);
    for (std::size_t u = 0; u < N; ++u) all[u] = static_cast<Index>(u);
    std::mt19937_64 rng(cfg_.seed);
    auto cb = sample_contrastive_batch(all, N, cfg_.cl_negatives, cfg_.temperature, cfg_.similarity, rng);
    auto pairs = all_pairs_losses(st, store_.target, cb);
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      auto z = encode_meta_knowledge(pairs[p].per_user, st.final_user, st.behavior_final_user[pairs[p].auxiliary], cfg_.gamma);
      auto w = meta_weight(mv.cl_broadcast, mv.cl_scaled, z, 0.0, false, rng);
      for (std::size_t u = 0; u < N; ++u) out(u, p) = w.value()(u, 0);
    }
    return out;
  }

  nlohmann::json checkpoint_json(const std::string& data_hash = {}) const {
    return {{"format_version", kCheckpointVersion},
            {"epoch", epoch_},
            {"step", step_},
            {"config", cfg_.to_json()},
            {"config_hash", cfg_.hash()},
            {"data_hash", data_hash},
            {"encoder", detail::params_json(encoder_)},
            {"meta", detail::params_json(meta_)},
            {"optimizer", {{"encoder", detail::adam_json(adam_g_)}, {"meta", detail::adam_json(adam_m_)}}},
            {"rng", (std::ostringstream() << rng_).str()}};
  }

  void save_checkpoint(const std::filesystem::path& path, const std::string& data_hash = {}) const {
    auto bytes = nlohmann::json::to_cbor(checkpoint_json(data_hash));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }

  static nlohmann::json read_checkpoint(const std::filesystem::path& path) {
    std::string bytes = read_file(path);
    nlohmann::json j;
    try {
      j = nlohmann::json::from_cbor(bytes);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("corrupt checkpoint " + path.string() + ": " + e.what());
    }
    if (j.value("format_version", 0) != kCheckpointVersion) throw DataError("unsupported checkpoint version in " + path.string());
    return j;
  }

  void load_checkpoint(const nlohmann::json& j) {
    try {
      detail::params_from_json(encoder_, j.at("encoder"));
      detail::params_from_json(meta_, j.at("meta"));
      detail::adam_from_json(adam_g_, j.at("optimizer").at("encoder"));
      detail::adam_from_json(adam_m_, j.at("optimizer").at("meta"));
      epoch_ = j.at("epoch").get<std::size_t>();
      step_ = j.at("step").get<std::size_t>();
      if (j.contains("rng")) {
        std::istringstream in(j.at("rng").get<std::string>());
        in >> rng_;
        if (!in) throw DataError("malformed checkpoint: bad rng state");
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed checkpoint: ") + e.what());
    }
  }

 private:
  InteractionStore store_;
  SplitAssignment split_;
  TrainConfig cfg_;
  std::mt19937_64 rng_;
  BehaviorGraph graph_;
  EncoderParams encoder_;
  MetaParams meta_;
  AdamW adam_g_, adam_m_;
  std::vector<PositiveSets> seen_;  // train + meta positives per behavior
  std::vector<Index> bpr_behaviors_;
  std::vector<Interaction> meta_pool_;
  std::vector<std::optional<Index>> validation_;
  std::vector<std::string> pair_names_;
  std::size_t iterations_per_epoch_ = 1;
  std::size_t step_ = 0;
  std::size_t epoch_ = 0;
};

}  // namespace cml
