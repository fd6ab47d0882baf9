#pragma once

// Multi-behavior interaction data: loading, dense re-indexing, per-behavior
// bipartite graphs and leave-one-out splits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "cml/core/errors.hpp"
#include "cml/core/log.hpp"
#include "cml/core/tensor.hpp"

namespace cml {

using Index = std::uint32_t;

struct Interaction {
  Index user = 0;
  Index item = 0;
  Index behavior = 0;
  // NaN when the source carried no timestamp.
  double timestamp = std::numeric_limits<double>::quiet_NaN();

  bool same_edge(const Interaction& o) const { return user == o.user && item == o.item && behavior == o.behavior; }
};

inline bool operator==(const Interaction& a, const Interaction& b) {
  const bool ts_eq = (std::isnan(a.timestamp) && std::isnan(b.timestamp)) || a.timestamp == b.timestamp;
  return a.same_edge(b) && ts_eq;
}

// All interactions with dense user/item indices. Triples are kept in source
// order, which stands in for time when no timestamps are present.
struct InteractionStore {
  std::vector<std::string> user_ids;  // raw id of each dense user index
  std::vector<std::string> item_ids;
  std::vector<std::string> behavior_names;
  Index target = 0;
  std::vector<Interaction> triples;

  std::size_t num_users() const { return user_ids.size(); }
  std::size_t num_items() const { return item_ids.size(); }
  std::size_t num_behaviors() const { return behavior_names.size(); }
  bool has_timestamps() const {
    return std::any_of(triples.begin(), triples.end(), [](const Interaction& t) { return !std::isnan(t.timestamp); });
  }

  std::vector<std::size_t> behavior_counts() const {
    std::vector<std::size_t> c(num_behaviors(), 0);
    for (const auto& t : triples) ++c[t.behavior];
    return c;
  }

  std::optional<Index> behavior_index(std::string_view name) const {
    for (std::size_t k = 0; k < behavior_names.size(); ++k)
      if (behavior_names[k] == name) return static_cast<Index>(k);
    return std::nullopt;
  }

  // Throws DataError when an invariant is broken.
  void validate() const {
    if (behavior_names.empty()) throw DataError("no behaviors declared");
    if (target >= behavior_names.size()) throw DataError("target behavior index out of range");
    std::unordered_set<std::uint64_t> seen;
    for (const auto& t : triples) {
      if (t.user >= num_users() || t.item >= num_items() || t.behavior >= num_behaviors())
        throw DataError("interaction index out of range");
      if (!seen.insert(edge_key(t.user, t.item, t.behavior)).second) throw DataError("duplicate interaction triple");
    }
  }

  std::uint64_t edge_key(Index u, Index i, Index k) const {
    return (static_cast<std::uint64_t>(u) * num_items() + i) * num_behaviors() + k;
  }
};

enum class InputFormat { triple_tsv, per_behavior_files, retailrocket_events };

inline InputFormat parse_input_format(std::string_view s) {
  if (s == "triple-tsv" || s == "tsv") return InputFormat::triple_tsv;
  if (s == "per-behavior-files") return InputFormat::per_behavior_files;
  if (s == "retailrocket-events") return InputFormat::retailrocket_events;
  throw ConfigError("format", "unknown input format '" + std::string(s) + "'");
}

struct LoadOptions {
  InputFormat format = InputFormat::triple_tsv;
  // Declared behavior order. Empty: order of first appearance (tsv) or sorted
  // file stems (per-behavior files).
  std::vector<std::string> behaviors;
  // Target behavior name. Empty: the last declared behavior.
  std::string target;
};

namespace detail {

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

inline void strip_cr(std::string& s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
}

// Accumulates raw records and assigns dense ids in order of first appearance.
class StoreBuilder {
 public:
  explicit StoreBuilder(std::vector<std::string> behaviors, bool fixed_behaviors)
      : behaviors_(std::move(behaviors)), fixed_(fixed_behaviors) {
    for (std::size_t k = 0; k < behaviors_.size(); ++k) behavior_index_[behaviors_[k]] = static_cast<Index>(k);
  }

  void add(const std::string& user, const std::string& item, const std::string& behavior, double timestamp,
           const std::string& where) {
    auto bk = behavior_index_.find(behavior);
    Index k;
    if (bk == behavior_index_.end()) {
      if (fixed_) throw DataError(where + ": unknown behavior label '" + behavior + "'");
      k = static_cast<Index>(behaviors_.size());
      behaviors_.push_back(behavior);
      behavior_index_[behavior] = k;
    } else {
      k = bk->second;
    }
    store_.triples.push_back({intern(user, users_, store_.user_ids), intern(item, items_, store_.item_ids), k, timestamp});
  }

  InteractionStore finish(const std::string& target) && {
    if (store_.triples.empty()) throw DataError("no interactions");
    store_.behavior_names = behaviors_;
    if (target.empty()) {
      store_.target = static_cast<Index>(behaviors_.size() - 1);
    } else {
      auto t = store_.behavior_index(target);
      if (!t) throw DataError("target behavior '" + target + "' not present among behaviors");
      store_.target = *t;
    }
    deduplicate();
    return std::move(store_);
  }

 private:
  static Index intern(const std::string& raw, std::unordered_map<std::string, Index>& map, std::vector<std::string>& ids) {
    auto [it, inserted] = map.try_emplace(raw, static_cast<Index>(ids.size()));
    if (inserted) ids.push_back(raw);
    return it->second;
  }

  // Keeps one record per (u, i, k): the most recent one, at the position of
  // its latest occurrence.
  void deduplicate() {
    auto& t = store_.triples;
    std::unordered_map<std::uint64_t, std::size_t> last;
    for (std::size_t n = 0; n < t.size(); ++n) {
      auto key = store_.edge_key(t[n].user, t[n].item, t[n].behavior);
      auto [it, inserted] = last.try_emplace(key, n);
      if (!inserted) {
        const double prev_ts = t[it->second].timestamp;
        if (!std::isnan(prev_ts) && !std::isnan(t[n].timestamp) && prev_ts > t[n].timestamp) t[n].timestamp = prev_ts;
        it->second = n;
      }
    }
    if (last.size() == t.size()) return;
    std::vector<Interaction> kept;
    kept.reserve(last.size());
    for (std::size_t n = 0; n < t.size(); ++n)
      if (last.at(store_.edge_key(t[n].user, t[n].item, t[n].behavior)) == n) kept.push_back(t[n]);
    log::info("deduplicated " + std::to_string(t.size() - kept.size()) + " repeated interaction triples");
    t = std::move(kept);
  }

  std::vector<std::string> behaviors_;
  bool fixed_;
  std::unordered_map<std::string, Index> behavior_index_;
  std::unordered_map<std::string, Index> users_, items_;
  InteractionStore store_;
};

inline double parse_timestamp(const std::string& s, const std::string& where) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(where + ": bad timestamp '" + s + "'");
  }
}

inline bool is_header(const std::vector<std::string>& f) {
  return f.size() >= 2 && (f[0] == "user" || f[0] == "user_id") && (f[1] == "item" || f[1] == "item_id");
}

inline void read_edge_file(const std::filesystem::path& path, StoreBuilder& b, const std::string* behavior) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    strip_cr(line);
    if (line.empty() || line[0] == '#') continue;
    auto f = split(line, '\t');
    if (is_header(f)) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    const std::size_t need = behavior ? 2 : 3;
    if (f.size() < need) throw DataError(where + ": expected at least " + std::to_string(need) + " tab-separated fields");
    const std::string& k = behavior ? *behavior : f[2];
    const std::size_t ts_col = need;
    const double ts = f.size() > ts_col ? parse_timestamp(f[ts_col], where) : std::numeric_limits<double>::quiet_NaN();
    b.add(f[0], f[1], k, ts, where);
  }
}

// Kaggle Retailrocket events.csv: timestamp,visitorid,event,itemid,transactionid
inline void read_retailrocket(const std::filesystem::path& path, StoreBuilder& b) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    strip_cr(line);
    if (line.empty()) continue;
    auto f = split(line, ',');
    if (lineno == 1 && !f.empty() && f[0] == "timestamp") continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (f.size() < 4) throw DataError(where + ": expected timestamp,visitorid,event,itemid[,transactionid]");
    b.add(f[1], f[3], f[2], parse_timestamp(f[0], where), where);
  }
}

}  // namespace detail

inline InteractionStore load_interactions(const std::filesystem::path& path, const LoadOptions& opt = {}) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) throw DataError("no such file: " + path.string());
  switch (opt.format) {
    case InputFormat::triple_tsv: {
      detail::StoreBuilder b(opt.behaviors, !opt.behaviors.empty());
      detail::read_edge_file(path, b, nullptr);
      return std::move(b).finish(opt.target);
    }
    case InputFormat::retailrocket_events: {
      auto behaviors = opt.behaviors.empty() ? std::vector<std::string>{"view", "addtocart", "transaction"} : opt.behaviors;
      detail::StoreBuilder b(behaviors, true);
      detail::read_retailrocket(path, b);
      return std::move(b).finish(opt.target.empty() ? "transaction" : opt.target);
    }
    case InputFormat::per_behavior_files: {
      if (!fs::is_directory(path)) throw DataError(path.string() + " is not a directory of per-behavior files");
      std::vector<std::string> behaviors = opt.behaviors;
      if (behaviors.empty()) {
        for (const auto& e : fs::directory_iterator(path))
          if (e.is_regular_file() && e.path().extension() == ".tsv") behaviors.push_back(e.path().stem().string());
        std::sort(behaviors.begin(), behaviors.end());
      }
      if (behaviors.empty()) throw DataError("no interactions");
      detail::StoreBuilder b(behaviors, true);
      for (const auto& k : behaviors) {
        auto file = path / (k + ".tsv");
        if (!fs::exists(file)) throw DataError("missing behavior file " + file.string());
        detail::read_edge_file(file, b, &k);
      }
      return std::move(b).finish(opt.target);
    }
  }
  throw ConfigError("format", "unhandled input format");
}

inline void write_triples(std::ostream& out, const InteractionStore& s, std::span<const Interaction> triples) {
  out.precision(17);
  for (const auto& t : triples) {
    out << s.user_ids[t.user] << '\t' << s.item_ids[t.item] << '\t' << s.behavior_names[t.behavior];
    if (!std::isnan(t.timestamp)) out << '\t' << t.timestamp;
    out << '\n';
  }
}

inline void save_interactions(const InteractionStore& s, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  write_triples(out, s, s.triples);
}

// Keeps users with at least `min_target` target-behavior interactions, then
// drops items left without interactions and re-indexes densely.
inline InteractionStore filter_min_target(const InteractionStore& s, std::size_t min_target) {
  if (min_target == 0) return s;
  std::vector<std::size_t> count(s.num_users(), 0);
  for (const auto& t : s.triples)
    if (t.behavior == s.target) ++count[t.user];
  InteractionStore out;
  out.behavior_names = s.behavior_names;
  out.target = s.target;
  std::vector<Index> umap(s.num_users(), std::numeric_limits<Index>::max());
  std::vector<Index> imap(s.num_items(), std::numeric_limits<Index>::max());
  std::size_t dropped_users = 0;
  for (std::size_t u = 0; u < s.num_users(); ++u)
    if (count[u] < min_target) ++dropped_users;
  for (const auto& t : s.triples) {
    if (count[t.user] < min_target) continue;
    if (umap[t.user] == std::numeric_limits<Index>::max()) {
      umap[t.user] = static_cast<Index>(out.user_ids.size());
      out.user_ids.push_back(s.user_ids[t.user]);
    }
    if (imap[t.item] == std::numeric_limits<Index>::max()) {
      imap[t.item] = static_cast<Index>(out.item_ids.size());
      out.item_ids.push_back(s.item_ids[t.item]);
    }
    out.triples.push_back({umap[t.user], imap[t.item], t.behavior, t.timestamp});
  }
  if (dropped_users > 0) {
    log::info("min-target filter (" + std::to_string(min_target) + ") dropped " + std::to_string(dropped_users) +
              " users and " + std::to_string(s.num_items() - out.num_items()) + " orphaned items");
  }
  if (out.triples.empty()) throw DataError("no interactions left after filtering users with < " + std::to_string(min_target) + " target interactions");
  return out;
}

// Per-behavior user x item adjacency plus cached transposes.
struct BehaviorGraph {
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  std::vector<SparseMatrix> adjacency;  // one per behavior, num_users x num_items
  bool normalized = false;

  std::size_t num_behaviors() const { return adjacency.size(); }
  const SparseMatrix& user_item(std::size_t k) const { return adjacency[k]; }
  const SparseMatrix& item_user(std::size_t k) const { return adjacency[k].transposed(); }
};

// With `normalize`, edge (u, i) of behavior k weighs 1/sqrt(|N_u^k| |N_i^k|);
// otherwise every edge is 1.
inline BehaviorGraph build_graph(std::size_t num_users, std::size_t num_items, std::size_t num_behaviors,
                                 std::span<const Interaction> triples, bool normalize) {
  BehaviorGraph g;
  g.num_users = num_users;
  g.num_items = num_items;
  g.normalized = normalize;
  std::vector<std::vector<SparseMatrix::Entry>> entries(num_behaviors);
  std::vector<std::vector<double>> udeg(num_behaviors, std::vector<double>(num_users, 0.0));
  std::vector<std::vector<double>> ideg(num_behaviors, std::vector<double>(num_items, 0.0));
  for (const auto& t : triples) {
    entries[t.behavior].push_back({t.user, t.item, 1.0});
    udeg[t.behavior][t.user] += 1.0;
    ideg[t.behavior][t.item] += 1.0;
  }
  for (std::size_t k = 0; k < num_behaviors; ++k) {
    if (normalize) {
      for (auto& e : entries[k]) e.value = 1.0 / std::sqrt(udeg[k][e.row] * ideg[k][e.col]);
    }
    g.adjacency.emplace_back(num_users, num_items, std::move(entries[k]));
    g.adjacency.back().transposed();
  }
  return g;
}

inline BehaviorGraph build_graph(const InteractionStore& s, bool normalize) {
  return build_graph(s.num_users(), s.num_items(), s.num_behaviors(), s.triples, normalize);
}

struct SplitOptions {
  double meta_fraction = 0.1;
  std::uint64_t seed = 42;
  // Also hold out auxiliary interactions on each test (user, item) pair.
  bool drop_aux_of_test_pair = false;
};

// Leave-one-out split. test_item[u] is u's last target interaction.
struct SplitAssignment {
  std::vector<std::optional<Index>> test_item;
  std::vector<Interaction> train;
  std::vector<Interaction> meta;

  std::size_t num_test_users() const {
    return static_cast<std::size_t>(std::count_if(test_item.begin(), test_item.end(), [](auto& o) { return o.has_value(); }));
  }

  // Triples that make up the interaction graph (test held out).
  std::vector<Interaction> graph_triples() const {
    std::vector<Interaction> all = train;
    all.insert(all.end(), meta.begin(), meta.end());
    return all;
  }
};

inline SplitAssignment split_leave_one_out(const InteractionStore& s, const SplitOptions& opt = {}) {
  if (!(opt.meta_fraction >= 0.0 && opt.meta_fraction < 0.5))
    throw ConfigError("meta_fraction", "must lie in [0, 0.5), got " + std::to_string(opt.meta_fraction));

  // Last target interaction per user: largest timestamp, ties (and missing
  // timestamps) broken by source position.
  std::vector<std::optional<std::size_t>> last(s.num_users());
  std::vector<std::size_t> target_count(s.num_users(), 0);
  for (std::size_t n = 0; n < s.triples.size(); ++n) {
    const auto& t = s.triples[n];
    if (t.behavior != s.target) continue;
    ++target_count[t.user];
    auto& cur = last[t.user];
    if (!cur) {
      cur = n;
      continue;
    }
    const double a = s.triples[*cur].timestamp, b = t.timestamp;
    const bool later = (std::isnan(a) || std::isnan(b)) ? true : b >= a;
    if (later) cur = n;
  }

  SplitAssignment out;
  out.test_item.assign(s.num_users(), std::nullopt);
  std::vector<char> held(s.triples.size(), 0);
  std::size_t single = 0;
  for (std::size_t u = 0; u < s.num_users(); ++u) {
    if (!last[u]) continue;
    out.test_item[u] = s.triples[*last[u]].item;
    held[*last[u]] = 1;
    if (target_count[u] == 1) ++single;
  }
  if (single > 0) {
    log::info(std::to_string(single) + " users have a single target interaction; it is used for test only");
  }

  std::vector<std::size_t> remaining;
  for (std::size_t n = 0; n < s.triples.size(); ++n) {
    if (held[n]) continue;
    const auto& t = s.triples[n];
    if (opt.drop_aux_of_test_pair && out.test_item[t.user] && *out.test_item[t.user] == t.item) continue;
    remaining.push_back(n);
  }

  std::vector<char> is_meta(s.triples.size(), 0);
  const auto n_meta = static_cast<std::size_t>(std::llround(opt.meta_fraction * static_cast<double>(remaining.size())));
  if (n_meta > 0) {
    std::mt19937_64 rng(opt.seed);
    std::vector<std::size_t> pick = remaining;
    // Partial Fisher-Yates: the first n_meta positions become the meta set.
    for (std::size_t j = 0; j < n_meta; ++j) {
      std::uniform_int_distribution<std::size_t> d(j, pick.size() - 1);
      std::swap(pick[j], pick[d(rng)]);
      is_meta[pick[j]] = 1;
    }
  }
  for (std::size_t n : remaining) (is_meta[n] ? out.meta : out.train).push_back(s.triples[n]);
  return out;
}

// ---------------------------------------------------------------------------
// Prepared dataset directory: users.txt, items.txt, train.tsv, meta.tsv,
// test.tsv and manifest.json.

struct PreparedData {
  InteractionStore store;  // all interactions, including held-out test edges
  SplitAssignment split;
  nlohmann::json manifest;
};

// 64-bit FNV-1a, used for manifest and config fingerprints.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream o;
  o << std::hex;
  o.width(16);
  o.fill('0');
  o << v;
  return o.str();
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline nlohmann::json write_prepared(const std::filesystem::path& dir, const InteractionStore& s,
                                     const SplitAssignment& split, const SplitOptions& opt, std::size_t min_target) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto write_lines = [&](const char* name, const std::vector<std::string>& lines) {
    std::ofstream out(dir / name);
    if (!out) throw DataError("cannot write " + (dir / name).string());
    for (const auto& l : lines) out << l << '\n';
  };
  write_lines("users.txt", s.user_ids);
  write_lines("items.txt", s.item_ids);
  auto write_set = [&](const char* name, std::span<const Interaction> t) {
    std::ofstream out(dir / name);
    if (!out) throw DataError("cannot write " + (dir / name).string());
    write_triples(out, s, t);
  };
  write_set("train.tsv", split.train);
  write_set("meta.tsv", split.meta);
  std::vector<Interaction> test;
  for (std::size_t u = 0; u < split.test_item.size(); ++u)
    if (split.test_item[u]) test.push_back({static_cast<Index>(u), *split.test_item[u], s.target});
  write_set("test.tsv", test);

  auto counts_by_behavior = [&](std::span<const Interaction> t) {
    nlohmann::json j = nlohmann::json::object();
    std::vector<std::size_t> c(s.num_behaviors(), 0);
    for (const auto& x : t) ++c[x.behavior];
    for (std::size_t k = 0; k < c.size(); ++k) j[s.behavior_names[k]] = c[k];
    return j;
  };
  nlohmann::json m;
  m["format_version"] = 1;
  m["num_users"] = s.num_users();
  m["num_items"] = s.num_items();
  m["num_interactions"] = s.triples.size();
  m["behaviors"] = s.behavior_names;
  m["target"] = s.behavior_names[s.target];
  m["seed"] = opt.seed;
  m["meta_fraction"] = opt.meta_fraction;
  m["min_target"] = min_target;
  m["drop_aux_of_test_pair"] = opt.drop_aux_of_test_pair;
  m["counts"] = {{"train", split.train.size()},
                 {"meta", split.meta.size()},
                 {"test", test.size()},
                 {"train_by_behavior", counts_by_behavior(split.train)},
                 {"meta_by_behavior", counts_by_behavior(split.meta)}};
  std::ofstream(dir / "manifest.json") << m.dump(2) << '\n';
  return m;
}

inline PreparedData read_prepared(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(dir / "manifest.json")) throw DataError(dir.string() + " is not a prepared dataset (manifest.json missing)");
  PreparedData d;
  d.manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  auto& s = d.store;
  s.behavior_names = d.manifest.at("behaviors").get<std::vector<std::string>>();
  auto target = s.behavior_index(d.manifest.at("target").get<std::string>());
  if (!target) throw DataError("manifest target not among behaviors");
  s.target = *target;

  auto read_ids = [&](const char* name, std::vector<std::string>& ids, std::unordered_map<std::string, Index>& map) {
    std::ifstream in(dir / name);
    if (!in) throw DataError("cannot open " + (dir / name).string());
    std::string line;
    while (std::getline(in, line)) {
      detail::strip_cr(line);
      map.emplace(line, static_cast<Index>(ids.size()));
      ids.push_back(line);
    }
  };
  std::unordered_map<std::string, Index> umap, imap;
  read_ids("users.txt", s.user_ids, umap);
  read_ids("items.txt", s.item_ids, imap);

  auto read_set = [&](const char* name) {
    std::vector<Interaction> out;
    std::ifstream in(dir / name);
    if (!in) throw DataError("cannot open " + (dir / name).string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      detail::strip_cr(line);
      if (line.empty()) continue;
      auto f = detail::split(line, '\t');
      const std::string where = (dir / name).string() + ":" + std::to_string(lineno);
      if (f.size() < 3) throw DataError(where + ": expected user, item, behavior");
      auto u = umap.find(f[0]);
      auto i = imap.find(f[1]);
      auto k = s.behavior_index(f[2]);
      if (u == umap.end() || i == imap.end()) throw DataError(where + ": id not in users.txt/items.txt");
      if (!k) throw DataError(where + ": unknown behavior label '" + f[2] + "'");
      double ts = f.size() > 3 ? detail::parse_timestamp(f[3], where) : std::numeric_limits<double>::quiet_NaN();
      out.push_back({u->second, i->second, *k, ts});
    }
    return out;
  };
  d.split.train = read_set("train.tsv");
  d.split.meta = read_set("meta.tsv");
  auto test = read_set("test.tsv");
  d.split.test_item.assign(s.num_users(), std::nullopt);
  for (const auto& t : test) d.split.test_item[t.user] = t.item;
  s.triples = d.split.graph_triples();
  s.triples.insert(s.triples.end(), test.begin(), test.end());
  return d;
}

// Fingerprint of a prepared directory: every file that read_prepared uses.
inline std::string prepared_hash(const std::filesystem::path& dir) {
  std::uint64_t h = fnv1a("");
  for (const char* name : {"manifest.json", "users.txt", "items.txt", "train.tsv", "meta.tsv", "test.tsv"}) {
    h = fnv1a(name, h);
    h = fnv1a(read_file(dir / name), h);
  }
  return hex64(h);
}

// Per-user sorted positive item lists for one behavior.
class PositiveSets {
 public:
  PositiveSets() = default;
  PositiveSets(std::size_t num_users, std::span<const Interaction> triples, Index behavior) : items_(num_users) {
    for (const auto& t : triples)
      if (t.behavior == behavior) items_[t.user].push_back(t.item);
    for (auto& v : items_) {
      std::sort(v.begin(), v.end());
      v.erase(std::unique(v.begin(), v.end()), v.end());
    }
  }
  bool contains(Index u, Index i) const { return std::binary_search(items_[u].begin(), items_[u].end(), i); }
  const std::vector<Index>& items(Index u) const { return items_[u]; }
  std::size_t num_users() const { return items_.size(); }
  void add(Index u, Index i) {
    auto& v = items_[u];
    auto it = std::lower_bound(v.begin(), v.end(), i);
    if (it == v.end() || *it != i) v.insert(it, i);
  }

 private:
  std::vector<std::vector<Index>> items_;
};

}  // namespace cml
