#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cml/data.hpp"
#include "cml/eval.hpp"
#include "cml/gradcheck_suite.hpp"
#include "cml/synth.hpp"
#include "cml/trainer.hpp"

#ifndef CML_VERSION
#define CML_VERSION "dev"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cml;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

std::string now_utc() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string x; std::getline(in, x, ',');)
    if (!x.empty()) out.push_back(x);
  return out;
}

// ---- prepare ----

struct PrepareArgs {
  std::string input, out, format = "triple-tsv", behaviors, target;
  std::size_t min_target = 3;
  double meta_fraction = 0.1;
  std::uint64_t seed = 42;
  bool drop_aux = false;
};

int run_prepare(const PrepareArgs& a) {
  LoadOptions lo;
  lo.format = parse_input_format(a.format);
  lo.behaviors = split_list(a.behaviors);
  lo.target = a.target;
  auto raw = load_interactions(a.input, lo);
  auto store = filter_min_target(raw, a.min_target);
  SplitOptions so;
  so.meta_fraction = a.meta_fraction;
  so.seed = a.seed;
  so.drop_aux_of_test_pair = a.drop_aux;
  auto split = split_leave_one_out(store, so);
  auto m = write_prepared(a.out, store, split, so, a.min_target);
  std::cout << "prepared " << m["num_users"] << " users, " << m["num_items"] << " items, " << m["num_interactions"]
            << " interactions over " << m["behaviors"].size() << " behaviors (target " << m["target"].get<std::string>()
            << ") -> " << a.out << "  [" << prepared_hash(a.out) << "]\n";
  return kOk;
}

// ---- synth ----

int run_synth(const SynthOptions& o, const std::string& out) {
  auto s = make_synthetic(o);
  save_interactions(s, out);
  std::cout << "wrote " << s.triples.size() << " interactions (" << s.num_users() << " users, " << s.num_items()
            << " items) to " << out << '\n';
  return kOk;
}

// ---- train ----

// Each TrainConfig field becomes --field-name. Values are kept as strings and
// converted by the type of the field's default, so the file/flag layering is
// a pair of json merges.
struct ConfigFlags {
  std::vector<std::pair<std::string, CLI::Option*>> opts;
  std::map<std::string, std::string> values;
  bool raw_adjacency = false;
  CLI::Option* raw_opt = nullptr;

  void attach(CLI::App& app) {
    const json defaults = TrainConfig{}.to_json();
    for (auto it = defaults.begin(); it != defaults.end(); ++it) {
      std::string flag = it.key();
      std::replace(flag.begin(), flag.end(), '_', '-');
      std::ostringstream desc;
      desc << "default " << it.value().dump();
      // booleans are flags: --name alone means true, --name=false turns it off
      auto* o = it.value().is_boolean() ? app.add_flag("--" + flag, values[it.key()], desc.str())
                                        : app.add_option("--" + flag, values[it.key()], desc.str());
      opts.emplace_back(it.key(), o->group("Training config"));
    }
    raw_opt = app.add_flag("--raw-adjacency", raw_adjacency, "unnormalized per-behavior sums (same as --normalize false)")
                  ->group("Training config");
  }

  json to_json() const {
    const json defaults = TrainConfig{}.to_json();
    json j = json::object();
    for (const auto& [key, opt] : opts) {
      if (opt->count() == 0) continue;
      const std::string& v = values.at(key);
      const json& d = defaults.at(key);
      try {
        if (d.is_boolean()) {
          if (v == "true" || v == "1") j[key] = true;
          else if (v == "false" || v == "0") j[key] = false;
          else throw ConfigError(key, "expected true or false, got '" + v + "'");
        } else if (d.is_number_unsigned()) {
          if (v.find_first_not_of("0123456789") != std::string::npos || v.empty())
            throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
          j[key] = std::stoull(v);
        } else if (d.is_number()) {
          std::size_t used = 0;
          double x = std::stod(v, &used);
          if (used != v.size()) throw ConfigError(key, "expected a number, got '" + v + "'");
          j[key] = x;
        } else {
          j[key] = v;
        }
      } catch (const std::logic_error&) {
        throw ConfigError(key, "cannot parse '" + v + "'");
      }
    }
    if (raw_opt->count()) j["normalize"] = false;
    return j;
  }
};

struct TrainArgs {
  std::string data, out, config;
};

int run_train(const TrainArgs& a, const ConfigFlags& flags) {
  TrainConfig cfg;
  json file_cfg = json::object();
  if (!a.config.empty()) {
    try {
      file_cfg = json::parse(read_file(a.config));
    } catch (const json::parse_error& e) {
      throw ConfigError("config", a.config + ": " + e.what());
    }
    cfg.merge(file_cfg);
  }
  cfg.merge(flags.to_json());
  cfg.validate();

  auto data = read_prepared(a.data);
  const std::string data_hash = prepared_hash(a.data);
  fs::create_directories(a.out);
  const fs::path metrics_path = fs::path(a.out) / "metrics.jsonl";
  const fs::path ckpt_path = fs::path(a.out) / "checkpoint.cbor";
  const fs::path manifest_path = fs::path(a.out) / "run_manifest.json";

  json manifest{{"version", CML_VERSION},
                {"started", now_utc()},
                {"config", cfg.to_json()},
                {"config_hash", cfg.hash()},
                {"data_dir", a.data},
                {"data_hash", data_hash},
                {"seed", cfg.seed},
                {"outputs", {{"metrics", metrics_path.string()}, {"checkpoint", ckpt_path.string()}}}};
  manifest["run_hash"] = hex64(fnv1a(cfg.hash() + data_hash));

  Trainer trainer(data, cfg);
  std::ofstream metrics(metrics_path);
  if (!metrics) throw DataError("cannot write " + metrics_path.string());
  auto result = trainer.fit([&](const EpochStats& s) {
    json j = s.to_json();
    j["run_hash"] = manifest["run_hash"];
    metrics << j.dump() << '\n';
    metrics.flush();
    std::ostringstream line;
    line << "epoch " << s.epoch << "  l_bpr " << std::setprecision(5) << s.l_bpr;
    if (s.hr10) line << "  hr@10 " << *s.hr10 << "  ndcg@10 " << *s.ndcg10;
    log::info(line.str());
  });
  trainer.save_checkpoint(ckpt_path, data_hash);

  manifest["finished"] = now_utc();
  manifest["epochs_run"] = result.history.size();
  manifest["best_epoch"] = result.best_epoch;
  manifest["best_validation_hr10"] = result.best_hr;
  manifest["diverged"] = result.diverged;
  write_json(manifest_path, manifest);
  if (result.diverged) {
    std::cerr << "training diverged; best parameters up to the last finite epoch were saved\n";
    return kNumerical;
  }
  std::cout << "best epoch " << result.best_epoch << " (validation HR@10 " << result.best_hr << "), checkpoint "
            << ckpt_path.string() << '\n';
  return kOk;
}

// ---- shared loader for evaluate / export ----

Trainer restore(const std::string& data_dir, const std::string& checkpoint, const PreparedData& data) {
  auto j = Trainer::read_checkpoint(checkpoint);
  auto cfg = TrainConfig::from_json(j.at("config"));
  const std::string want = j.value("data_hash", std::string{});
  if (!want.empty() && want != prepared_hash(data_dir))
    log::warn("checkpoint was trained on a different prepared dataset (hash " + want + ")");
  Trainer t(data, cfg);
  t.load_checkpoint(j);
  return t;
}

struct EvalArgs {
  std::string data, checkpoint, out, per_user;
  bool full_rank = false;
  std::size_t negatives = 99, k = 10;
  std::uint64_t seed = 2022;
};

int run_evaluate(const EvalArgs& a) {
  auto data = read_prepared(a.data);
  auto t = restore(a.data, a.checkpoint, data);
  EvalProtocol p;
  p.full_rank = a.full_rank;
  p.num_negatives = a.negatives;
  p.k = a.k;
  p.seed = a.seed;
  auto r = evaluate(t.snapshot(), data.store, data.split, p);
  json j = r.to_json();
  j["data_hash"] = prepared_hash(a.data);
  j["checkpoint"] = a.checkpoint;
  if (a.out.empty()) std::cout << j.dump(2) << '\n';
  else write_json(a.out, j);
  if (!a.per_user.empty()) {
    std::ofstream out(a.per_user);
    if (!out) throw DataError("cannot write " + a.per_user);
    out << "user,item,rank,hr,ndcg\n";
    out.precision(17);
    for (const auto& u : r.per_user)
      out << data.store.user_ids[u.user] << ',' << data.store.item_ids[u.positive] << ',' << u.rank << ',' << u.hr << ','
          << u.ndcg << '\n';
  }
  return kOk;
}

int run_export_weights(const std::string& data_dir, const std::string& ckpt, const std::string& out_path) {
  auto data = read_prepared(data_dir);
  auto t = restore(data_dir, ckpt, data);
  Tensor w = t.user_pair_weights();
  std::ofstream out(out_path);
  if (!out) throw DataError("cannot write " + out_path);
  out << "user,pair,weight\n";
  out.precision(17);
  for (std::size_t u = 0; u < w.rows(); ++u)
    for (std::size_t p = 0; p < w.cols(); ++p) out << data.store.user_ids[u] << ',' << t.pair_names()[p] << ',' << w(u, p) << '\n';
  return kOk;
}

// One CSV: entity_type,id,behavior,dim0..; behavior "all" is the final
// embedding, the others the per-behavior views.
int run_export_embeddings(const std::string& data_dir, const std::string& ckpt, const std::string& out_path) {
  auto data = read_prepared(data_dir);
  auto t = restore(data_dir, ckpt, data);
  auto s = t.snapshot();
  std::ofstream out(out_path);
  if (!out) throw DataError("cannot write " + out_path);
  out.precision(17);
  out << "entity_type,id,behavior";
  for (std::size_t c = 0; c < s.user.cols(); ++c) out << ",dim" << c;
  out << '\n';
  auto dump = [&](const char* type, const Tensor& m, const std::vector<std::string>& ids, const std::string& behavior) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
      out << type << ',' << ids[r] << ',' << behavior;
      for (std::size_t c = 0; c < m.cols(); ++c) out << ',' << m(r, c);
      out << '\n';
    }
  };
  const auto& names = data.store.behavior_names;
  dump("user", s.user, data.store.user_ids, "all");
  for (std::size_t k = 0; k < names.size(); ++k) dump("user", s.behavior_user[k], data.store.user_ids, names[k]);
  dump("item", s.item, data.store.item_ids, "all");
  for (std::size_t k = 0; k < names.size(); ++k) dump("item", s.behavior_item[k], data.store.item_ids, names[k]);
  std::cout << "wrote " << s.user.rows() << " users and " << s.item.rows() << " items x " << names.size() + 1
            << " views (d = " << s.user.cols() << ") to " << out_path << '\n';
  return kOk;
}

struct GradcheckArgs {
  std::uint64_t seed = 0;
  std::size_t seeds = 1;
  double tolerance = 1e-4;
  bool negative_control = false;
};

int run_gradcheck(const GradcheckArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t failed = 0, total = 0, controls_missed = 0;
  double worst = 0.0;
  auto report = [](const ad::GradCheckResult& r, std::uint64_t s, const char* status) {
    std::printf("%-6s seed %-3llu %-20s max rel err %.3e  (%zu entries)\n", status, static_cast<unsigned long long>(s),
                r.name.c_str(), r.max_rel_error, r.entries_checked);
  };
  for (std::uint64_t s = a.seed; s < a.seed + a.seeds; ++s) {
    for (const auto& r : run_gradcheck_suite(s, a.tolerance)) {
      ++total;
      worst = std::max(worst, r.max_rel_error);
      if (!r.passed) ++failed;
      report(r, s, r.passed ? "ok" : "FAIL");
    }
    if (a.negative_control) {
      // this one must fail
      auto c = negative_control_case(s);
      auto r = ad::check_gradients(c.name, c.f, c.inputs, 1e-5, a.tolerance);
      if (r.passed) ++controls_missed;
      report(r, s, r.passed ? "MISSED" : "caught");
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%zu/%zu checks passed, worst rel err %.3e, %.2f s\n", total - failed, total, worst, secs);
  if (a.negative_control) std::printf("negative control %s\n", controls_missed ? "NOT detected" : "detected");
  return failed || controls_missed ? kNumerical : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contrastive meta-weighted multi-behavior recommender"};
  app.require_subcommand(1);
  app.set_version_flag("--version", CML_VERSION);
  bool quiet = false, verbose = false;
  app.add_flag("-q,--quiet", quiet, "only warnings and errors");
  app.add_flag("-v,--verbose", verbose, "debug logging");

  PrepareArgs pa;
  auto* prep = app.add_subcommand("prepare", "filter, split and index a raw interaction log");
  prep->add_option("input", pa.input, "raw file (or directory for per-behavior-files)")->required();
  prep->add_option("-o,--out", pa.out, "output directory")->required();
  prep->add_option("--format", pa.format, "triple-tsv | per-behavior-files | retailrocket-events")->capture_default_str();
  prep->add_option("--behaviors", pa.behaviors, "comma-separated behavior order");
  prep->add_option("--target", pa.target, "target behavior name (default: last behavior)");
  prep->add_option("--min-target", pa.min_target, "drop users with fewer target interactions")->capture_default_str();
  prep->add_option("--meta-fraction", pa.meta_fraction, "share of each user's remaining target edges held for meta")
      ->capture_default_str();
  prep->add_option("--seed", pa.seed)->capture_default_str();
  prep->add_flag("--drop-aux-of-test-pair", pa.drop_aux, "also hold out auxiliary edges on each test (user, item)");

  SynthOptions so;
  std::string synth_out;
  auto* syn = app.add_subcommand("synth", "write a synthetic view/cart/buy log");
  syn->add_option("-o,--out", synth_out, "output TSV")->required();
  syn->add_option("--users", so.users)->capture_default_str();
  syn->add_option("--items", so.items)->capture_default_str();
  syn->add_option("--clusters", so.clusters)->capture_default_str();
  syn->add_option("--views-per-user", so.views_per_user)->capture_default_str();
  syn->add_option("--seed", so.seed)->capture_default_str();

  TrainArgs ta;
  ConfigFlags flags;
  auto* train = app.add_subcommand("train", "train on a prepared directory");
  train->add_option("data", ta.data, "prepared directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("-o,--out", ta.out, "run directory")->required();
  train->add_option("-c,--config", ta.config, "JSON config; flags override it")->check(CLI::ExistingFile);
  flags.attach(*train);

  EvalArgs ea;
  auto* ev = app.add_subcommand("evaluate", "leave-one-out HR@K / NDCG@K on the test split");
  ev->add_option("data", ea.data, "prepared directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("checkpoint", ea.checkpoint)->required()->check(CLI::ExistingFile);
  ev->add_option("-o,--out", ea.out, "report JSON (default: stdout)");
  ev->add_option("--per-user", ea.per_user, "per-user CSV");
  ev->add_flag("--full-rank", ea.full_rank, "rank against every unseen item");
  ev->add_option("--negatives", ea.negatives, "sampled negatives per user")->capture_default_str();
  ev->add_option("-k", ea.k)->capture_default_str();
  ev->add_option("--seed", ea.seed, "negative sampling seed")->capture_default_str();

  std::string xd, xc, xo;
  auto* xw = app.add_subcommand("export-weights", "per-user weight of every auxiliary pair as CSV");
  xw->add_option("data", xd)->required()->check(CLI::ExistingDirectory);
  xw->add_option("checkpoint", xc)->required()->check(CLI::ExistingFile);
  xw->add_option("-o,--out", xo)->required();
  auto* xe = app.add_subcommand("export-embeddings", "final and per-behavior embeddings as CSV");
  xe->add_option("data", xd)->required()->check(CLI::ExistingDirectory);
  xe->add_option("checkpoint", xc)->required()->check(CLI::ExistingFile);
  xe->add_option("-o,--out", xo, "output CSV")->required();

  GradcheckArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every op and the composite objective");
  gc->add_option("--seed", ga.seed)->capture_default_str();
  gc->add_option("--seeds", ga.seeds, "number of consecutive seeds")->capture_default_str();
  gc->add_option("--tolerance", ga.tolerance)->capture_default_str();
  gc->add_flag("--negative-control", ga.negative_control, "add a deliberately wrong backward rule");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  log::sink().min_level = verbose ? log::Level::debug : quiet ? log::Level::warn : log::Level::info;

  try {
    if (*prep) return run_prepare(pa);
    if (*syn) return run_synth(so, synth_out);
    if (*train) return run_train(ta, flags);
    if (*ev) return run_evaluate(ea);
    if (*xw) return run_export_weights(xd, xc, xo);
    if (*xe) return run_export_embeddings(xd, xc, xo);
    if (*gc) return run_gradcheck(ga);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
