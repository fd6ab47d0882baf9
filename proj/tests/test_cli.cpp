#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "cml/data.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run(const std::string& args) {
  const int st = std::system((std::string(CML_CLI_PATH) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string slurp(const fs::path& p) { return cml::read_file(p); }

std::size_t lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string l; std::getline(in, l);) ++n;
  return n;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / ("cml_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    ASSERT_EQ(run("synth --users 60 --items 90 --seed 3 -o " + p("raw.tsv")), 0);
    ASSERT_EQ(run("prepare " + p("raw.tsv") + " -o " + p("prep")), 0);
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }
  static std::string p(const std::string& rel) { return (dir_ / rel).string(); }
  static std::string quick() { return " --epochs 1 --dim 8 --layers 1 --train-batch 64 --meta-batch 32 --cl-negatives 16 --lr-cycle 4"; }

  static fs::path dir_;
};

fs::path Cli::dir_;

}  // namespace

TEST_F(Cli, PrepareIsByteIdenticalOnRerun) {
  ASSERT_EQ(run("prepare " + p("raw.tsv") + " -o " + p("prep2")), 0);
  for (const char* f : {"manifest.json", "users.txt", "items.txt", "train.tsv", "meta.tsv", "test.tsv"})
    EXPECT_EQ(slurp(dir_ / "prep" / f), slurp(dir_ / "prep2" / f)) << f;
  auto m = json::parse(slurp(dir_ / "prep" / "manifest.json"));
  EXPECT_EQ(m["behaviors"].size(), 3u);
  EXPECT_EQ(m["min_target"], 3);
}

TEST_F(Cli, MinTargetFilterDropsLightUsers) {
  ASSERT_EQ(run("prepare " + p("raw.tsv") + " -o " + p("prep_hi") + " --min-target 6"), 0);
  auto lo = cml::read_prepared(dir_ / "prep");
  auto hi = cml::read_prepared(dir_ / "prep_hi");
  EXPECT_LT(hi.store.num_users(), lo.store.num_users());
  std::vector<std::size_t> count(hi.store.num_users(), 0);
  for (const auto& t : hi.store.triples) count[t.user] += t.behavior == hi.store.target;
  for (std::size_t c : count) EXPECT_GE(c, 6u);
}

TEST_F(Cli, FlagsOverrideConfigFile) {
  std::ofstream(p("cfg.json")) << R"({"dim": 12, "gamma": 3.5, "epochs": 1, "layers": 1, "train_batch": 64})";
  ASSERT_EQ(run("train " + p("prep") + " -o " + p("run_cfg") + " -c " + p("cfg.json") + " --dim 6"), 0);
  auto m = json::parse(slurp(dir_ / "run_cfg" / "run_manifest.json"));
  EXPECT_EQ(m["config"]["dim"], 6);
  EXPECT_EQ(m["config"]["gamma"], 3.5);
  EXPECT_EQ(m["config"]["layers"], 1);
  EXPECT_EQ(m["data_hash"], cml::prepared_hash(dir_ / "prep"));
  EXPECT_EQ(lines(dir_ / "run_cfg" / "metrics.jsonl"), 1u);
  auto e = json::parse(slurp(dir_ / "run_cfg" / "metrics.jsonl"));
  for (const char* k : {"epoch", "l_bpr", "l_cl", "omega", "lr", "hr10", "ndcg10"}) EXPECT_TRUE(e.contains(k)) << k;
  EXPECT_EQ(e["run_hash"], m["run_hash"]);
}

TEST_F(Cli, AblationsAndExports) {
  for (const char* a : {"clf", "mcn", "mke"}) {
    const std::string out = p(std::string("run_") + a);
    ASSERT_EQ(run("train " + p("prep") + " -o " + out + quick() + " --ablate " + a), 0) << a;
    auto m = json::parse(slurp(fs::path(out) / "run_manifest.json"));
    EXPECT_EQ(m["config"]["ablate"], a);
  }
  auto e = json::parse(slurp(dir_ / "run_clf" / "metrics.jsonl"));
  EXPECT_TRUE(e["l_cl"].empty());

  ASSERT_EQ(run("train " + p("prep") + " -o " + p("run") + quick() + " --raw-adjacency --bpr-all-behaviors"), 0);
  auto m = json::parse(slurp(dir_ / "run" / "run_manifest.json"));
  EXPECT_EQ(m["config"]["normalize"], false);
  EXPECT_EQ(m["config"]["bpr_all_behaviors"], true);

  const std::string ck = p("run/checkpoint.cbor");
  ASSERT_EQ(run("export-weights " + p("prep") + " " + ck + " -o " + p("w.csv")), 0);
  const auto d = cml::read_prepared(dir_ / "prep");
  EXPECT_EQ(lines(dir_ / "w.csv"), 1 + d.store.num_users() * 2);
  std::ifstream w(p("w.csv"));
  std::string header;
  std::getline(w, header);
  EXPECT_EQ(header, "user,pair,weight");

  ASSERT_EQ(run("export-embeddings " + p("prep") + " " + ck + " -o " + p("emb.csv")), 0);
  EXPECT_EQ(lines(dir_ / "emb.csv"), 1 + 4 * (d.store.num_users() + d.store.num_items()));
  std::ifstream ef(p("emb.csv"));
  std::getline(ef, header);
  EXPECT_EQ(header, "entity_type,id,behavior,dim0,dim1,dim2,dim3,dim4,dim5,dim6,dim7");
  std::string first;
  std::getline(ef, first);
  EXPECT_EQ(first.rfind("user," + d.store.user_ids[0] + ",all,", 0), 0u);

  ASSERT_EQ(run("evaluate " + p("prep") + " " + ck + " -o " + p("r.json") + " --full-rank"), 0);
  auto r = json::parse(slurp(dir_ / "r.json"));
  EXPECT_EQ(r["protocol"], "full-rank");
  EXPECT_LE(r["ndcg"].get<double>(), r["hr"].get<double>());
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("--version"), 0);
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("train " + p("prep") + " -o " + p("x") + " --no-such-flag 1"), 1);
  EXPECT_EQ(run("train " + p("prep") + " -o " + p("x") + " --temperature 0"), 1);
  EXPECT_EQ(run("train " + p("prep") + " -o " + p("x") + " --ablate nope"), 1);
  EXPECT_EQ(run("train " + p("prep") + " -o " + p("x") + " --dim abc"), 1);
  std::ofstream(p("bad.json")) << R"({"dimension": 4})";
  EXPECT_EQ(run("train " + p("prep") + " -o " + p("x") + " -c " + p("bad.json")), 1);
  EXPECT_EQ(run("prepare " + p("missing.tsv") + " -o " + p("y")), 2);
  EXPECT_EQ(run("evaluate " + p("raw.tsv") + " " + p("raw.tsv")), 1);  // not a directory
  EXPECT_EQ(run("evaluate " + dir_.string() + " " + p("raw.tsv")), 2);
  EXPECT_EQ(run("gradcheck --tolerance 0"), 3);
  EXPECT_EQ(run("gradcheck --negative-control"), 0);
}
