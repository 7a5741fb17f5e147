#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "headmask/cli.hpp"

using namespace headmask;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

const fs::path& root() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "headmask_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::vector<std::string> tiny(std::vector<std::string> args) {
  for (const char* kv : {"d_model=16", "d_ff=32", "task_vocab=16", "task_min_len=2",
                         "task_max_len=6", "task_pairs=300", "batch_size=8", "warmup_steps=10",
                         "eval_every=5"}) {
    args.push_back("--set");
    args.push_back(kv);
  }
  return args;
}

std::string dir(const std::string& name) { return (root() / name).string(); }

// A trained tiny checkpoint shared by the analysis-command tests.
const std::string& trained() {
  static const std::string d = [] {
    const Run r = cli(tiny({"train", "--steps", "12", "--seed", "5", "--out", dir("trained")}));
    REQUIRE(r.code == 0);
    return dir("trained");
  }();
  return d;
}

int count_lines(const std::string& text) {
  return static_cast<int>(std::count(text.begin(), text.end(), '\n'));
}

}  // namespace

TEST_CASE("help and bad invocations") {
  CHECK(cli({"--help"}).code == 0);
  CHECK(cli({}).code == 2);
  CHECK(cli({"frobnicate"}).code == 2);
  CHECK(cli({"train"}).code == 2);  // --out is required
}

TEST_CASE("train writes every artifact and prints their paths") {
  const Run r = cli(tiny({"train", "--steps", "6", "--variant", "random", "--out", dir("t1")}));
  REQUIRE(r.code == 0);
  for (const char* f : {"model.manifest", "model.bin", "src.vocab", "tgt.vocab", "train_log.csv",
                        "config.txt"}) {
    CHECK(fs::exists(root() / "t1" / f));
    CHECK(r.out.find((root() / "t1" / f).string()) != std::string::npos);
  }
  const std::string cfg = slurp(root() / "t1" / "config.txt");
  CHECK(cfg.find("variant=random\n") != std::string::npos);
  CHECK(cfg.find("mask_n=3\n") != std::string::npos);
  CHECK(cfg.find("max_steps=6\n") != std::string::npos);
  CHECK(slurp(root() / "t1" / "train_log.csv").rfind("step,variant,loss,lr,dev_metric,masked_heads\n", 0) == 0);
}

TEST_CASE("training twice with one seed gives identical bytes") {
  for (const char* v : {"baseline", "impt"}) {
    REQUIRE(cli(tiny({"train", "--steps", "8", "--variant", v, "--out", dir(std::string("a_") + v)})).code == 0);
    REQUIRE(cli(tiny({"train", "--steps", "8", "--variant", v, "--out", dir(std::string("b_") + v)})).code == 0);
    for (const char* f : {"model.manifest", "model.bin", "train_log.csv", "config.txt"}) {
      CHECK(slurp(root() / (std::string("a_") + v) / f) == slurp(root() / (std::string("b_") + v) / f));
    }
  }
  REQUIRE(cli(tiny({"train", "--steps", "8", "--variant", "random", "--mask-n", "0", "--out",
                    dir("r0")})).code == 0);
  CHECK(slurp(root() / "r0" / "model.bin") == slurp(root() / "a_baseline" / "model.bin"));
}

TEST_CASE("usage errors happen before training") {
  CHECK(cli(tiny({"train", "--variant", "bogus", "--out", dir("never1")})).code == 2);
  CHECK(cli(tiny({"train", "--variant", "impt", "--mask-n", "25", "--out", dir("never2")})).code == 2);
  CHECK(cli(tiny({"train", "--mask-n", "-2", "--out", dir("never3")})).code == 2);
  CHECK_FALSE(fs::exists(root() / "never1"));
  CHECK_FALSE(fs::exists(root() / "never2"));
  CHECK_FALSE(fs::exists(root() / "never3"));

  {
    std::ofstream bad(root() / "bad.cfg");
    bad << "# comment\nlayers=2\nflux_capacitor=1\n";
  }
  const Run r = cli({"train", "--config", dir("bad.cfg"), "--out", dir("never4")});
  CHECK(r.code == 2);
  CHECK(r.err.find("flux_capacitor") != std::string::npos);
  CHECK(r.err.find(":3") != std::string::npos);
  CHECK(cli({"train", "--config", dir("missing.cfg"), "--out", dir("never5")}).code == 2);
}

TEST_CASE("config file and environment seed") {
  {
    std::ofstream cfg(root() / "run.cfg");
    cfg << "d_model=16\nd_ff=32\ntask_vocab=16\ntask_min_len=2\ntask_max_len=6\n"
           "task_pairs=300\nbatch_size=8\nmax_steps=3\nseed=4\neval_every=0\n";
  }
  REQUIRE(cli({"train", "--config", dir("run.cfg"), "--out", dir("c1")}).code == 0);
  CHECK(slurp(root() / "c1" / "config.txt").find("seed=4\n") != std::string::npos);
  ::setenv("HEADMASK_SEED", "9", 1);
  const Run r = cli({"train", "--config", dir("run.cfg"), "--out", dir("c2")});
  ::unsetenv("HEADMASK_SEED");
  REQUIRE(r.code == 0);
  CHECK(slurp(root() / "c2" / "config.txt").find("seed=9\n") != std::string::npos);
  CHECK(slurp(root() / "c1" / "model.bin") != slurp(root() / "c2" / "model.bin"));
  // The resolved config reproduces the run.
  REQUIRE(cli({"train", "--config", dir("c2/config.txt"), "--out", dir("c3")}).code == 0);
  CHECK(slurp(root() / "c2" / "model.bin") == slurp(root() / "c3" / "model.bin"));
}

TEST_CASE("numeric failure exit code") {
  const Run r = cli(tiny({"train", "--steps", "20", "--set", "lr_scale=1e30", "--out", dir("nan")}));
  CHECK(r.code == 4);
  CHECK(r.err.find("step") != std::string::npos);
}

TEST_CASE("importance, sweep and eval") {
  const std::string ck = trained();
  REQUIRE(cli({"importance", "--checkpoint", ck, "--out", dir("imp")}).code == 0);
  const std::string imp = slurp(root() / "imp" / "importance.csv");
  CHECK(count_lines(imp) == 25);
  REQUIRE(cli({"importance", "--checkpoint", ck, "--out", dir("imp2")}).code == 0);
  CHECK(slurp(root() / "imp2" / "importance.csv") == imp);

  const Run s = cli({"sweep", "--checkpoint", ck, "--importance", dir("imp/importance.csv"),
                     "--mode", "groups", "--out", dir("sw")});
  REQUIRE(s.code == 0);
  CHECK(count_lines(slurp(root() / "sw" / "sweep.csv")) == 1 + 9);
  REQUIRE(cli({"sweep", "--checkpoint", ck, "--importance", dir("imp/importance.csv"), "--mode",
               "groups,ascending,descending", "--jobs", "2", "--out", dir("sw2")}).code == 0);
  REQUIRE(cli({"sweep", "--checkpoint", ck, "--importance", dir("imp/importance.csv"), "--mode",
               "groups,ascending,descending", "--out", dir("sw3")}).code == 0);
  CHECK(count_lines(slurp(root() / "sw2" / "sweep.csv")) == 1 + 27);
  CHECK(slurp(root() / "sw2" / "sweep.csv") == slurp(root() / "sw3" / "sweep.csv"));
  CHECK(cli({"sweep", "--checkpoint", ck, "--importance", dir("imp/importance.csv"), "--mode",
             "sideways", "--out", dir("sw4")}).code == 2);

  const Run e1 = cli({"eval", "--checkpoint", ck, "--out", dir("e1")});
  const Run e2 = cli({"eval", "--checkpoint", ck, "--mask", "", "--out", dir("e2")});
  REQUIRE(e1.code == 0);
  REQUIRE(e2.code == 0);
  CHECK(e1.out.find("token_accuracy=") != std::string::npos);
  CHECK(e1.out.find("bleu=") != std::string::npos);
  CHECK(slurp(root() / "e1" / "metrics.csv") == slurp(root() / "e2" / "metrics.csv"));
  const Run e3 = cli({"eval", "--checkpoint", ck, "--mask", "0;5;23", "--no-bleu", "--out", dir("e3")});
  REQUIRE(e3.code == 0);
  CHECK(slurp(root() / "e3" / "metrics.csv").find("0;5;23,") != std::string::npos);
  CHECK(cli({"eval", "--checkpoint", ck, "--mask", "24", "--out", dir("e4")}).code == 2);
  CHECK(cli({"eval", "--checkpoint", ck, "--split", "nope", "--out", dir("e5")}).code == 2);
}

TEST_CASE("checkpoint problems are data errors") {
  const std::string ck = trained();
  CHECK(cli({"eval", "--checkpoint", dir("does_not_exist"), "--out", dir("x")}).code == 3);
  fs::create_directories(root() / "broken");
  for (const char* f : {"model.manifest", "model.bin", "src.vocab", "tgt.vocab"}) {
    fs::copy_file(fs::path(ck) / f, root() / "broken" / f, fs::copy_options::overwrite_existing);
  }
  std::string cfg = slurp(fs::path(ck) / "config.txt");
  cfg.replace(cfg.find("d_ff=32"), 7, "d_ff=48");
  {
    std::ofstream out(root() / "broken" / "config.txt");
    out << cfg;
  }
  const Run r = cli({"eval", "--checkpoint", dir("broken"), "--out", dir("x")});
  CHECK(r.code == 3);
  CHECK(r.err.find("does not match") != std::string::npos);

  // Importance file from a differently shaped model.
  {
    std::ofstream out(root() / "small_importance.csv");
    out << "flat_id,attn_type,layer,head,importance\n0,enc_self,0,0,1\n1,dec_self,0,0,1\n2,enc_dec,0,0,1\n";
  }
  CHECK(cli({"sweep", "--checkpoint", ck, "--importance", dir("small_importance.csv"), "--out",
             dir("x")}).code == 3);
}

TEST_CASE("stats and plot") {
  const std::string ck = trained();
  REQUIRE(cli({"importance", "--checkpoint", ck, "--out", dir("st_a")}).code == 0);
  REQUIRE(cli({"importance", "--checkpoint", ck, "--split", "test", "--out", dir("st_b")}).code == 0);
  const Run one = cli({"stats", dir("st_a/importance.csv"), "--out", dir("stats")});
  CHECK(one.code == 2);
  const Run r = cli({"stats", dir("st_a/importance.csv"), dir("st_b/importance.csv"), "--out", dir("stats")});
  REQUIRE(r.code == 0);
  const std::string stats = slurp(root() / "stats" / "stats.csv");
  CHECK(stats.rfind("model_tag,mean,variance,max\nst_a,", 0) == 0);
  CHECK(stats.find("\nst_b,") != std::string::npos);
  CHECK(count_lines(slurp(root() / "stats" / "histogram.csv")) == 1 + 40);
  REQUIRE(cli({"stats", dir("st_a/importance.csv"), dir("st_b/importance.csv"), "--tags", "dev,test",
               "--bins", "5", "--out", dir("stats2")}).code == 0);
  CHECK(slurp(root() / "stats2" / "stats.csv").find("\ndev,") != std::string::npos);
  CHECK(count_lines(slurp(root() / "stats2" / "histogram.csv")) == 1 + 10);

  REQUIRE(cli({"sweep", "--checkpoint", ck, "--importance", dir("st_a/importance.csv"), "--mode",
               "ascending,descending", "--out", dir("st_a")}).code == 0);
  const Run p = cli({"plot", dir("st_a/sweep.csv"), dir("stats/stats.csv"), dir("stats/histogram.csv"),
                     dir("st_a/importance.csv"), ck + "/train_log.csv", "--out", dir("plots")});
  REQUIRE(p.code == 0);
  for (const char* f : {"sweep.svg", "stats.svg", "histogram.svg", "importance.svg", "train_log.svg"}) {
    const std::string svg = slurp(root() / "plots" / f);
    CHECK(svg.rfind("<svg", 0) == 0);
    CHECK(svg.find("</svg>") != std::string::npos);
  }
  const std::string first = slurp(root() / "plots" / "sweep.svg");
  REQUIRE(cli({"plot", dir("st_a/sweep.csv"), "--out", dir("plots")}).code == 0);
  CHECK(slurp(root() / "plots" / "sweep.svg") == first);
  CHECK(cli({"plot", ck + "/config.txt", "--out", dir("plots")}).code == 3);
}

TEST_CASE("heads list") {
  const Run r = cli({"heads", "list"});
  REQUIRE(r.code == 0);
  CHECK(count_lines(r.out) == 25);
  CHECK(r.out.rfind("flat_id,attn_type,layer,head\n0,enc_self,0,0\n", 0) == 0);
  CHECK(r.out.find("\n23,enc_dec,1,3\n") != std::string::npos);
  const Run big = cli({"heads", "--set", "layers=6", "--set", "heads_per_layer=8", "--set", "d_model=64"});
  CHECK(count_lines(big.out) == 145);
  CHECK(cli({"heads", "sideways"}).code == 2);
}

TEST_CASE("generated data round trips through training") {
  REQUIRE(cli(tiny({"gen-data", "--seed", "5", "--out", dir("data")})).code == 0);
  for (const char* f : {"train.tsv", "dev.tsv", "test.tsv", "config.txt"}) CHECK(fs::exists(root() / "data" / f));
  const std::string first = slurp(root() / "data" / "train.tsv");
  REQUIRE(cli(tiny({"gen-data", "--seed", "5", "--out", dir("data")})).code == 0);
  CHECK(slurp(root() / "data" / "train.tsv") == first);

  REQUIRE(cli(tiny({"train", "--steps", "12", "--seed", "5", "--data", dir("data"), "--out", dir("from_tsv")})).code == 0);
  CHECK(slurp(root() / "from_tsv" / "tgt.vocab") == slurp(fs::path(trained()) / "tgt.vocab"));
  CHECK(cli({"eval", "--checkpoint", dir("from_tsv"), "--out", dir("from_tsv")}).code == 0);
  // A checkpoint evaluated on data with a different vocabulary is refused.
  {
    std::ofstream other(root() / "other.tsv");
    other << "x y\tz\n";
  }
  CHECK(cli({"eval", "--checkpoint", dir("from_tsv"), "--data", dir("other.tsv"), "--split", "train",
             "--out", dir("x")}).code == 3);
}
