#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "bess/config.hpp"
#include "bess/inference.hpp"
#include "bess/kg_data.hpp"

namespace fs = std::filesystem;

namespace bess {
namespace {

struct Result {
  int code = 0;
  std::string out;  // stdout and stderr, merged
};

Result run(const std::string& args, const std::string& env = "") {
  const auto cmd = env + " " KGE_BESS_EXE " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  char buf[4096];
  while (auto n = fread(buf, 1, sizeof buf, pipe)) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

void write(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "bess_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    const auto r = run("ingest --synthetic --entities 120 --relations 4 --triple-count 2000 --feature-dim 4 "
                       "--holdout 50 --seed 2 --out " + (dir_ / "data").string());
    ASSERT_EQ(r.code, 0) << r.out;
    write(dir_ / "run.cfg", "data.graph = " + (dir_ / "data/train.kgt").string() +
                                "\ndata.features = " + (dir_ / "data/features.kgf").string() +
                                "\ndata.valid = " + (dir_ / "data/valid.tsv").string() +
                                "\nmodel.feature_dim = 4\nmodel.embedding_dim = 8\n"
                                "sampler.micro_batch_size = 16\nsampler.negative_count = 16\n"
                                "schedule.total_steps = 100\nschedule.eval_interval = 100\nschedule.lr = 0.01\n"
                                "runtime.workers = 2\nruntime.checkpoint_interval = 40\n"
                                "eval.train_samples = 50\n");
  }
  static fs::path dir_;
  fs::path p(const std::string& name) const { return dir_ / name; }
};
fs::path Cli::dir_;

TEST_F(Cli, IngestWritesReadableOutputs) {
  const auto g = ingest_triples(p("data/train.kgt").string());
  EXPECT_EQ(g.entity_count, 120U);
  EXPECT_EQ(g.triples.size(), 1950U);
  EXPECT_EQ(read_queries(p("data/valid.tsv").string()).size(), 50U);
  EXPECT_EQ(read_features(p("data/features.kgf").string()).cols(), 4U);
}

TEST_F(Cli, StatsRowCountEqualsRelationCount) {
  const auto r = run("stats --graph " + p("data/train.kgt").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 1 + 4);
}

TEST_F(Cli, TrainWritesLogAndResumeIsBitIdentical) {
  auto r = run("train --config " + p("run.cfg").string() + " --out " + p("full").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(slurp(p("full/metrics.log")).find("step=100 "), std::string::npos);
  EXPECT_EQ(parse_run_config(slurp(p("full/config.txt"))), load_run_config(p("run.cfg").string()));

  // Interrupt at step 40, then resume to the end.
  r = run("train --config " + p("run.cfg").string() + " --out " + p("part").string() + " --stop-after 40");
  ASSERT_EQ(r.code, 0) << r.out;
  r = run("train --config " + p("run.cfg").string() + " --out " + p("resumed").string() + " --resume " +
          p("part/checkpoint.kgc").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(slurp(p("resumed/checkpoint.kgc")), slurp(p("full/checkpoint.kgc")));
}

TEST_F(Cli, PredictEvaluateEnsemble) {
  ASSERT_EQ(run("train --config " + p("run.cfg").string() + " --out " + p("m").string()).code, 0);
  auto r = run("predict --config " + p("run.cfg").string() + " --checkpoint " + p("m/checkpoint.kgc").string() +
               " --queries " + p("data/valid.tsv").string() + " --out " + p("pred.tsv").string());
  ASSERT_EQ(r.code, 0) << r.out;
  const auto pred = import_predictions(p("pred.tsv").string());
  ASSERT_EQ(pred.size(), 50U);
  EXPECT_EQ(pred[0].items.size(), 100U);

  r = run("ensemble --predictions " + p("pred.tsv").string() + " --out " + p("fused.tsv").string());
  ASSERT_EQ(r.code, 0) << r.out;
  const auto fused = import_predictions(p("fused.tsv").string());
  for (std::size_t q = 0; q < pred.size(); ++q) {
    ASSERT_EQ(fused[q].items.size(), 10U);
    for (std::size_t k = 0; k < 10; ++k) EXPECT_EQ(fused[q].items[k].entity, pred[q].items[k].entity);
  }
}

TEST_F(Cli, EvaluatePerfectPredictionsPrintsOne) {
  write(p("truth.tsv"), "query_id\thead\trelation\ttail\n0\t1\t0\t7\n1\t2\t1\t9\n");
  write(p("perfect.tsv"), "query_id\trank\tentity_id\tscore\n0\t1\t7\t1\n0\t2\t3\t0.5\n1\t1\t9\t2\n");
  const auto r = run("evaluate --predictions " + p("perfect.tsv").string() + " --queries " + p("truth.tsv").string());
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "MRR 1.000000\n");
}

TEST_F(Cli, ErrorsAreSingleLinesWithCategory) {
  write(p("typo.cfg"), "model.embeding_dim = 8\n");
  const std::pair<std::string, std::string> cases[] = {
      {"train --config " + p("typo.cfg").string(), "error:config: line 1: unknown key"},
      {"train --config " + p("run.cfg").string() + " --workers 3 --out " + p("w3").string(), "error:config:"},
      {"evaluate --predictions /nonexistent --queries /nonexistent", "error:"},
      {"bogus-command", "error:usage:"},
  };
  for (const auto& [args, prefix] : cases) {
    const auto r = run(args);
    EXPECT_NE(r.code, 0) << args;
    EXPECT_EQ(r.out.rfind(prefix, 0), 0U) << r.out;
    EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 1) << r.out;
  }
  const auto r = run("evaluate --predictions x --queries y", "KGE_LOG_LEVEL=shout");
  EXPECT_EQ(r.out.rfind("error:config: KGE_LOG_LEVEL", 0), 0U) << r.out;
}

TEST_F(Cli, InputsAreNotModified) {
  const auto before = slurp(p("data/train.kgt"));
  ASSERT_EQ(run("partition-check --graph " + p("data/train.kgt").string() + " --workers 4").code, 0);
  ASSERT_EQ(run("stats --graph " + p("data/train.kgt").string()).code, 0);
  EXPECT_EQ(slurp(p("data/train.kgt")), before);
}

TEST_F(Cli, SweepWritesOneConfigPerPoint) {
  write(p("grid.cfg"), "model.embedding_dim = 8, 16\nschedule.lr = 0.001, 0.002, 0.003\n");
  const auto r = run("sweep --config " + p("grid.cfg").string() + " --out " + p("sweep").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(p("sweep/cfg_0005.txt")));
  EXPECT_EQ(load_run_config(p("sweep/cfg_0005.txt").string()).schedule.initial_lr, 0.003);
  const auto manifest = slurp(p("sweep/manifest.tsv"));
  EXPECT_EQ(std::count(manifest.begin(), manifest.end(), '\n'), 7);
}

}  // namespace
}  // namespace bess
