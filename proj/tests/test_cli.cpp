#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "quicktune/optimizer.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Result run(const std::string &args) {
  const auto log = fs::temp_directory_path() / "qt_test_cli.log";
  const std::string cmd = std::string(QT_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

/// Small benchmark shared by the tests, generated once.
const fs::path &bench_dir() {
  static const fs::path dir = [] {
    auto d = qt_test::scratch_dir("cli_bench");
    const auto r = run("gen --datasets 4 --clusters 2 --models 3 --configs 12 --epochs 6 --seed 3 --out " +
                       d.string() + " --quiet");
    EXPECT_EQ(r.code, 0) << r.output;
    return d;
  }();
  return dir;
}

} // namespace

TEST(Cli, GenIsDeterministicAndRecordsFlags) {
  const auto other = qt_test::scratch_dir("cli_bench2");
  ASSERT_EQ(run("gen --datasets 4 --clusters 2 --models 3 --configs 12 --epochs 6 --seed 3 --out " +
                other.string() + " --quiet")
                .code,
            0);
  for (const char *f : {"metadataset.jsonl", "metafeatures.jsonl", "manifest.json"}) {
    EXPECT_EQ(slurp(bench_dir() / f), slurp(other / f)) << f;
  }
  const auto manifest = qt_test::read_json((bench_dir() / "manifest.json").string());
  const auto &flags = manifest.at("flags");
  EXPECT_EQ(flags.at("datasets"), 4);
  EXPECT_EQ(flags.at("epochs"), 6);
  EXPECT_EQ(flags.at("seed"), 3);
  EXPECT_TRUE(flags.contains("noise"));
  EXPECT_TRUE(flags.contains("cost_jitter") || flags.contains("cost-jitter"));
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  const auto r = run("gen --datasets 0 --out /tmp/qt_test_never");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("--datasets"), std::string::npos) << r.output;
  EXPECT_EQ(run("baseline --method nope --bench " + bench_dir().string() + " --dataset d00 --budget-seconds 10").code, 2);
  EXPECT_EQ(run("baseline --method random --bench " + bench_dir().string() + " --dataset nope --budget-seconds 10").code, 2);
  // Exactly one budget flag.
  EXPECT_EQ(run("baseline --method random --bench " + bench_dir().string() + " --dataset d00").code, 2);
  // Meta-learning needs a checkpoint.
  EXPECT_EQ(run("tune --bench " + bench_dir().string() + " --dataset d00 --budget-seconds 10").code, 2);
}

TEST(Cli, MissingInputsExitThree) {
  EXPECT_EQ(run("tune --ablate no-meta --bench /nonexistent/bench --dataset d00 --budget-seconds 1").code, 3);
  EXPECT_EQ(run("pareto --models /nonexistent/models.json --out /tmp/qt_test_never.json").code, 3);
}

TEST(Cli, EmptyRunsDirectoryExitsFour) {
  const auto empty = qt_test::scratch_dir("cli_empty");
  const auto r = run("report --runs " + empty.string() + " --bench " + bench_dir().string() + " --out " +
                     (empty / "rep").string());
  EXPECT_EQ(r.code, 4) << r.output;
}

TEST(Cli, EndToEndPipelineIsReproducible) {
  const auto work = qt_test::scratch_dir("cli_e2e");
  const auto ck = work / "ck.json";
  ASSERT_EQ(run("metatrain --bench " + bench_dir().string() + " --folds 4 --iters 20 --batch 8 --eval-every 5 --seed 1 --quiet --out " +
                ck.string())
                .code,
            0);
  const auto ckj = qt_test::read_json(ck.string());
  EXPECT_EQ(ckj.at("format"), "qtck-1");
  EXPECT_TRUE(ckj.contains("config"));

  const std::string common = " --bench " + bench_dir().string() + " --dataset d00 --dataset d01 --budget-median-runs 3 --seeds 2 --quiet";
  for (int pass = 0; pass < 2; ++pass) {
    const auto runs = work / ("runs" + std::to_string(pass));
    ASSERT_EQ(run("tune --checkpoint " + ck.string() + " --fit-steps 5 --jobs 2" + common + " --out " + runs.string()).code, 0);
    ASSERT_EQ(run("tune --ablate no-meta --ablate no-cost --fit-steps 5" + common + " --out " + runs.string()).code, 0);
    for (const char *m : {"random", "sha", "gp-full"}) {
      ASSERT_EQ(run(std::string("baseline --method ") + m + common + " --out " + runs.string()).code, 0) << m;
    }
    const auto rep = work / ("report" + std::to_string(pass));
    const auto r = run("report --runs " + runs.string() + " --bench " + bench_dir().string() + " --out " + rep.string());
    ASSERT_EQ(r.code, 0) << r.output;
  }
  std::size_t traces = 0;
  for (const auto &e : fs::directory_iterator(work / "runs0")) {
    ++traces;
    EXPECT_EQ(slurp(e.path()), slurp(work / "runs1" / e.path().filename())) << e.path();
    const auto t = quicktune::trace_from_json(qt_test::read_json(e.path().string()));
    ASSERT_FALSE(t.steps.empty());
    EXPECT_LE(t.sim_seconds(), t.budget + t.steps.back().step_cost);
  }
  EXPECT_EQ(traces, 5u * 2u * 2u);
  for (const char *f : {"results.csv", "ranks.csv", "regret_curves.csv"}) {
    EXPECT_EQ(slurp(work / "report0" / f), slurp(work / "report1" / f)) << f;
  }
  // The manifests differ only in the runs path.
  EXPECT_EQ(qt_test::read_json((work / "report0" / "report_manifest.json").string()).at("files"),
            qt_test::read_json((work / "report1" / "report_manifest.json").string()).at("files"));
  const auto ranks = slurp(work / "report0" / "ranks.csv");
  for (const char *m : {"qt+m+c", "qt-m-c", "random", "sha", "gp-full"}) {
    EXPECT_NE(ranks.find(std::string("\n") + m + ","), std::string::npos) << m << "\n" << ranks;
  }
}

TEST(Cli, SingleRunWritesOneFile) {
  const auto work = qt_test::scratch_dir("cli_single");
  const auto out = work / "trace.json";
  ASSERT_EQ(run("baseline --method random --bench " + bench_dir().string() +
                " --dataset d02 --budget-seconds 50 --seed 9 --quiet --out " + out.string())
                .code,
            0);
  const auto t = quicktune::trace_from_json(qt_test::read_json(out.string()));
  EXPECT_EQ(t.method, "random");
  EXPECT_EQ(t.dataset, "d02");
  EXPECT_EQ(t.seed, 9u);
  EXPECT_TRUE(t.flags.contains("cli"));

  // An existing directory collects the trace under its standard name.
  ASSERT_EQ(run("baseline --method random --bench " + bench_dir().string() +
                " --dataset d02 --budget-seconds 50 --seed 9 --quiet --out " + work.string())
                .code,
            0);
  EXPECT_EQ(slurp(work / "random__d02__s9.json"), slurp(out));
}

TEST(Cli, ParetoKeepsFrontOnly) {
  const auto work = qt_test::scratch_dir("cli_pareto");
  std::ofstream(work / "m.json") << R"([{"name": "big", "param_count": 100, "upstream_accuracy": 90},
    {"name": "worse", "param_count": 120, "upstream_accuracy": 85},
    {"name": "small", "param_count": 5, "upstream_accuracy": 70}])";
  ASSERT_EQ(run("pareto --models " + (work / "m.json").string() + " --out " + (work / "f.json").string()).code, 0);
  const auto f = qt_test::read_json((work / "f.json").string());
  ASSERT_EQ(f.size(), 2u);
  EXPECT_EQ(f[0].at("name"), "big");
  EXPECT_EQ(f[1].at("name"), "small");
}
