#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <sstream>

#include "quicktune/benchtab.hpp"
#include "test_util.hpp"

using namespace quicktune;

namespace {

std::vector<ModelInfo> brute_force_front(const std::vector<ModelInfo> &models) {
  std::vector<ModelInfo> out;
  for (const auto &m : models) {
    bool dominated = false;
    for (const auto &o : models) {
      if (o.upstream_accuracy >= m.upstream_accuracy && o.param_count <= m.param_count &&
          (o.upstream_accuracy > m.upstream_accuracy || o.param_count < m.param_count)) {
        dominated = true;
      }
    }
    if (!dominated) out.push_back(m);
  }
  return out;
}

bool by_name(const ModelInfo &a, const ModelInfo &b) { return a.name < b.name; }

std::string slurp(const std::filesystem::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::filesystem::path &p, const std::string &s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

/// One dataset, one pipeline, two epochs.
MetaDataset tiny() {
  MetaDataset md;
  md.space = qt_test::small_space();
  md.max_epoch = 2;
  Pipeline p;
  p.model_index = 1;
  p.values = {1e-3, 1.0, 1.0, 0.0};
  md.pipelines.push_back(p);
  DatasetTable d;
  d.name = "toy";
  d.meta = {1000, 32, 3, 10};
  d.loss = {{0.75, 0.5}};
  d.cost = {{2.5, 5.0}};
  md.datasets.push_back(d);
  return md;
}

GeneratorConfig small_gen(std::uint64_t seed) {
  GeneratorConfig g;
  g.n_clusters = 3;
  g.n_datasets = 9;
  g.n_models = 6;
  g.configs_per_dataset = 40;
  g.max_epoch = 12;
  g.seed = seed;
  return g;
}

} // namespace

TEST(Pareto, MatchesBruteForceOnFuzzedHubs) {
  Rng rng = substream(1, "pareto");
  for (int round = 0; round < 200; ++round) {
    const std::size_t n = 1 + uniform_index(rng, 100);
    std::vector<ModelInfo> models;
    for (std::size_t i = 0; i < n; ++i) {
      // Coarse grids force ties on both axes.
      models.push_back({"m" + std::to_string(i), 1.0 + static_cast<double>(uniform_index(rng, 20)),
                        70.0 + 0.5 * static_cast<double>(uniform_index(rng, 30))});
    }
    auto got = pareto_hub(models);
    for (std::size_t i = 1; i < got.size(); ++i) {
      EXPECT_GE(got[i - 1].upstream_accuracy, got[i].upstream_accuracy);
    }
    auto want = brute_force_front(models);
    std::sort(got.begin(), got.end(), by_name);
    std::sort(want.begin(), want.end(), by_name);
    ASSERT_EQ(got, want) << "round " << round;
  }
  EXPECT_THROW(pareto_hub({}), ValidationError);
}

TEST(Pareto, ReferenceHubKeepsExtremes) {
  std::vector<ModelInfo> hub;
  for (const auto &j : qt_test::read_json(std::string(QT_DATA_DIR) + "/models.json")) hub.push_back(model_from_json(j));
  const auto front = pareto_hub(hub);
  auto has = [&](double size, double acc) {
    return std::any_of(front.begin(), front.end(), [&](const ModelInfo &m) {
      return m.param_count == size && m.upstream_accuracy == acc;
    });
  };
  EXPECT_TRUE(has(305.67, 90.691));
  EXPECT_TRUE(has(1.07, 73.632));
  EXPECT_EQ(front.front().upstream_accuracy, 90.691);
  EXPECT_EQ(front.back().upstream_accuracy, 73.632);
}

TEST(Pareto, DuplicatesAndDominanceEdgeCases) {
  const std::vector<ModelInfo> m{{"a", 10, 80}, {"b", 10, 80}, {"c", 10, 79}, {"d", 9, 79}, {"e", 11, 80}};
  auto front = pareto_hub(m);
  std::sort(front.begin(), front.end(), by_name);
  EXPECT_EQ(front, (std::vector<ModelInfo>{{"a", 10, 80}, {"b", 10, 80}, {"d", 9, 79}}));
}

TEST(Generator, DeterministicAndValid) {
  const auto space = qt_test::default_space();
  const auto a = generate(small_gen(3), space), b = generate(small_gen(3), space);
  EXPECT_NO_THROW(a.validate());
  const auto da = qt_test::scratch_dir("gen_a"), db = qt_test::scratch_dir("gen_b");
  save(a, da);
  save(b, db);
  for (const char *f : {"metadataset.jsonl", "metafeatures.jsonl", "manifest.json"}) {
    EXPECT_EQ(slurp(da / f), slurp(db / f)) << f;
  }
  const auto c = generate(small_gen(4), space);
  EXPECT_NE(a.datasets[0].loss, c.datasets[0].loss);
}

TEST(Generator, TableShapeAndInvariants) {
  const auto md = generate(small_gen(5), qt_test::default_space());
  EXPECT_EQ(md.space.hub().size(), 6u);
  EXPECT_EQ(md.pipelines.size(), 40u);
  ASSERT_EQ(md.datasets.size(), 9u);
  for (std::size_t di = 0; di < md.datasets.size(); ++di) {
    const auto &d = md.datasets[di];
    EXPECT_EQ(d.name, "d0" + std::to_string(di));
    EXPECT_EQ(d.cluster, static_cast<int>(di % 3));
    EXPECT_GE(d.meta.n_samples, 400);
    EXPECT_LE(d.meta.n_samples, 40000);
    EXPECT_GE(d.meta.classes, 10);
    EXPECT_LE(d.meta.classes, 100);
    for (std::size_t p = 0; p < md.pipelines.size(); ++p) {
      for (int t = 0; t < md.max_epoch; ++t) {
        EXPECT_GE(d.loss[p][t], 0.0);
        EXPECT_LE(d.loss[p][t], 1.0);
        // Cumulative cost grows linearly in epochs.
        EXPECT_NEAR(d.cost[p][t], d.cost[p][0] * (t + 1), 1e-9 * d.cost[p][t]);
      }
    }
  }
  // Datasets in a cluster share resolution and channels.
  for (std::size_t di = 3; di < md.datasets.size(); ++di) {
    EXPECT_EQ(md.datasets[di].meta.resolution, md.datasets[di - 3].meta.resolution);
    EXPECT_EQ(md.datasets[di].meta.channels, md.datasets[di - 3].meta.channels);
  }
}

TEST(Generator, ClustersShareRankings) {
  auto g = small_gen(6);
  g.n_datasets = 12;
  const auto md = generate(g, qt_test::default_space());
  auto final_losses = [&](std::size_t d) {
    std::vector<double> v;
    for (const auto &c : md.datasets[d].loss) v.push_back(c.back());
    return v;
  };
  auto corr = [](const std::vector<double> &x, const std::vector<double> &y) {
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) mx += x[i] / n, my += y[i] / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      sxy += (x[i] - mx) * (y[i] - my);
      sxx += (x[i] - mx) * (x[i] - mx);
      syy += (y[i] - my) * (y[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
  };
  double within = 0, across = 0;
  int nw = 0, na = 0;
  for (std::size_t a = 0; a < md.datasets.size(); ++a) {
    for (std::size_t b = a + 1; b < md.datasets.size(); ++b) {
      const double r = corr(final_losses(a), final_losses(b));
      if (md.datasets[a].cluster == md.datasets[b].cluster) {
        within += r;
        ++nw;
      } else {
        across += r;
        ++na;
      }
    }
  }
  EXPECT_GT(within / nw, across / na + 0.2);
}

TEST(Generator, RejectsBadConfig) {
  const auto space = qt_test::default_space();
  auto g = small_gen(0);
  g.n_models = 1000;
  EXPECT_THROW(generate(g, space), ValidationError);
  g = small_gen(0);
  g.cost_jitter = 1.0;
  EXPECT_THROW(generate(g, space), ValidationError);
  g = small_gen(0);
  g.n_datasets = 0;
  EXPECT_THROW(generate(g, space), ValidationError);
}

TEST(Format, GoldenTinyBenchmark) {
  const auto dir = qt_test::scratch_dir("golden");
  save(tiny(), dir);
  EXPECT_EQ(slurp(dir / "metadataset.jsonl"),
            R"({"dataset":"toy","pipeline":0,"model":"b","hparams":{"lr":0.001,"batch":32,"sched":"step","decay_epochs":10},"curve":[0.75,0.5],"cost":[2.5,5]})"
            "\n");
  EXPECT_EQ(slurp(dir / "metafeatures.jsonl"),
            R"({"dataset":"toy","n_samples":1000,"resolution":32,"channels":3,"classes":10})"
            "\n");
  const auto md = load(dir);
  EXPECT_EQ(md.pipelines, tiny().pipelines);
  EXPECT_EQ(md.datasets[0].loss, tiny().datasets[0].loss);
  EXPECT_EQ(md.datasets[0].cost, tiny().datasets[0].cost);
  EXPECT_EQ(md.datasets[0].meta, tiny().datasets[0].meta);
}

TEST(Format, RoundTripIsBitExact) {
  const auto md = generate(small_gen(7), qt_test::default_space());
  const auto dir = qt_test::scratch_dir("roundtrip");
  save(md, dir);
  const auto back = load(dir);
  EXPECT_EQ(back.pipelines, md.pipelines);
  ASSERT_EQ(back.datasets.size(), md.datasets.size());
  for (std::size_t d = 0; d < md.datasets.size(); ++d) {
    EXPECT_EQ(back.datasets[d].loss, md.datasets[d].loss);
    EXPECT_EQ(back.datasets[d].cost, md.datasets[d].cost);
    EXPECT_EQ(back.datasets[d].meta, md.datasets[d].meta);
    EXPECT_EQ(back.datasets[d].cluster, md.datasets[d].cluster);
  }
  EXPECT_EQ(space_to_json(back.space), space_to_json(md.space));
}

TEST(Format, ErrorsNameFileAndLine) {
  const auto md = generate(small_gen(8), qt_test::default_space());
  const auto dir = qt_test::scratch_dir("broken");
  save(md, dir);
  const auto good = slurp(dir / "metadataset.jsonl");

  auto expect_error = [&](const std::string &text, const std::string &needle) {
    spit(dir / "metadataset.jsonl", text);
    try {
      load(dir);
      ADD_FAILURE() << "no error for " << needle;
    } catch (const BenchFormatError &e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  // Drop the last record.
  expect_error(good.substr(0, good.rfind('\n', good.size() - 2) + 1), "truncated");
  // Cut mid-record.
  expect_error(good.substr(0, good.size() - 20), "metadataset.jsonl:" + std::to_string(9 * 40));
  // Garbage on line 2.
  const auto second = good.find('\n') + 1;
  expect_error(good.substr(0, second) + "{oops\n" + good.substr(good.find('\n', second) + 1), "metadataset.jsonl:2");
  // Unknown key on line 1.
  expect_error("{\"extra\":1," + good.substr(1), "metadataset.jsonl:1");
  spit(dir / "metadataset.jsonl", good);
  EXPECT_NO_THROW(load(dir));

  spit(dir / "manifest.json", "{\"format\": \"other\"}");
  EXPECT_THROW(load(dir), BenchFormatError);
}

TEST(Queries, LookupAndBounds) {
  const TabularBenchmark bench(tiny());
  EXPECT_EQ(bench.query(0, 0, 1).loss, 0.75);
  EXPECT_EQ(bench.query(0, 0, 2).cum_cost, 5.0);
  EXPECT_THROW(bench.query(0, 0, 0), std::out_of_range);
  EXPECT_THROW(bench.query(0, 0, 3), std::out_of_range);
  EXPECT_THROW(bench.query(0, 1, 1), std::out_of_range);
  EXPECT_THROW(bench.query(1, 0, 1), std::out_of_range);
  const auto v = bench.view("toy");
  EXPECT_EQ(v.name(), "toy");
  EXPECT_EQ(v.query(0, 2).loss, 0.5);
  EXPECT_EQ(v.pipeline_count(), 1u);
  EXPECT_EQ(v.max_epoch(), 2);
  EXPECT_THROW(bench.view("nope"), std::out_of_range);
  EXPECT_EQ(bench.bounds(0).y_min, 0.25);
  EXPECT_EQ(bench.bounds(0).y_max, 0.5);
  EXPECT_FALSE(bench.bounds(0).degenerate);

  auto flat = tiny();
  flat.datasets[0].loss = {{0.5, 0.5}};
  EXPECT_TRUE(TabularBenchmark(flat).bounds(0).degenerate);
}

TEST(Queries, BoundsCoverEveryCell) {
  const auto md = generate(small_gen(9), qt_test::default_space());
  const TabularBenchmark bench(md);
  for (std::size_t d = 0; d < md.datasets.size(); ++d) {
    double lo = 1.0, hi = 0.0;
    for (const auto &c : md.datasets[d].loss)
      for (double l : c) lo = std::min(lo, l), hi = std::max(hi, l);
    EXPECT_EQ(bench.bounds(d).y_max, 1.0 - lo);
    EXPECT_EQ(bench.bounds(d).y_min, 1.0 - hi);
  }
}
