#include <gtest/gtest.h>

#include <map>
#include <set>

#include "quicktune/optimizer.hpp"
#include "test_util.hpp"

using namespace quicktune;

namespace {

const TabularBenchmark &bench() {
  static const TabularBenchmark b = [] {
    GeneratorConfig g;
    g.n_clusters = 2;
    g.n_datasets = 3;
    g.n_models = 4;
    g.configs_per_dataset = 25;
    g.max_epoch = 8;
    g.seed = 11;
    return TabularBenchmark(generate(g, qt_test::default_space()));
  }();
  return b;
}

double full_cost_median(std::size_t d) {
  std::vector<double> c;
  for (const auto &curve : bench().metadataset().datasets[d].cost) c.push_back(curve.back());
  std::sort(c.begin(), c.end());
  return c[c.size() / 2];
}

TuneConfig quick(std::uint64_t seed, double budget) {
  TuneConfig c;
  c.budget = budget;
  c.seed = seed;
  c.fit_steps = 10;
  c.lr = 1e-3;
  c.measure_overhead = false;
  return c;
}

/// Replays a trace against the table: losses, costs, clock and incumbent.
void check_trace(const RunTrace &t, const BenchView &v, int dt) {
  std::map<PipelineId, int> last;
  std::map<PipelineId, double> last_cost;
  double clock = 0.0, best = 1e300;
  for (const auto &s : t.steps) {
    EXPECT_EQ(s.epoch, last[s.pipeline] + dt) << "pipeline " << s.pipeline;
    const auto q = v.query(s.pipeline, s.epoch);
    EXPECT_EQ(s.loss, q.loss);
    EXPECT_EQ(s.step_cost, q.cum_cost - last_cost[s.pipeline]);
    clock += s.step_cost;
    best = std::min(best, s.loss);
    EXPECT_EQ(s.cum_time, clock);
    EXPECT_EQ(s.incumbent, best);
    last[s.pipeline] = s.epoch;
    last_cost[s.pipeline] = q.cum_cost;
  }
}

} // namespace

TEST(SelectPoints, LatestPerPipelineThenNewest) {
  History h(1);
  h.append({0, 1, 0.9, 1}); // 0
  h.append({0, 2, 0.8, 2}); // 1
  h.append({1, 1, 0.7, 1}); // 2
  h.append({2, 1, 0.6, 1}); // 3
  h.append({0, 3, 0.5, 3}); // 4
  h.append({1, 2, 0.4, 2}); // 5
  EXPECT_EQ(select_points(h, 0), (std::vector<std::size_t>{0, 1, 2, 3, 4, 5}));
  EXPECT_EQ(select_points(h, 10).size(), 6u);
  // Latest of 1, 0, 2 are 5, 4, 3; then newest remaining is 2.
  EXPECT_EQ(select_points(h, 4), (std::vector<std::size_t>{2, 3, 4, 5}));
  EXPECT_EQ(select_points(h, 2), (std::vector<std::size_t>{4, 5}));
}

TEST(InitialPipeline, SeededUniformDraw) {
  EXPECT_EQ(initial_pipeline(25, 3), initial_pipeline(25, 3));
  std::set<PipelineId> seen;
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto p = initial_pipeline(25, s);
    EXPECT_LT(p, 25u);
    seen.insert(p);
  }
  EXPECT_GT(seen.size(), 20u);
}

TEST(QuickTune, RespectsBudgetAndReplaysAgainstTable) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const auto v = bench().view(seed % 3);
    const double budget = 4.0 * full_cost_median(seed % 3);
    const auto t = quick_tune(v, quick(seed, budget));
    ASSERT_FALSE(t.steps.empty());
    EXPECT_TRUE(t.error.empty()) << t.error;
    EXPECT_EQ(t.steps.front().pipeline, initial_pipeline(v.pipeline_count(), seed));
    EXPECT_EQ(t.steps.front().epoch, 1);
    for (std::size_t i = 0; i + 1 < t.steps.size(); ++i) EXPECT_LE(t.steps[i].cum_time, budget);
    EXPECT_LE(t.sim_seconds(), budget + t.steps.back().step_cost);
    EXPECT_GT(t.sim_seconds(), budget);
    check_trace(t, v, 1);
  }
}

TEST(QuickTune, ReturnsMinimumObservedLoss) {
  const auto v = bench().view(1);
  const auto t = quick_tune(v, quick(4, 3.0 * full_cost_median(1)));
  ASSERT_TRUE(t.best.has_value());
  std::size_t first = 0;
  for (std::size_t i = 0; i < t.steps.size(); ++i)
    if (t.steps[i].loss < t.steps[first].loss) first = i;
  EXPECT_EQ(t.best->loss, t.steps[first].loss);
  EXPECT_EQ(t.best->pipeline_id, t.steps[first].pipeline);
  EXPECT_EQ(t.best->epoch, t.steps[first].epoch);
}

TEST(QuickTune, DeterministicTraces) {
  const auto v = bench().view(0);
  const auto cfg = quick(5, 3.0 * full_cost_median(0));
  EXPECT_EQ(trace_to_json(quick_tune(v, cfg)).dump(), trace_to_json(quick_tune(v, cfg)).dump());
}

TEST(QuickTune, EpochStepAndFullFidelity) {
  const auto v = bench().view(2);
  auto cfg = quick(6, 3.0 * full_cost_median(2));
  cfg.delta_t = 2;
  const auto t = quick_tune(v, cfg);
  EXPECT_EQ(t.steps.front().epoch, 2);
  check_trace(t, v, 2);

  cfg.full_fidelity = true;
  const auto g = quick_tune(v, cfg);
  for (const auto &s : g.steps) EXPECT_EQ(s.epoch, v.max_epoch());
  check_trace(g, v, v.max_epoch());
  std::set<PipelineId> ids;
  for (const auto &s : g.steps) EXPECT_TRUE(ids.insert(s.pipeline).second);
}

TEST(QuickTune, ExhaustsSmallSearchSpace) {
  MetaDataset md;
  md.space = qt_test::small_space();
  md.max_epoch = 3;
  for (int i = 0; i < 3; ++i) {
    Pipeline p;
    p.model_index = static_cast<std::size_t>(i % 2);
    p.values = {1e-4 * (i + 1), 0.0, 0.0, std::nullopt};
    md.pipelines.push_back(p);
  }
  DatasetTable d;
  d.name = "x";
  d.meta = {1000, 32, 3, 10};
  d.loss = {{0.9, 0.8, 0.7}, {0.6, 0.5, 0.4}, {0.95, 0.9, 0.85}};
  d.cost = {{1, 2, 3}, {2, 4, 6}, {1, 2, 3}};
  md.datasets.push_back(d);
  const TabularBenchmark b(md);
  const auto t = quick_tune(b.view(0), quick(0, 1e6));
  EXPECT_TRUE(t.exhausted);
  EXPECT_EQ(t.steps.size(), 9u);
  EXPECT_EQ(t.sim_seconds(), 12.0);
  EXPECT_EQ(t.best->loss, 0.4);
  check_trace(t, b.view(0), 1);
}

TEST(QuickTune, MetaFlagControlsCheckpointUse) {
  const auto v = bench().view(0);
  auto cfg = quick(7, 2.0 * full_cost_median(0));
  // The wrong shape would throw if it were read.
  const MetaCheckpoint wrong(3, 1, 2, 0);
  EXPECT_EQ(trace_to_json(quick_tune(v, cfg, &wrong)).dump(), trace_to_json(quick_tune(v, cfg)).dump());
  cfg.use_meta = true;
  EXPECT_THROW(quick_tune(v, cfg), ValidationError);
  EXPECT_THROW(quick_tune(v, cfg, &wrong), ValidationError);

  const MetaCheckpoint ck(v.encodings()[0].features.size(), v.space().hub().size(), v.max_epoch(), 9);
  const auto t = quick_tune(v, cfg, &ck);
  EXPECT_TRUE(t.error.empty());
  check_trace(t, v, 1);
}

TEST(QuickTune, RejectsBadConfig) {
  const auto v = bench().view(0);
  EXPECT_THROW(quick_tune(v, quick(0, 0.0)), ValidationError);
  auto c = quick(0, 10.0);
  c.delta_t = 9;
  EXPECT_THROW(quick_tune(v, c), ValidationError);
}

TEST(Recorder, OverheadCountsOnlyWhenAsked) {
  const auto v = bench().view(0);
  RunRecorder plain(v, 5.0, 1, false), counted(v, 5.0, 1, true);
  for (auto *r : {&plain, &counted}) {
    r->evaluate(0, 1);
    r->add_overhead(100.0);
  }
  EXPECT_TRUE(plain.budget_left() == (plain.elapsed() <= 5.0));
  EXPECT_EQ(plain.elapsed(), v.query(0, 1).cum_cost);
  EXPECT_EQ(counted.elapsed(), v.query(0, 1).cum_cost + 100.0);
  EXPECT_FALSE(counted.budget_left());
  EXPECT_THROW(plain.evaluate(0, 3), ValidationError);
}

TEST(Trace, JsonRoundTrip) {
  const auto v = bench().view(1);
  auto t = quick_tune(v, quick(8, 2.0 * full_cost_median(1)));
  t.error = "boom";
  const auto j = trace_to_json(t);
  const auto back = trace_from_json(j);
  EXPECT_EQ(back.steps, t.steps);
  EXPECT_EQ(back.best->loss, t.best->loss);
  EXPECT_EQ(back.error, "boom");
  EXPECT_EQ(trace_to_json(back).dump(), j.dump());
  const auto curve = incumbent_curve(t);
  ASSERT_EQ(curve.size(), t.steps.size());
  EXPECT_EQ(curve.back().second, t.best->loss);
  EXPECT_THROW(incumbent_curve(RunTrace{}), EmptyHistoryError);
}
