#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "quicktune/metalearn.hpp"
#include "test_util.hpp"

using namespace quicktune;

namespace {

MetaDataset small_bench(std::uint64_t seed, int datasets = 8) {
  GeneratorConfig g;
  g.n_clusters = 2;
  g.n_datasets = datasets;
  g.n_models = 4;
  g.configs_per_dataset = 30;
  g.max_epoch = 10;
  g.seed = seed;
  return generate(g, qt_test::default_space());
}

/// Records which datasets were read.
class Canary : public MetaTables {
public:
  explicit Canary(const MetaTables &inner) : inner_(inner) {}
  std::size_t dataset_count() const override { return inner_.dataset_count(); }
  std::size_t pipeline_count() const override { return inner_.pipeline_count(); }
  int max_epoch() const override { return inner_.max_epoch(); }
  std::size_t hub_size() const override { return inner_.hub_size(); }
  const std::vector<EncodedPipeline> &encodings() const override { return inner_.encodings(); }
  const DatasetTable &table(std::size_t d) const override {
    touched.insert(d);
    return inner_.table(d);
  }
  mutable std::set<std::size_t> touched;

private:
  const MetaTables &inner_;
};

MetaTrainConfig quick_cfg(int iters) {
  MetaTrainConfig c;
  c.iters = iters;
  c.batch = 16;
  c.eval_every = 10;
  c.patience = 3;
  c.lr = 1e-3;
  c.seed = 2;
  return c;
}

std::string slurp(const std::filesystem::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

} // namespace

TEST(Folds, SizesDifferByAtMostOne) {
  std::vector<std::size_t> ids(26);
  std::iota(ids.begin(), ids.end(), 0);
  const auto s = split_folds(ids, 5, 1);
  std::multiset<std::size_t> sizes;
  std::set<std::size_t> seen;
  for (const auto &f : s.folds) {
    sizes.insert(f.size());
    EXPECT_TRUE(std::is_sorted(f.begin(), f.end()));
    for (auto d : f) EXPECT_TRUE(seen.insert(d).second) << "dataset " << d << " in two folds";
  }
  EXPECT_EQ(sizes, (std::multiset<std::size_t>{5, 5, 5, 5, 6}));
  EXPECT_EQ(seen.size(), 26u);
}

TEST(Folds, SeededAndPartitioned) {
  std::vector<std::size_t> ids(20);
  std::iota(ids.begin(), ids.end(), 0);
  EXPECT_EQ(split_folds(ids, 4, 7).folds, split_folds(ids, 4, 7).folds);
  EXPECT_NE(split_folds(ids, 4, 7).folds, split_folds(ids, 4, 8).folds);
  const auto s = split_folds(ids, 4, 7, 1, 3);
  auto all = s.train();
  const auto v = s.val(), t = s.test();
  EXPECT_EQ(all.size(), 10u);
  all.insert(all.end(), v.begin(), v.end());
  all.insert(all.end(), t.begin(), t.end());
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, ids);
  EXPECT_EQ(s.train_folds(), (std::vector<std::size_t>{0, 2}));
  EXPECT_THROW(split_folds(ids, 0, 1), ValidationError);
  EXPECT_THROW(split_folds(ids, 21, 1), ValidationError);
  EXPECT_THROW(split_folds(ids, 4, 1, 4), ValidationError);
  EXPECT_THROW(split_folds(ids, 4, 1, 1, 1), ValidationError);
}

TEST(TableInputs, CurveHoldsEarlierLevelsOnly) {
  const auto md = small_bench(1, 2);
  const MetaDatasetTables src(md);
  const auto &d = md.datasets[0];
  const auto in = table_input(src, d, 3, 6, 2, true);
  for (int t = 1; t <= 10; ++t) {
    const double want = (t % 2 == 0 && t < 6) ? d.loss[3][t - 1] : 0.0;
    EXPECT_EQ(in.curve[t - 1], want) << t;
  }
  EXPECT_EQ(table_input(src, d, 3, 6, 2, false).curve, std::vector<double>(10, 0.0));
}

TEST(MetaTrain, ZeroIterationsReturnsInitialisation) {
  const auto md = small_bench(2);
  std::vector<std::size_t> ids(8);
  std::iota(ids.begin(), ids.end(), 0);
  const auto split = split_folds(ids, 4, 0);
  auto ck = meta_train(md, split, quick_cfg(0));
  MetaCheckpoint fresh(md.encodings()[0].features.size(), 4, 10, 2);
  EXPECT_EQ(snapshot(ck.gp.params()), snapshot(fresh.gp.params()));
  EXPECT_EQ(snapshot(ck.cost.params()), snapshot(fresh.cost.params()));
  EXPECT_EQ(ck.manifest.iters_run, 0);
  EXPECT_EQ(ck.manifest.best_val, ck.manifest.initial_val);
}

TEST(MetaTrain, NeverReadsTestFold) {
  const auto md = small_bench(3);
  const MetaDatasetTables inner(md);
  const Canary src(inner);
  std::vector<std::size_t> ids(8);
  std::iota(ids.begin(), ids.end(), 0);
  const auto split = split_folds(ids, 4, 5, 0, 3);
  meta_train(src, split, quick_cfg(40));
  for (auto d : split.test()) EXPECT_FALSE(src.touched.count(d)) << "test dataset " << d << " was read";

  // With an injected metric not even the validation fold is read.
  Canary quiet(inner);
  auto cfg = quick_cfg(40);
  cfg.val_metric = [](int) { return 1.0; };
  meta_train(quiet, split, cfg);
  const auto train = split.train();
  for (auto d : quiet.touched) EXPECT_TRUE(std::binary_search(train.begin(), train.end(), d)) << d;
}

TEST(MetaTrain, EarlyStopRestoresBestSnapshot) {
  const auto md = small_bench(4);
  std::vector<std::size_t> ids(8);
  std::iota(ids.begin(), ids.end(), 0);
  const auto split = split_folds(ids, 4, 0);
  // Improves until iteration 30, then worsens.
  auto cfg = quick_cfg(200);
  cfg.val_metric = [](int it) { return std::abs(it - 30.0); };
  auto stopped = meta_train(md, split, cfg);
  EXPECT_EQ(stopped.manifest.best_iter, 30);
  EXPECT_EQ(stopped.manifest.iters_run, 30 + 10 * cfg.patience);
  EXPECT_EQ(stopped.manifest.best_val, 0.0);
  EXPECT_EQ(stopped.manifest.initial_val, 30.0);

  auto straight = quick_cfg(30);
  straight.val_metric = [](int it) { return -it; };
  auto ref = meta_train(md, split, straight);
  EXPECT_EQ(snapshot(stopped.gp.params()), snapshot(ref.gp.params()));
  EXPECT_EQ(snapshot(stopped.cost.params()), snapshot(ref.cost.params()));
}

TEST(MetaTrain, ImprovesValidationNll) {
  const auto md = small_bench(5);
  std::vector<std::size_t> ids(8);
  std::iota(ids.begin(), ids.end(), 0);
  const auto split = split_folds(ids, 4, 0);
  auto cfg = quick_cfg(150);
  cfg.patience = 100;
  const auto ck = meta_train(md, split, cfg);
  EXPECT_LT(ck.manifest.best_val, ck.manifest.initial_val);
  EXPECT_EQ(ck.manifest.train_folds, (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(ck.manifest.val_fold, std::optional<std::size_t>(0));
}

TEST(MetaTrain, Deterministic) {
  const auto md = small_bench(6);
  std::vector<std::size_t> ids(8);
  std::iota(ids.begin(), ids.end(), 0);
  const auto split = split_folds(ids, 4, 0);
  auto a = meta_train(md, split, quick_cfg(30));
  auto b = meta_train(md, split, quick_cfg(30));
  EXPECT_EQ(checkpoint_to_json(a).dump(), checkpoint_to_json(b).dump());
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto md = small_bench(7);
  std::vector<std::size_t> ids(8);
  std::iota(ids.begin(), ids.end(), 0);
  auto ck = meta_train(md, split_folds(ids, 4, 0), quick_cfg(20));
  const auto dir = qt_test::scratch_dir("ckpt");
  save_checkpoint(ck, dir / "a.json");
  auto back = load_checkpoint(dir / "a.json");
  EXPECT_EQ(snapshot(back.gp.params()), snapshot(ck.gp.params()));
  EXPECT_EQ(snapshot(back.cost.params()), snapshot(ck.cost.params()));
  EXPECT_EQ(back.manifest.best_val, ck.manifest.best_val);
  EXPECT_EQ(back.manifest.train_folds, ck.manifest.train_folds);
  save_checkpoint(back, dir / "b.json");
  EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));

  EXPECT_NO_THROW(back.check_compatible(ck.enc_width, 4, 10));
  EXPECT_THROW(back.check_compatible(ck.enc_width, 5, 10), ValidationError);
  EXPECT_THROW(checkpoint_from_json(ojson{{"format", "nope"}}), ValidationError);
}

TEST(Ranks, AverageRanksMatchSortOracle) {
  Rng rng = substream(1, "ranks");
  for (int round = 0; round < 100; ++round) {
    const std::size_t n = 1 + uniform_index(rng, 30);
    std::vector<double> v(n);
    for (double &x : v) x = static_cast<double>(uniform_index(rng, 6));
    const auto r = average_ranks(v);
    for (std::size_t i = 0; i < n; ++i) {
      double less = 0, equal = 0;
      for (double x : v) less += x < v[i], equal += x == v[i];
      EXPECT_DOUBLE_EQ(r[i], less + (equal + 1.0) / 2.0);
    }
    EXPECT_NEAR(std::accumulate(r.begin(), r.end(), 0.0), n * (n + 1) / 2.0, 1e-9);
  }
}

TEST(Ranks, SpearmanKnownValues) {
  const std::vector<double> a{1, 2, 3, 4, 5};
  EXPECT_DOUBLE_EQ(spearman(a, std::vector<double>{10, 20, 30, 40, 50}).value, 1.0);
  EXPECT_DOUBLE_EQ(spearman(a, std::vector<double>{5, 4, 3, 2, 1}).value, -1.0);
  // d = (0, 0, 1, -1, 0): 1 - 6 * 2 / (5 * 24)
  EXPECT_NEAR(spearman(a, std::vector<double>{1, 2, 4, 3, 5}).value, 0.9, 1e-15);
  EXPECT_TRUE(spearman(a, std::vector<double>(5, 1.0)).degenerate);
  EXPECT_THROW(spearman(a, std::vector<double>{1.0}), std::invalid_argument);
}

TEST(ZeroShot, DeterministicAndGuarded) {
  const auto md = small_bench(8);
  const MetaDatasetTables src(md);
  MetaCheckpoint ck(md.encodings()[0].features.size(), 4, 10, 1);
  const std::vector<std::size_t> ctx{0, 1, 2, 3};
  const ZeroShotConfig zc{64, 3};
  const auto a = zero_shot_rank_eval(ck, src, 5, 10, ctx, zc);
  const auto b = zero_shot_rank_eval(ck, src, 5, 10, ctx, zc);
  EXPECT_EQ(a.value, b.value);
  EXPECT_GE(a.value, -1.0);
  EXPECT_LE(a.value, 1.0);
  EXPECT_EQ(ck.gp.target_mean(), 0.0);
  EXPECT_THROW(zero_shot_rank_eval(ck, src, 2, 10, ctx, zc), ValidationError);
  EXPECT_THROW(zero_shot_rank_eval(ck, src, 5, 11, ctx, zc), ValidationError);
  EXPECT_THROW(zero_shot_rank_eval(ck, src, 5, 10, std::vector<std::size_t>{}, zc), ValidationError);
}
