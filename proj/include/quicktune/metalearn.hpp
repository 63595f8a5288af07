#pragma once

// Meta-training of the loss and cost predictors over many datasets, fold
// management, checkpoints and zero-shot ranking evaluation.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "quicktune/benchtab.hpp"
#include "quicktune/costmodel.hpp"
#include "quicktune/surrogate.hpp"

namespace quicktune {

// ---------------------------------------------------------------------------
// Folds

struct FoldSplit {
  std::vector<std::vector<std::size_t>> folds;
  std::size_t val_fold = 0;
  std::optional<std::size_t> test_fold; // held out entirely when set

  std::vector<std::size_t> fold_ids(std::function<bool(std::size_t)> keep) const {
    std::vector<std::size_t> out;
    for (std::size_t f = 0; f < folds.size(); ++f)
      if (keep(f)) out.insert(out.end(), folds[f].begin(), folds[f].end());
    std::sort(out.begin(), out.end());
    return out;
  }
  std::vector<std::size_t> train() const {
    return fold_ids([&](std::size_t f) { return f != val_fold && (!test_fold || f != *test_fold); });
  }
  std::vector<std::size_t> val() const { return folds.at(val_fold); }
  std::vector<std::size_t> test() const {
    return test_fold ? folds.at(*test_fold) : std::vector<std::size_t>{};
  }
  std::vector<std::size_t> train_folds() const {
    std::vector<std::size_t> out;
    for (std::size_t f = 0; f < folds.size(); ++f)
      if (f != val_fold && (!test_fold || f != *test_fold)) out.push_back(f);
    return out;
  }
};

/// Seeded shuffle, then round-robin assignment; fold sizes differ by <= 1.
inline FoldSplit split_folds(std::vector<std::size_t> ids, std::size_t k, std::uint64_t seed,
                             std::size_t val_fold = 0,
                             std::optional<std::size_t> test_fold = std::nullopt) {
  if (k < 1) throw ValidationError("fold count must be >= 1");
  if (ids.size() < k) {
    throw ValidationError("need at least " + std::to_string(k) + " datasets for " +
                          std::to_string(k) + " folds, got " + std::to_string(ids.size()));
  }
  if (val_fold >= k) throw ValidationError("validation fold out of range");
  if (test_fold && (*test_fold >= k || *test_fold == val_fold)) {
    throw ValidationError("test fold must differ from the validation fold and be in range");
  }
  Rng rng = substream(seed, "folds");
  shuffle(ids, rng);
  FoldSplit s;
  s.folds.resize(k);
  for (std::size_t i = 0; i < ids.size(); ++i) s.folds[i % k].push_back(ids[i]);
  for (auto &f : s.folds) std::sort(f.begin(), f.end());
  s.val_fold = val_fold;
  s.test_fold = test_fold;
  return s;
}

// ---------------------------------------------------------------------------
// Table access

/// Read access to the curves of a meta-dataset, one dataset at a time.
class MetaTables {
public:
  virtual ~MetaTables() = default;
  virtual std::size_t dataset_count() const = 0;
  virtual std::size_t pipeline_count() const = 0;
  virtual int max_epoch() const = 0;
  virtual std::size_t hub_size() const = 0;
  virtual const std::vector<EncodedPipeline> &encodings() const = 0;
  virtual const DatasetTable &table(std::size_t dataset) const = 0;
};

class MetaDatasetTables : public MetaTables {
public:
  explicit MetaDatasetTables(const MetaDataset &md) : md_(&md), enc_(md.encodings()) {}
  std::size_t dataset_count() const override { return md_->datasets.size(); }
  std::size_t pipeline_count() const override { return md_->pipelines.size(); }
  int max_epoch() const override { return md_->max_epoch; }
  std::size_t hub_size() const override { return md_->space.hub().size(); }
  const std::vector<EncodedPipeline> &encodings() const override { return enc_; }
  const DatasetTable &table(std::size_t dataset) const override { return md_->datasets.at(dataset); }

private:
  const MetaDataset *md_;
  std::vector<EncodedPipeline> enc_;
};

// ---------------------------------------------------------------------------
// Checkpoint

inline constexpr const char *meta_format = "qtmeta-1";

struct MetaManifest {
  std::uint64_t seed = 0;
  int iters = 0;     // requested
  int iters_run = 0; // completed before stopping
  std::vector<std::size_t> train_folds;
  std::optional<std::size_t> val_fold;
  double initial_val = 0.0;
  double best_val = 0.0;
  int best_iter = 0;
  int skipped_batches = 0;
};

struct MetaCheckpoint {
  std::size_t enc_width = 0;
  std::size_t hub_size = 0;
  int max_epoch = 0;
  DeepKernelGP gp;
  CostPredictor cost;
  MetaManifest manifest;

  MetaCheckpoint() = default;
  MetaCheckpoint(std::size_t enc, std::size_t hub, int n, std::uint64_t seed)
      : enc_width(enc), hub_size(hub), max_epoch(n), gp(enc, hub, n, seed), cost(enc, hub, n, seed) {}

  void check_compatible(std::size_t enc, std::size_t hub, int n) const {
    if (enc != enc_width || hub != hub_size || n != max_epoch) {
      throw ValidationError("checkpoint shape (enc " + std::to_string(enc_width) + ", hub " +
                            std::to_string(hub_size) + ", N " + std::to_string(max_epoch) +
                            ") does not match the benchmark (enc " + std::to_string(enc) + ", hub " +
                            std::to_string(hub) + ", N " + std::to_string(n) + ")");
    }
  }
};

inline ojson checkpoint_to_json(MetaCheckpoint &ck) {
  ojson j;
  j["format"] = checkpoint_format;
  j["shape"] = {{"enc_width", ck.enc_width}, {"hub_size", ck.hub_size}, {"max_epoch", ck.max_epoch}};
  ojson blocks = blocks_to_json(ck.gp.params(), "surrogate.");
  for (auto &b : blocks_to_json(ck.cost.params(), "cost.")) blocks.push_back(b);
  j["blocks"] = std::move(blocks);
  const auto &m = ck.manifest;
  ojson man;
  man["format"] = meta_format;
  man["seed"] = m.seed;
  man["iters"] = m.iters;
  man["iters_run"] = m.iters_run;
  man["train_folds"] = m.train_folds;
  man["val_fold"] = m.val_fold ? ojson(*m.val_fold) : ojson(nullptr);
  man["initial_val"] = m.initial_val;
  man["best_val"] = m.best_val;
  man["best_iter"] = m.best_iter;
  man["skipped_batches"] = m.skipped_batches;
  j["manifest"] = std::move(man);
  return j;
}

inline MetaCheckpoint checkpoint_from_json(const ojson &j) {
  if (!j.is_object() || j.value("format", std::string()) != checkpoint_format) {
    throw ValidationError("not a '" + std::string(checkpoint_format) + "' checkpoint");
  }
  const auto &shape = j.at("shape");
  MetaCheckpoint ck(shape.at("enc_width").get<std::size_t>(), shape.at("hub_size").get<std::size_t>(),
                    shape.at("max_epoch").get<int>(), 0);
  blocks_from_json(j.at("blocks"), ck.gp.params(), "surrogate.");
  blocks_from_json(j.at("blocks"), ck.cost.params(), "cost.");
  const auto &man = j.at("manifest");
  if (man.value("format", std::string()) != meta_format) {
    throw ValidationError("checkpoint manifest is not '" + std::string(meta_format) + "'");
  }
  auto &m = ck.manifest;
  m.seed = man.at("seed").get<std::uint64_t>();
  m.iters = man.at("iters").get<int>();
  m.iters_run = man.value("iters_run", 0);
  m.train_folds = man.at("train_folds").get<std::vector<std::size_t>>();
  if (man.contains("val_fold") && !man["val_fold"].is_null()) m.val_fold = man["val_fold"].get<std::size_t>();
  m.initial_val = man.value("initial_val", 0.0);
  m.best_val = man.value("best_val", 0.0);
  m.best_iter = man.value("best_iter", 0);
  m.skipped_batches = man.value("skipped_batches", 0);
  return ck;
}

inline void save_checkpoint(MetaCheckpoint &ck, const std::filesystem::path &path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << checkpoint_to_json(ck).dump() << '\n';
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

inline MetaCheckpoint load_checkpoint(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + path.string() + "'");
  ojson j;
  try {
    j = ojson::parse(in);
  } catch (const ojson::parse_error &e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

// ---------------------------------------------------------------------------
// Meta-training

struct MetaTrainConfig {
  int iters = 10000;
  double lr = 1e-4;
  std::size_t batch = 64;
  int eval_every = 100;
  int patience = 5;
  int delta_t = 1;
  bool use_curve = true;
  std::size_t val_batches_per_dataset = 2;
  int max_consecutive_failures = 20;
  std::uint64_t seed = 0;
  /// Replaces the meta-validation NLL when set; called with the iteration.
  std::function<double(int)> val_metric;

  void validate() const {
    if (iters < 0) throw ValidationError("iterations must be >= 0");
    if (!(lr > 0.0)) throw ValidationError("learning rate must be > 0");
    if (batch < 1) throw ValidationError("batch must be >= 1");
    if (eval_every < 1) throw ValidationError("eval interval must be >= 1");
    if (patience < 1) throw ValidationError("patience must be >= 1");
    if (delta_t < 1) throw ValidationError("epoch step must be >= 1");
  }
};

struct TargetScale {
  double mean = 0.0;
  double std = 1.0;
};

inline TargetScale table_scale(const DatasetTable &d) {
  double s = 0.0, s2 = 0.0;
  std::size_t n = 0;
  for (const auto &c : d.loss)
    for (double v : c) {
      s += v;
      ++n;
    }
  const double mean = n ? s / static_cast<double>(n) : 0.0;
  for (const auto &c : d.loss)
    for (double v : c) s2 += (v - mean) * (v - mean);
  const double sd = n ? std::sqrt(s2 / static_cast<double>(n)) : 1.0;
  return {mean, sd > 1e-12 ? sd : 1.0};
}

/// Predictor input for tabulated cell (pipeline, epoch) of one dataset.
inline SurrogateInput table_input(const MetaTables &src, const DatasetTable &d, std::size_t pipeline,
                                  int epoch, int delta_t, bool use_curve) {
  SurrogateInput in;
  in.enc = src.encodings()[pipeline].features;
  in.meta = d.meta;
  in.epoch = epoch;
  in.curve.assign(static_cast<std::size_t>(src.max_epoch()), 0.0);
  if (use_curve) {
    const auto &c = d.loss[pipeline];
    for (int t = delta_t; t <= epoch - delta_t; t += delta_t) {
      in.curve[static_cast<std::size_t>(t - 1)] = c[static_cast<std::size_t>(t - 1)];
    }
  }
  return in;
}

struct MetaBatch {
  std::vector<SurrogateInput> inputs;
  std::vector<double> losses;
  std::vector<double> costs;
};

inline MetaBatch sample_batch(const MetaTables &src, const DatasetTable &d, std::size_t size,
                              int delta_t, bool use_curve, Rng &rng) {
  MetaBatch b;
  const auto levels = static_cast<std::uint64_t>(src.max_epoch() / delta_t);
  if (levels == 0) throw ValidationError("epoch step exceeds the maximum epoch");
  for (std::size_t i = 0; i < size; ++i) {
    const auto p = static_cast<std::size_t>(uniform_index(rng, src.pipeline_count()));
    const int t = delta_t * static_cast<int>(1 + uniform_index(rng, levels));
    b.inputs.push_back(table_input(src, d, p, t, delta_t, use_curve));
    b.losses.push_back(d.loss[p][static_cast<std::size_t>(t - 1)]);
    b.costs.push_back(d.cost[p][static_cast<std::size_t>(t - 1)]);
  }
  return b;
}

/// Meta-trains both predictors. Gradient steps only read the split's
/// meta-train datasets; validation datasets are read once up front to build
/// fixed validation batches (skipped when a custom metric is supplied).
inline MetaCheckpoint meta_train(const MetaTables &src, const FoldSplit &split,
                                 const MetaTrainConfig &cfg) {
  cfg.validate();
  const auto train = split.train();
  if (train.empty()) throw ValidationError("meta-train folds are empty");
  const std::size_t enc_width = src.encodings().at(0).features.size();
  MetaCheckpoint ck(enc_width, src.hub_size(), src.max_epoch(), cfg.seed);
  auto &m = ck.manifest;
  m.seed = cfg.seed;
  m.iters = cfg.iters;
  m.train_folds = split.train_folds();
  m.val_fold = split.val_fold;

  struct ValBatch {
    MetaBatch batch;
    TargetScale scale;
  };
  std::vector<ValBatch> val;
  if (!cfg.val_metric) {
    Rng vrng = substream(cfg.seed, "meta.val");
    for (std::size_t d : split.val()) {
      const auto &table = src.table(d);
      const auto scale = table_scale(table);
      for (std::size_t k = 0; k < cfg.val_batches_per_dataset; ++k) {
        val.push_back({sample_batch(src, table, cfg.batch, cfg.delta_t, cfg.use_curve, vrng), scale});
      }
    }
  }
  auto val_metric = [&](int iter) {
    if (cfg.val_metric) return cfg.val_metric(iter);
    if (val.empty()) return 0.0;
    double s = 0.0;
    for (const auto &v : val) {
      ck.gp.set_normalization(v.scale.mean, v.scale.std);
      s += ck.gp.nll(v.batch.inputs, v.batch.losses) / static_cast<double>(v.batch.inputs.size());
    }
    return s / static_cast<double>(val.size());
  };

  std::vector<TargetScale> scales;
  for (std::size_t d : train) scales.push_back(table_scale(src.table(d)));

  const auto gp_params = ck.gp.params();
  const auto cost_params = ck.cost.params();
  m.initial_val = val_metric(0);
  m.best_val = m.initial_val;
  auto best_gp = snapshot(gp_params);
  auto best_cost = snapshot(cost_params);
  ck.gp.adam().lr = cfg.lr;
  ck.cost.adam().lr = cfg.lr;

  Rng rng = substream(cfg.seed, "meta.train");
  int bad_evals = 0, failures = 0;
  for (int it = 1; it <= cfg.iters; ++it) {
    const auto k = static_cast<std::size_t>(uniform_index(rng, train.size()));
    const auto &table = src.table(train[k]);
    const auto batch = sample_batch(src, table, cfg.batch, cfg.delta_t, cfg.use_curve, rng);

    const auto gp_before = snapshot(gp_params);
    const auto adam_before = ck.gp.adam();
    try {
      ck.gp.set_normalization(scales[k].mean, scales[k].std);
      zero_grads(gp_params);
      const double v = ck.gp.nll_with_grad(batch.inputs, batch.losses);
      if (!std::isfinite(v)) throw NonFiniteError("non-finite meta-train NLL");
      adam_step(ck.gp.adam(), gp_params);
      failures = 0;
    } catch (const SingularKernelError &) {
      restore(gp_params, gp_before);
      ck.gp.adam() = adam_before;
      ++m.skipped_batches;
      if (++failures >= cfg.max_consecutive_failures) throw;
    } catch (const NonFiniteError &) {
      restore(gp_params, gp_before);
      ck.gp.adam() = adam_before;
      ++m.skipped_batches;
      if (++failures >= cfg.max_consecutive_failures) throw;
    }
    try {
      zero_grads(cost_params);
      ck.cost.loss_with_grad(batch.inputs, batch.costs);
      adam_step(ck.cost.adam(), cost_params);
    } catch (const NonFiniteError &) {
      ++m.skipped_batches;
    }
    m.iters_run = it;

    if (it % cfg.eval_every == 0) {
      const double v = val_metric(it);
      if (v < m.best_val) {
        m.best_val = v;
        m.best_iter = it;
        best_gp = snapshot(gp_params);
        best_cost = snapshot(cost_params);
        bad_evals = 0;
      } else if (++bad_evals >= cfg.patience) {
        break;
      }
    }
  }
  restore(gp_params, best_gp);
  restore(cost_params, best_cost);
  ck.gp.adam() = AdamState{};
  ck.cost.adam() = AdamState{};
  ck.gp.set_normalization(0.0, 1.0);
  return ck;
}

inline MetaCheckpoint meta_train(const MetaDataset &md, const FoldSplit &split,
                                 const MetaTrainConfig &cfg) {
  return meta_train(MetaDatasetTables(md), split, cfg);
}

// ---------------------------------------------------------------------------
// Rank evaluation

/// Average ranks (1-based); ties share the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = rank;
    i = j + 1;
  }
  return r;
}

struct Correlation {
  double value = 0.0;
  bool degenerate = false;
};

inline Correlation spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman: length mismatch");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (!(saa > 0.0 && sbb > 0.0)) return {0.0, true};
  return {sab / std::sqrt(saa * sbb), false};
}

struct ZeroShotConfig {
  std::size_t context_size = 256;
  std::uint64_t seed = 0;
};

/// Ranks every pipeline of a held-out dataset at epoch t without any
/// observation on it. The GP is conditioned on a seeded sample of cells at
/// epoch t from the context datasets; all inputs carry empty curves. Returns
/// the Spearman correlation between posterior means and true losses.
inline Correlation zero_shot_rank_eval(DeepKernelGP &gp, const MetaTables &src, std::size_t held_out,
                                       int t, std::span<const std::size_t> context,
                                       const ZeroShotConfig &cfg = {}) {
  if (t < 1 || t > src.max_epoch()) throw ValidationError("epoch outside [1, N]");
  if (context.empty()) throw ValidationError("zero-shot evaluation needs context datasets");
  if (std::find(context.begin(), context.end(), held_out) != context.end()) {
    throw ValidationError("held-out dataset appears in the context");
  }
  Rng rng = substream(cfg.seed, "zeroshot.context");
  std::vector<SurrogateInput> train;
  std::vector<double> y;
  for (std::size_t i = 0; i < cfg.context_size; ++i) {
    const auto d = context[static_cast<std::size_t>(uniform_index(rng, context.size()))];
    const auto p = static_cast<std::size_t>(uniform_index(rng, src.pipeline_count()));
    const auto &table = src.table(d);
    train.push_back(table_input(src, table, p, t, 1, false));
    y.push_back(table.loss[p][static_cast<std::size_t>(t - 1)]);
  }
  const auto &target = src.table(held_out);
  std::vector<SurrogateInput> test;
  std::vector<double> truth;
  for (std::size_t p = 0; p < src.pipeline_count(); ++p) {
    test.push_back(table_input(src, target, p, t, 1, false));
    truth.push_back(target.loss[p][static_cast<std::size_t>(t - 1)]);
  }
  const double old_mean = gp.target_mean(), old_std = gp.target_std();
  gp.fit_normalization(y);
  const auto post = gp.posterior(train, y, test);
  gp.set_normalization(old_mean, old_std);
  return spearman(post.mean, truth);
}

inline Correlation zero_shot_rank_eval(MetaCheckpoint &ck, const MetaTables &src, std::size_t held_out,
                                       int t, std::span<const std::size_t> context,
                                       const ZeroShotConfig &cfg = {}) {
  ck.check_compatible(src.encodings().at(0).features.size(), src.hub_size(), src.max_epoch());
  return zero_shot_rank_eval(ck.gp, src, held_out, t, context, cfg);
}

} // namespace quicktune
