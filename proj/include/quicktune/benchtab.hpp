#pragma once

// Tabular learning-curve benchmark: synthetic meta-dataset generation,
// JSON-lines persistence, the Pareto model hub and per-dataset queries.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "quicktune/core.hpp"

namespace quicktune {

class BenchFormatError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char *bench_format = "qtbench-1";

// ---------------------------------------------------------------------------
// Pareto hub

/// a dominates b: at least as accurate and at most as large, strictly better
/// on one of the two.
inline bool dominates(const ModelInfo &a, const ModelInfo &b) {
  const bool no_worse = a.upstream_accuracy >= b.upstream_accuracy && a.param_count <= b.param_count;
  const bool better = a.upstream_accuracy > b.upstream_accuracy || a.param_count < b.param_count;
  return no_worse && better;
}

/// Models not dominated by any other, sorted by descending accuracy.
inline std::vector<ModelInfo> pareto_hub(const std::vector<ModelInfo> &models) {
  if (models.empty()) throw ValidationError("pareto_hub needs at least one model");
  std::vector<ModelInfo> sorted = models;
  // Accuracy descending, then size ascending: a sweep keeps anything strictly
  // smaller than every more-accurate model seen so far.
  std::stable_sort(sorted.begin(), sorted.end(), [](const ModelInfo &a, const ModelInfo &b) {
    if (a.upstream_accuracy != b.upstream_accuracy) return a.upstream_accuracy > b.upstream_accuracy;
    return a.param_count < b.param_count;
  });
  std::vector<ModelInfo> front;
  double smallest_better = std::numeric_limits<double>::infinity();
  std::size_t i = 0;
  while (i < sorted.size()) {
    // Group of equal accuracy.
    std::size_t j = i;
    while (j < sorted.size() && sorted[j].upstream_accuracy == sorted[i].upstream_accuracy) ++j;
    const double group_min = sorted[i].param_count;
    for (std::size_t k = i; k < j; ++k) {
      if (sorted[k].param_count == group_min && group_min < smallest_better) front.push_back(sorted[k]);
    }
    smallest_better = std::min(smallest_better, group_min);
    i = j;
  }
  return front;
}

// ---------------------------------------------------------------------------
// Meta-dataset

struct DatasetTable {
  std::string name;
  MetaFeatures meta;
  int cluster = -1; // generator bookkeeping; -1 when unknown
  std::vector<std::vector<double>> loss; // [pipeline][epoch - 1]
  std::vector<std::vector<double>> cost; // cumulative seconds
};

struct MetaDataset {
  SearchSpace space;
  int max_epoch = 50;
  std::vector<Pipeline> pipelines;
  std::vector<DatasetTable> datasets;

  std::size_t dataset_index(const std::string &name) const {
    for (std::size_t i = 0; i < datasets.size(); ++i) {
      if (datasets[i].name == name) return i;
    }
    throw std::out_of_range("unknown dataset '" + name + "'");
  }

  std::vector<EncodedPipeline> encodings() const {
    std::vector<EncodedPipeline> out;
    out.reserve(pipelines.size());
    for (const auto &p : pipelines) out.push_back(encode(p, space));
    return out;
  }

  void validate() const {
    if (max_epoch < 1) throw ValidationError("max epoch must be >= 1");
    for (const auto &p : pipelines) space.validate(p);
    for (const auto &d : datasets) {
      d.meta.validate();
      if (d.loss.size() != pipelines.size() || d.cost.size() != pipelines.size()) {
        throw ValidationError("dataset '" + d.name + "' does not cover every pipeline");
      }
      for (std::size_t p = 0; p < pipelines.size(); ++p) {
        validate_curves(d.loss[p], d.cost[p], max_epoch,
                        "dataset '" + d.name + "' pipeline " + std::to_string(p));
      }
    }
  }

  static void validate_curves(const std::vector<double> &loss, const std::vector<double> &cost,
                              int n, const std::string &where) {
    if (loss.size() != static_cast<std::size_t>(n) || cost.size() != static_cast<std::size_t>(n)) {
      throw ValidationError(where + ": curves must have " + std::to_string(n) + " entries");
    }
    for (std::size_t t = 0; t < loss.size(); ++t) {
      if (!(loss[t] >= 0.0 && loss[t] <= 1.0)) throw ValidationError(where + ": loss outside [0, 1]");
      if (!(cost[t] >= 0.0) || !std::isfinite(cost[t])) throw ValidationError(where + ": negative cost");
      if (t > 0 && cost[t] < cost[t - 1]) {
        throw ValidationError(where + ": cumulative cost decreases at epoch " + std::to_string(t + 1));
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Generator

struct GeneratorConfig {
  int n_clusters = 5;
  int n_datasets = 20;
  int n_models = 8;
  int configs_per_dataset = 100;
  int max_epoch = 50;
  double noise = 0.01;
  double cost_base = 1.0;
  double cost_jitter = 0.1; // per-pipeline relative cost noise half-width
  std::uint64_t seed = 0;

  void validate() const {
    if (n_clusters < 1) throw ValidationError("clusters must be >= 1");
    if (n_datasets < 1) throw ValidationError("datasets must be >= 1");
    if (n_models < 1) throw ValidationError("models must be >= 1");
    if (configs_per_dataset < 1) throw ValidationError("configs must be >= 1");
    if (max_epoch < 1) throw ValidationError("max epoch must be >= 1");
    if (!(noise >= 0.0)) throw ValidationError("noise must be >= 0");
    if (!(cost_base > 0.0)) throw ValidationError("cost base must be > 0");
    if (!(cost_jitter >= 0.0 && cost_jitter < 1.0)) throw ValidationError("cost jitter must be in [0, 1)");
  }
};

struct CurveParams {
  double initial = 1.0;
  double asymptote = 0.0;
  double rate = 1.0;
  double exponent = 1.0;
};

inline double curve_value(const CurveParams &c, int epoch) {
  return c.asymptote + (c.initial - c.asymptote) *
                           std::pow(1.0 + c.rate * static_cast<double>(epoch), -c.exponent);
}

namespace detail {

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline std::string dataset_name(int i, int total) {
  const int width = std::max(2, static_cast<int>(std::to_string(std::max(total - 1, 0)).size()));
  std::string s = std::to_string(i);
  return "d" + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

/// Evenly spaced subset of the Pareto front, largest accuracy first.
inline std::vector<ModelInfo> select_hub(const std::vector<ModelInfo> &hub, int n_models) {
  auto front = pareto_hub(hub);
  const auto n = static_cast<std::size_t>(n_models);
  if (n > front.size()) {
    throw ValidationError("requested " + std::to_string(n) + " models but the Pareto front has " +
                          std::to_string(front.size()));
  }
  if (n == front.size()) return front;
  std::vector<ModelInfo> out;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t idx = n == 1 ? 0 : (k * (front.size() - 1) + (n - 1) / 2) / (n - 1);
    out.push_back(front[idx]);
  }
  return out;
}

inline std::optional<std::size_t> learning_rate_dim(const SearchSpace &space) {
  for (const char *name : {"lr", "learning_rate"}) {
    if (auto i = space.dim_index(name)) {
      if (space.dims()[*i].kind != DimKind::categorical) return i;
    }
  }
  return std::nullopt;
}

/// Offset of each dim's first entry inside the hyperparameter block.
inline std::vector<std::size_t> dim_offsets(const SearchSpace &space) {
  std::vector<std::size_t> off;
  std::size_t at = 0;
  for (const auto &d : space.dims()) {
    off.push_back(at);
    at += d.encoded_width();
  }
  return off;
}

} // namespace detail

/// Seeded synthetic meta-dataset. Datasets in the same cluster share a
/// latent optimum over hyperparameters, model affinities and meta-feature
/// profile, so their loss surfaces correlate.
inline MetaDataset generate(const GeneratorConfig &cfg, const SearchSpace &input_space) {
  cfg.validate();
  MetaDataset md;
  md.space = SearchSpace(input_space.dims(), detail::select_hub(input_space.hub(), cfg.n_models));
  md.max_epoch = cfg.max_epoch;
  const auto &space = md.space;
  const std::size_t hw = space.hparam_width();
  const std::size_t n_models = space.hub().size();

  Rng prng = substream(cfg.seed, "gen.pipelines");
  for (int i = 0; i < cfg.configs_per_dataset; ++i) md.pipelines.push_back(sample_pipeline(space, prng));
  const auto enc = md.encodings();
  const auto lr_dim = detail::learning_rate_dim(space);
  const auto offsets = detail::dim_offsets(space);

  struct ClusterProfile {
    std::vector<double> latent, affinity;
    double log_samples = 0.0;
    long resolution = 32, channels = 1, classes = 10;
  };
  static constexpr long resolutions[] = {32, 128, 224};
  static constexpr long channel_options[] = {1, 3};
  std::vector<ClusterProfile> clusters(static_cast<std::size_t>(cfg.n_clusters));
  for (int c = 0; c < cfg.n_clusters; ++c) {
    Rng rng = substream(cfg.seed, "gen.cluster", static_cast<std::uint64_t>(c));
    auto &cl = clusters[static_cast<std::size_t>(c)];
    for (std::size_t k = 0; k < hw; ++k) cl.latent.push_back(standard_normal(rng));
    for (std::size_t m = 0; m < n_models; ++m) cl.affinity.push_back(1.5 * standard_normal(rng));
    cl.log_samples = uniform(rng, std::log(400.0), std::log(40000.0));
    cl.resolution = resolutions[uniform_index(rng, 3)];
    cl.channels = channel_options[uniform_index(rng, 2)];
    cl.classes = 10 + static_cast<long>(uniform_index(rng, 91));
  }

  for (int di = 0; di < cfg.n_datasets; ++di) {
    Rng rng = substream(cfg.seed, "gen.dataset", static_cast<std::uint64_t>(di));
    DatasetTable d;
    d.name = detail::dataset_name(di, cfg.n_datasets);
    d.cluster = di % cfg.n_clusters;
    const auto &cl = clusters[static_cast<std::size_t>(d.cluster)];

    std::vector<double> target(hw);
    for (std::size_t k = 0; k < hw; ++k) {
      target[k] = detail::logistic(cl.latent[k] + 0.1 * standard_normal(rng));
    }
    std::vector<double> affinity_logit(n_models);
    for (std::size_t m = 0; m < n_models; ++m) {
      affinity_logit[m] = cl.affinity[m] + 0.5 * standard_normal(rng);
    }
    const double log_n = std::clamp(cl.log_samples + 0.3 * standard_normal(rng), std::log(400.0),
                                    std::log(40000.0));
    d.meta.n_samples = std::clamp(std::lround(std::exp(log_n)), 400L, 40000L);
    d.meta.resolution = cl.resolution;
    d.meta.channels = cl.channels;
    d.meta.classes = std::clamp(cl.classes + std::lround(8.0 * standard_normal(rng)), 10L, 100L);

    for (std::size_t p = 0; p < md.pipelines.size(); ++p) {
      Rng crng = substream(cfg.seed, "gen.curve",
                           static_cast<std::uint64_t>(di) * md.pipelines.size() + p);
      const auto &pipe = md.pipelines[p];
      double dist2 = 0.0;
      for (std::size_t k = 0; k < hw; ++k) {
        const double diff = enc[p].features[k] - target[k];
        dist2 += diff * diff;
      }
      const double quality = std::exp(-dist2 / static_cast<double>(std::max<std::size_t>(hw, 1)));
      const double affinity = detail::logistic(affinity_logit[pipe.model_index]);

      CurveParams cp;
      cp.asymptote = std::clamp(0.05 + 0.9 * (1.0 - quality * affinity), 0.0, 0.95);
      cp.initial = std::min(1.0, cp.asymptote + uniform(crng, 0.2, 0.6));
      if (lr_dim && pipe.values[*lr_dim]) {
        const double x = enc[p].features[offsets[*lr_dim]];
        cp.rate = 0.5 + 1.5 * (1.0 - std::abs(2.0 * x - 1.0));
      } else {
        cp.rate = uniform(crng, 0.5, 2.0);
      }
      cp.exponent = uniform(crng, 0.5, 1.5);

      std::vector<double> loss(static_cast<std::size_t>(cfg.max_epoch));
      for (int t = 1; t <= cfg.max_epoch; ++t) {
        double v = curve_value(cp, t);
        if (cfg.noise > 0.0) v += cfg.noise * standard_normal(crng);
        loss[static_cast<std::size_t>(t - 1)] = std::clamp(v, 0.0, 1.0);
      }
      const double size = space.hub()[pipe.model_index].param_count;
      const double per_epoch = cfg.cost_base * std::pow(size, 0.7) *
                               (static_cast<double>(d.meta.n_samples) / 1000.0) *
                               (1.0 + uniform(crng, -cfg.cost_jitter, cfg.cost_jitter));
      std::vector<double> cost(static_cast<std::size_t>(cfg.max_epoch));
      for (int t = 1; t <= cfg.max_epoch; ++t) {
        cost[static_cast<std::size_t>(t - 1)] = per_epoch * static_cast<double>(t);
      }
      d.loss.push_back(std::move(loss));
      d.cost.push_back(std::move(cost));
    }
    md.datasets.push_back(std::move(d));
  }
  return md;
}

// ---------------------------------------------------------------------------
// Persistence

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

inline std::string json_string(const std::string &s) { return json(s).dump(); }

inline std::string double_array(const std::vector<double> &v) {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += format_double(v[i]);
  }
  return out + "]";
}

inline std::string hparams_line(const Pipeline &p, const SearchSpace &space) {
  std::string out = "{";
  bool first = true;
  for (std::size_t i = 0; i < space.dims().size(); ++i) {
    const auto &v = p.values[i];
    if (!v) continue;
    const auto &d = space.dims()[i];
    if (!first) out += ',';
    first = false;
    out += json_string(d.name) + ':';
    const auto k = static_cast<std::size_t>(*v);
    switch (d.kind) {
    case DimKind::numeric: out += format_double(*v); break;
    case DimKind::ordinal: out += format_double(d.levels[k]); break;
    case DimKind::categorical: out += json_string(d.choices[k]); break;
    }
  }
  return out + "}";
}

inline std::ofstream open_out(const std::filesystem::path &p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
  return out;
}

} // namespace detail

inline std::string metadataset_record(const MetaDataset &md, std::size_t dataset, std::size_t pipeline) {
  const auto &d = md.datasets[dataset];
  const auto &p = md.pipelines[pipeline];
  return "{\"dataset\":" + detail::json_string(d.name) + ",\"pipeline\":" + std::to_string(pipeline) +
         ",\"model\":" + detail::json_string(md.space.hub()[p.model_index].name) +
         ",\"hparams\":" + detail::hparams_line(p, md.space) +
         ",\"curve\":" + detail::double_array(d.loss[pipeline]) +
         ",\"cost\":" + detail::double_array(d.cost[pipeline]) + "}";
}

inline std::string metafeatures_record(const DatasetTable &d) {
  return "{\"dataset\":" + detail::json_string(d.name) +
         ",\"n_samples\":" + std::to_string(d.meta.n_samples) +
         ",\"resolution\":" + std::to_string(d.meta.resolution) +
         ",\"channels\":" + std::to_string(d.meta.channels) +
         ",\"classes\":" + std::to_string(d.meta.classes) + "}";
}

/// Writes metadataset.jsonl, metafeatures.jsonl and manifest.json into
/// `dir`. `extra` is merged into the manifest (e.g. resolved CLI flags).
inline void save(const MetaDataset &md, const std::filesystem::path &dir,
                 const nlohmann::ordered_json &extra = nlohmann::ordered_json::object()) {
  std::filesystem::create_directories(dir);
  {
    auto out = detail::open_out(dir / "metadataset.jsonl");
    for (std::size_t d = 0; d < md.datasets.size(); ++d)
      for (std::size_t p = 0; p < md.pipelines.size(); ++p) out << metadataset_record(md, d, p) << '\n';
    if (!out) throw std::runtime_error("write failed for metadataset.jsonl");
  }
  {
    auto out = detail::open_out(dir / "metafeatures.jsonl");
    for (const auto &d : md.datasets) out << metafeatures_record(d) << '\n';
    if (!out) throw std::runtime_error("write failed for metafeatures.jsonl");
  }
  nlohmann::ordered_json manifest;
  manifest["format"] = bench_format;
  manifest["max_epoch"] = md.max_epoch;
  manifest["pipelines"] = md.pipelines.size();
  manifest["datasets"] = nlohmann::ordered_json::array();
  for (const auto &d : md.datasets) manifest["datasets"].push_back({{"name", d.name}, {"cluster", d.cluster}});
  manifest["space"] = nlohmann::ordered_json::parse(space_to_json(md.space).dump());
  for (const auto &[k, v] : extra.items()) manifest[k] = v;
  auto out = detail::open_out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed for manifest.json");
}

namespace detail {

inline std::vector<std::string> read_lines(const std::filesystem::path &p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + p.string() + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

inline json parse_line(const std::string &line, const std::string &file, std::size_t lineno) {
  try {
    return json::parse(line);
  } catch (const json::parse_error &e) {
    throw BenchFormatError(file + ":" + std::to_string(lineno) + ": parse error: " + e.what());
  }
}

} // namespace detail

inline MetaDataset load(const std::filesystem::path &dir) {
  MetaDataset md;
  const auto manifest_path = dir / "manifest.json";
  json manifest;
  {
    std::ifstream in(manifest_path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read '" + manifest_path.string() + "'");
    try {
      manifest = json::parse(in);
    } catch (const json::parse_error &e) {
      throw BenchFormatError("manifest.json: parse error: " + std::string(e.what()));
    }
  }
  if (manifest.value("format", std::string()) != bench_format) {
    throw BenchFormatError("manifest.json: expected format '" + std::string(bench_format) + "'");
  }
  md.max_epoch = manifest.at("max_epoch").get<int>();
  md.space = space_from_json(manifest.at("space"));
  const auto n_pipelines = manifest.at("pipelines").get<std::size_t>();
  std::map<std::string, int> clusters;
  if (manifest.contains("datasets")) {
    for (const auto &d : manifest["datasets"]) clusters[d.at("name").get<std::string>()] = d.value("cluster", -1);
  }

  const auto mf_lines = detail::read_lines(dir / "metafeatures.jsonl");
  for (std::size_t i = 0; i < mf_lines.size(); ++i) {
    if (mf_lines[i].empty()) continue;
    const auto j = detail::parse_line(mf_lines[i], "metafeatures.jsonl", i + 1);
    const std::string where = "metafeatures.jsonl:" + std::to_string(i + 1);
    try {
      detail::reject_unknown(j, {"dataset", "n_samples", "resolution", "channels", "classes"}, where);
      DatasetTable d;
      d.name = j.at("dataset").get<std::string>();
      d.meta = {j.at("n_samples").get<long>(), j.at("resolution").get<long>(),
                j.at("channels").get<long>(), j.at("classes").get<long>()};
      d.meta.validate();
      d.cluster = clusters.count(d.name) ? clusters[d.name] : -1;
      d.loss.resize(n_pipelines);
      d.cost.resize(n_pipelines);
      md.datasets.push_back(std::move(d));
    } catch (const json::exception &e) {
      throw BenchFormatError(where + ": " + e.what());
    } catch (const ValidationError &e) {
      throw BenchFormatError(where + ": " + e.what());
    }
  }

  md.pipelines.resize(n_pipelines);
  std::vector<bool> defined(n_pipelines, false);
  const auto lines = detail::read_lines(dir / "metadataset.jsonl");
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto lineno = i + 1;
    const std::string where = "metadataset.jsonl:" + std::to_string(lineno);
    const auto j = detail::parse_line(lines[i], "metadataset.jsonl", lineno);
    try {
      detail::reject_unknown(j, {"dataset", "pipeline", "model", "hparams", "curve", "cost"}, where);
      const auto di = md.dataset_index(j.at("dataset").get<std::string>());
      const auto pid = j.at("pipeline").get<std::size_t>();
      if (pid >= n_pipelines) throw BenchFormatError(where + ": pipeline id out of range");
      const auto model = j.at("model").get<std::string>();
      std::optional<std::size_t> mi;
      for (std::size_t m = 0; m < md.space.hub().size(); ++m)
        if (md.space.hub()[m].name == model) mi = m;
      if (!mi) throw BenchFormatError(where + ": unknown model '" + model + "'");
      auto pipe = hparams_from_json(j.at("hparams"), *mi, md.space);
      if (!defined[pid]) {
        md.pipelines[pid] = std::move(pipe);
        defined[pid] = true;
      } else if (!(md.pipelines[pid] == pipe)) {
        throw BenchFormatError(where + ": pipeline " + std::to_string(pid) +
                               " redefined with different hyperparameters");
      }
      auto &d = md.datasets[di];
      if (!d.loss[pid].empty()) throw BenchFormatError(where + ": duplicate record");
      auto loss = j.at("curve").get<std::vector<double>>();
      auto cost = j.at("cost").get<std::vector<double>>();
      MetaDataset::validate_curves(loss, cost, md.max_epoch, where);
      d.loss[pid] = std::move(loss);
      d.cost[pid] = std::move(cost);
    } catch (const json::exception &e) {
      throw BenchFormatError(where + ": " + e.what());
    } catch (const ValidationError &e) {
      throw BenchFormatError(where + ": " + e.what());
    } catch (const std::out_of_range &e) {
      throw BenchFormatError(where + ": " + e.what());
    }
  }
  for (std::size_t p = 0; p < n_pipelines; ++p) {
    if (!defined[p]) throw BenchFormatError("metadataset.jsonl: pipeline " + std::to_string(p) + " missing");
  }
  for (const auto &d : md.datasets) {
    for (std::size_t p = 0; p < n_pipelines; ++p) {
      if (d.loss[p].empty()) {
        throw BenchFormatError("metadataset.jsonl: dataset '" + d.name + "' lacks pipeline " +
                               std::to_string(p) + " (truncated file?)");
      }
    }
  }
  return md;
}

// ---------------------------------------------------------------------------
// Queries

struct QueryResult {
  double loss = 0.0;
  double cum_cost = 0.0;
};

struct PerformanceBounds {
  double y_min = 0.0;
  double y_max = 1.0;
  bool degenerate = false;
};

/// Performance is 1 - loss; bounds span every tabulated cell.
inline PerformanceBounds performance_bounds(const DatasetTable &d) {
  PerformanceBounds b{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
                      false};
  for (const auto &curve : d.loss) {
    for (double l : curve) {
      b.y_min = std::min(b.y_min, 1.0 - l);
      b.y_max = std::max(b.y_max, 1.0 - l);
    }
  }
  b.degenerate = !(b.y_min < b.y_max);
  return b;
}

/// What an optimizer sees of one dataset.
class BenchView {
public:
  virtual ~BenchView() = default;
  virtual std::string name() const = 0;
  virtual std::size_t pipeline_count() const = 0;
  virtual int max_epoch() const = 0;
  virtual const MetaFeatures &meta() const = 0;
  virtual const SearchSpace &space() const = 0;
  virtual const std::vector<EncodedPipeline> &encodings() const = 0;
  virtual QueryResult query(PipelineId id, int epoch) const = 0;
};

class TabularBenchmark {
public:
  explicit TabularBenchmark(MetaDataset md) : md_(std::move(md)) {
    md_.validate();
    encodings_ = md_.encodings();
    for (const auto &d : md_.datasets) bounds_.push_back(performance_bounds(d));
  }

  const MetaDataset &metadataset() const { return md_; }
  const std::vector<EncodedPipeline> &encodings() const { return encodings_; }
  const PerformanceBounds &bounds(std::size_t dataset) const { return bounds_.at(dataset); }

  QueryResult query(std::size_t dataset, PipelineId id, int epoch) const {
    if (dataset >= md_.datasets.size()) throw std::out_of_range("unknown dataset index");
    if (id >= md_.pipelines.size()) throw std::out_of_range("unknown pipeline " + std::to_string(id));
    if (epoch < 1 || epoch > md_.max_epoch) {
      throw std::out_of_range("epoch " + std::to_string(epoch) + " outside [1, " +
                              std::to_string(md_.max_epoch) + "]");
    }
    const auto &d = md_.datasets[dataset];
    const auto t = static_cast<std::size_t>(epoch - 1);
    return {d.loss[id][t], d.cost[id][t]};
  }

  class View : public BenchView {
  public:
    View(const TabularBenchmark &b, std::size_t dataset) : bench_(&b), dataset_(dataset) {
      if (dataset >= b.md_.datasets.size()) throw std::out_of_range("unknown dataset index");
    }
    std::string name() const override { return bench_->md_.datasets[dataset_].name; }
    std::size_t pipeline_count() const override { return bench_->md_.pipelines.size(); }
    int max_epoch() const override { return bench_->md_.max_epoch; }
    const MetaFeatures &meta() const override { return bench_->md_.datasets[dataset_].meta; }
    const SearchSpace &space() const override { return bench_->md_.space; }
    const std::vector<EncodedPipeline> &encodings() const override { return bench_->encodings_; }
    QueryResult query(PipelineId id, int epoch) const override {
      return bench_->query(dataset_, id, epoch);
    }
    std::size_t dataset() const { return dataset_; }

  private:
    const TabularBenchmark *bench_;
    std::size_t dataset_;
  };

  View view(std::size_t dataset) const { return View(*this, dataset); }
  View view(const std::string &name) const { return View(*this, md_.dataset_index(name)); }

private:
  MetaDataset md_;
  std::vector<EncodedPipeline> encodings_;
  std::vector<PerformanceBounds> bounds_;
};

} // namespace quicktune
