// Batch command-line front end: benchmark generation, hub selection,
// meta-training, tuning runs, baselines and reports.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "default_space.hpp"
#include "quicktune/evalkit.hpp"

namespace fs = std::filesystem;
using namespace quicktune;

namespace {

struct CliError : std::runtime_error {
  int code;
  CliError(int c, const std::string &what) : std::runtime_error(what), code(c) {}
};

[[noreturn]] void usage(const std::string &what) { throw CliError(2, what); }

std::shared_ptr<spdlog::logger> make_logger(bool quiet) {
  auto log = spdlog::stderr_logger_mt("quicktune");
  log->set_pattern("[%l] %v");
  auto level = spdlog::level::info;
  if (const char *env = std::getenv("QT_LOG")) {
    const std::string v = env;
    if (v == "error") level = spdlog::level::err;
    else if (v == "debug") level = spdlog::level::debug;
    else if (v != "info") log->warn("QT_LOG='{}' not recognized, using info", v);
  }
  if (quiet) level = spdlog::level::err;
  log->set_level(level);
  return log;
}

std::string read_file(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw CliError(3, "cannot read '" + p.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const fs::path &p, const std::string &text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw CliError(3, "cannot write '" + p.string() + "'");
}

json parse_json(const std::string &text, const std::string &where) {
  try {
    return json::parse(text);
  } catch (const json::parse_error &e) {
    throw CliError(3, where + ": " + e.what());
  }
}

MetaDataset load_bench(const fs::path &dir) {
  if (!fs::is_directory(dir)) throw CliError(3, "benchmark directory '" + dir.string() + "' not found");
  return load(dir);
}

struct Globals {
  std::uint64_t seed = 0;
  std::string out;
  bool quiet = false;
};

void require_out(const Globals &g) {
  if (g.out.empty()) usage("--out is required");
}

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
  std::string space;
  GeneratorConfig cfg;
};

int cmd_gen(const GenArgs &a, const Globals &g, spdlog::logger &log) {
  require_out(g);
  const json space_json = a.space.empty() ? parse_json(default_space_json, "built-in space")
                                          : parse_json(read_file(a.space), a.space);
  const SearchSpace space = space_from_json(space_json);
  GeneratorConfig cfg = a.cfg;
  cfg.seed = g.seed;
  cfg.validate();
  const auto md = generate(cfg, space);
  nlohmann::ordered_json flags;
  flags["space"] = a.space.empty() ? "built-in" : a.space;
  flags["clusters"] = cfg.n_clusters;
  flags["datasets"] = cfg.n_datasets;
  flags["models"] = cfg.n_models;
  flags["configs"] = cfg.configs_per_dataset;
  flags["epochs"] = cfg.max_epoch;
  flags["noise"] = cfg.noise;
  flags["cost_base"] = cfg.cost_base;
  flags["cost_jitter"] = cfg.cost_jitter;
  flags["seed"] = cfg.seed;
  try {
    save(md, g.out, {{"flags", flags}});
  } catch (const std::runtime_error &e) {
    throw CliError(3, e.what());
  }
  log.info("wrote {} datasets x {} pipelines to {}", md.datasets.size(), md.pipelines.size(), g.out);
  return 0;
}

// ---------------------------------------------------------------------------
// pareto

int cmd_pareto(const std::string &models_path, const Globals &g, spdlog::logger &log) {
  require_out(g);
  const json j = parse_json(read_file(models_path), models_path);
  const json &arr = j.is_object() && j.contains("hub") ? j["hub"] : j;
  if (!arr.is_array()) usage("--models must hold a JSON array of models");
  std::vector<ModelInfo> models;
  for (const auto &m : arr) models.push_back(model_from_json(m));
  const auto front = pareto_hub(models);
  json out = json::array();
  for (const auto &m : front) out.push_back(model_to_json(m));
  write_file(g.out, out.dump(2) + "\n");
  log.info("kept {} of {} models", front.size(), models.size());
  return 0;
}

// ---------------------------------------------------------------------------
// metatrain

struct MetaArgs {
  std::string bench;
  std::size_t folds = 5;
  std::size_t val_fold = 0;
  std::optional<std::size_t> test_fold;
  MetaTrainConfig cfg;
};

int cmd_metatrain(const MetaArgs &a, const Globals &g, spdlog::logger &log) {
  require_out(g);
  if (a.bench.empty()) usage("--bench is required");
  const auto md = load_bench(a.bench);
  std::vector<std::size_t> ids(md.datasets.size());
  std::iota(ids.begin(), ids.end(), 0);
  const auto split = split_folds(ids, a.folds, g.seed, a.val_fold, a.test_fold);
  MetaTrainConfig cfg = a.cfg;
  cfg.seed = g.seed;
  log.info("meta-training on {} datasets, validating on {}", split.train().size(), split.val().size());
  auto ck = meta_train(md, split, cfg);
  auto j = checkpoint_to_json(ck);
  ojson c;
  c["bench"] = a.bench;
  c["folds"] = a.folds;
  c["val_fold"] = a.val_fold;
  c["test_fold"] = a.test_fold ? ojson(*a.test_fold) : ojson(nullptr);
  c["iters"] = cfg.iters;
  c["lr"] = cfg.lr;
  c["batch"] = cfg.batch;
  c["eval_every"] = cfg.eval_every;
  c["patience"] = cfg.patience;
  c["delta_t"] = cfg.delta_t;
  c["seed"] = cfg.seed;
  j["config"] = std::move(c);
  write_file(g.out, j.dump() + "\n");
  log.info("ran {} iterations, best validation loss {} at {}", ck.manifest.iters_run, ck.manifest.best_val,
           ck.manifest.best_iter);
  return 0;
}

// ---------------------------------------------------------------------------
// tune / baseline

struct RunArgs {
  std::string bench;
  std::vector<std::string> datasets;
  std::optional<double> budget_seconds;
  std::optional<double> budget_median_runs;
  int seeds = 1;
  int jobs = 1;
};

struct TuneArgs {
  RunArgs run;
  std::string checkpoint;
  std::vector<std::string> ablate;
  TuneConfig cfg;
  bool record_overhead = false;
};

struct BaselineArgs {
  RunArgs run;
  std::string method;
  ShaConfig sha;
  TuneConfig cfg; // gp-full only
};

std::size_t resolve_dataset(const MetaDataset &md, const std::string &id) {
  for (std::size_t i = 0; i < md.datasets.size(); ++i) {
    if (md.datasets[i].name == id) return i;
  }
  usage("--dataset: unknown dataset '" + id + "'");
}

double run_budget(const RunArgs &a, const DatasetTable &d) {
  if (a.budget_seconds) return *a.budget_seconds;
  std::vector<double> full;
  for (const auto &c : d.cost) full.push_back(c.back());
  return *a.budget_median_runs * median(full);
}

struct Job {
  std::size_t dataset;
  std::uint64_t seed;
};

/// Runs every (dataset, seed) job, `jobs` at a time, and writes one trace
/// per job: to --out itself for a single job unless --out is an existing
/// directory, into --out as a directory otherwise. Returns 5 if any run hit a numeric failure.
template <class Fn>
int run_grid(const RunArgs &a, const Globals &g, const TabularBenchmark &bench, spdlog::logger &log,
             const std::string &method, Fn &&run_one) {
  require_out(g);
  if (a.datasets.empty()) usage("--dataset is required");
  if (a.budget_seconds.has_value() == a.budget_median_runs.has_value()) {
    usage("give exactly one of --budget-seconds and --budget-median-runs");
  }
  if (a.budget_seconds && !(*a.budget_seconds > 0.0)) usage("--budget-seconds must be > 0");
  if (a.budget_median_runs && !(*a.budget_median_runs > 0.0)) usage("--budget-median-runs must be > 0");
  std::vector<Job> grid;
  for (const auto &id : a.datasets) {
    const auto d = resolve_dataset(bench.metadataset(), id);
    for (int s = 0; s < a.seeds; ++s) grid.push_back({d, g.seed + static_cast<std::uint64_t>(s)});
  }
  const bool single = grid.size() == 1 && !fs::is_directory(g.out);
  std::atomic<std::size_t> next{0};
  std::atomic<int> status{0};
  std::mutex err_mu;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < grid.size();) {
      try {
        const auto &job = grid[i];
        const auto view = bench.view(job.dataset);
        const double budget = run_budget(a, bench.metadataset().datasets[job.dataset]);
        RunTrace t = run_one(view, budget, job.seed);
        t.method = method;
        t.flags["cli"] = {{"bench", a.bench},
                          {"dataset", view.name()},
                          {"seed", job.seed},
                          {"budget_seconds", a.budget_seconds ? ojson(*a.budget_seconds) : ojson(nullptr)},
                          {"budget_median_runs",
                           a.budget_median_runs ? ojson(*a.budget_median_runs) : ojson(nullptr)}};
        const fs::path path = single ? fs::path(g.out)
                                     : fs::path(g.out) / (method + "__" + view.name() + "__s" +
                                                          std::to_string(job.seed) + ".json");
        write_file(path, trace_to_json(t).dump(1) + "\n");
        if (!t.error.empty()) {
          log.error("{} on {} seed {}: {}", method, view.name(), job.seed, t.error);
          if (t.error.rfind("singular", 0) == 0) status = 5;
        }
        log.info("{} {} seed {}: {} steps, best loss {}", method, view.name(), job.seed, t.steps.size(),
                 t.best ? t.best->loss : 1.0);
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int n_workers = std::max(1, std::min<int>(a.jobs, static_cast<int>(grid.size())));
  std::vector<std::thread> pool;
  for (int w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto &t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return status;
}

int cmd_tune(const TuneArgs &a, const Globals &g, spdlog::logger &log) {
  TuneConfig cfg = a.cfg;
  cfg.use_meta = true;
  for (const auto &x : a.ablate) {
    if (x == "no-meta") cfg.use_meta = false;
    else if (x == "no-cost") cfg.use_cost = false;
    else if (x == "full-fidelity") cfg.full_fidelity = true;
  }
  cfg.measure_overhead = a.record_overhead || cfg.count_overhead;
  if (a.run.bench.empty()) usage("--bench is required");
  std::optional<MetaCheckpoint> ck;
  if (cfg.use_meta) {
    if (a.checkpoint.empty()) usage("--checkpoint is required unless --ablate no-meta is given");
    try {
      ck = load_checkpoint(a.checkpoint);
    } catch (const std::runtime_error &e) {
      throw CliError(3, e.what());
    } catch (const std::invalid_argument &e) {
      throw CliError(3, a.checkpoint + ": " + e.what());
    }
  }
  const TabularBenchmark bench(load_bench(a.run.bench));
  std::string method = std::string("qt") + (cfg.use_meta ? "+m" : "-m") + (cfg.use_cost ? "+c" : "-c");
  if (cfg.full_fidelity) method += "-g";
  return run_grid(a.run, g, bench, log, method, [&](const BenchView &v, double budget, std::uint64_t seed) {
    TuneConfig c = cfg;
    c.budget = budget;
    c.seed = seed;
    return quick_tune(v, c, ck ? &*ck : nullptr, method);
  });
}

int cmd_baseline(const BaselineArgs &a, const Globals &g, spdlog::logger &log) {
  if (a.run.bench.empty()) usage("--bench is required");
  if (a.sha.eta < 2) usage("--eta must be >= 2");
  const TabularBenchmark bench(load_bench(a.run.bench));
  if (a.method == "sha") sha_rungs(a.sha.r_min, a.sha.eta, bench.metadataset().max_epoch);
  return run_grid(a.run, g, bench, log, a.method, [&](const BenchView &v, double budget, std::uint64_t seed) {
    if (a.method == "random") return random_search(v, budget, seed);
    if (a.method == "sha") return successive_halving(v, budget, a.sha, seed);
    TuneConfig c = a.cfg;
    c.budget = budget;
    c.seed = seed;
    c.measure_overhead = false;
    return gp_full(v, c);
  });
}

// ---------------------------------------------------------------------------
// report

int cmd_report(const std::string &runs, const std::string &bench_dir, const Globals &g, spdlog::logger &log) {
  require_out(g);
  if (runs.empty() || bench_dir.empty()) usage("--runs and --bench are required");
  if (!fs::is_directory(runs)) throw CliError(3, "runs directory '" + runs + "' not found");
  std::vector<fs::path> files;
  for (const auto &e : fs::directory_iterator(runs)) {
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw CliError(4, "no results in '" + runs + "'");
  const TabularBenchmark bench(load_bench(bench_dir));
  std::vector<MethodResult> results;
  ojson names = ojson::array();
  for (const auto &f : files) {
    RunTrace t;
    try {
      t = trace_from_json(ojson::parse(read_file(f)));
    } catch (const nlohmann::json::exception &e) {
      throw CliError(3, f.string() + ": not a run trace (" + e.what() + ")");
    }
    const auto d = bench.metadataset().dataset_index(t.dataset);
    results.push_back(evaluate_trace(std::move(t), bench.bounds(d)));
    names.push_back(f.filename().string());
  }
  std::sort(results.begin(), results.end(), [](const MethodResult &a, const MethodResult &b) {
    return std::tie(a.method, a.dataset, a.seed) < std::tie(b.method, b.dataset, b.seed);
  });
  const fs::path out = g.out;
  write_file(out / "results.csv", results_csv(results));
  write_file(out / "ranks.csv", ranks_csv(rank_results(results)));
  write_file(out / "regret_curves.csv", regret_curves_csv(results));
  ojson manifest;
  manifest["runs"] = runs;
  manifest["bench"] = bench_dir;
  manifest["files"] = names;
  write_file(out / "report_manifest.json", manifest.dump(2) + "\n");
  log.info("summarized {} runs into {}", results.size(), g.out);
  return 0;
}

const auto at_least_one = CLI::Range(1L, static_cast<long>(std::numeric_limits<int>::max()));

void add_run_flags(CLI::App *sub, RunArgs &r) {
  sub->add_option("--bench", r.bench, "Benchmark directory")->required();
  sub->add_option("--dataset", r.datasets, "Dataset name (repeatable)")->required();
  sub->add_option("--budget-seconds", r.budget_seconds, "Simulated budget per run");
  sub->add_option("--budget-median-runs", r.budget_median_runs,
                  "Budget as a multiple of the median pipeline's full training cost");
  sub->add_option("--seeds", r.seeds, "Seeds per dataset, counting up from --seed")->check(at_least_one);
  sub->add_option("--jobs", r.jobs, "Parallel runs")->check(at_least_one);
}

void add_surrogate_flags(CLI::App *sub, TuneConfig &c) {
  sub->add_option("--delta-t", c.delta_t, "Epochs per step")->check(at_least_one);
  sub->add_option("--fit-steps", c.fit_steps, "Adam steps per refit")->check(CLI::Range(0, std::numeric_limits<int>::max()));
  sub->add_option("--lr", c.lr, "Refit learning rate")->check(CLI::PositiveNumber);
  sub->add_option("--refit-growth", c.refit_growth, "Refit once the history grew by this fraction")
      ->check(CLI::NonNegativeNumber);
  sub->add_option("--max-fit-points", c.max_fit_points, "Cap on refit points (0: all)");
  sub->add_option("--max-condition-points", c.max_condition_points, "Cap on conditioning points (0: all)");
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Cost-aware gray-box pipeline tuning on tabular benchmarks"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Root seed");
  app.add_option("--out", g.out, "Output file or directory");
  app.add_flag("--quiet", g.quiet, "Only log errors");

  GenArgs gen;
  auto *gen_cmd = app.add_subcommand("gen", "Generate a synthetic meta-dataset");
  gen_cmd->add_option("--space", gen.space, "Search-space JSON (default: built-in)");
  gen_cmd->add_option("--clusters", gen.cfg.n_clusters, "Dataset clusters")->check(at_least_one);
  gen_cmd->add_option("--datasets", gen.cfg.n_datasets, "Datasets")->check(at_least_one);
  gen_cmd->add_option("--models", gen.cfg.n_models, "Hub models")->check(at_least_one);
  gen_cmd->add_option("--configs", gen.cfg.configs_per_dataset, "Pipelines per dataset")->check(at_least_one);
  gen_cmd->add_option("--epochs", gen.cfg.max_epoch, "Curve length")->check(at_least_one);
  gen_cmd->add_option("--noise", gen.cfg.noise, "Loss noise")->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--cost-base", gen.cfg.cost_base, "Base seconds per epoch")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--cost-jitter", gen.cfg.cost_jitter, "Relative per-pipeline cost noise")
      ->check(CLI::Range(0.0, 0.999));

  std::string models_path;
  auto *pareto_cmd = app.add_subcommand("pareto", "Select the Pareto-optimal models");
  pareto_cmd->add_option("--models", models_path, "Models JSON")->required();

  MetaArgs meta;
  auto *meta_cmd = app.add_subcommand("metatrain", "Meta-train the loss and cost predictors");
  meta_cmd->add_option("--bench", meta.bench, "Benchmark directory")->required();
  meta_cmd->add_option("--folds", meta.folds, "Dataset folds")->check(at_least_one);
  meta_cmd->add_option("--val-fold", meta.val_fold, "Validation fold");
  meta_cmd->add_option("--test-fold", meta.test_fold, "Fold left out entirely");
  meta_cmd->add_option("--iters", meta.cfg.iters, "Iterations")->check(CLI::Range(0, std::numeric_limits<int>::max()));
  meta_cmd->add_option("--lr", meta.cfg.lr, "Learning rate")->check(CLI::PositiveNumber);
  meta_cmd->add_option("--batch", meta.cfg.batch, "Batch size")->check(at_least_one);
  meta_cmd->add_option("--eval-every", meta.cfg.eval_every, "Validation interval")->check(at_least_one);
  meta_cmd->add_option("--patience", meta.cfg.patience, "Evaluations without improvement before stopping")
      ->check(at_least_one);
  meta_cmd->add_option("--delta-t", meta.cfg.delta_t, "Epoch step")->check(at_least_one);

  TuneArgs tune;
  auto *tune_cmd = app.add_subcommand("tune", "Run the tuner on benchmark datasets");
  add_run_flags(tune_cmd, tune.run);
  add_surrogate_flags(tune_cmd, tune.cfg);
  tune_cmd->add_option("--checkpoint", tune.checkpoint, "Meta-trained checkpoint");
  tune_cmd->add_option("--ablate", tune.ablate, "Disable a component (repeatable)")
      ->check(CLI::IsMember({"no-meta", "no-cost", "full-fidelity"}));
  tune_cmd->add_flag("--count-overhead", tune.cfg.count_overhead, "Charge wall-clock overhead to the budget");
  tune_cmd->add_flag("--record-overhead", tune.record_overhead, "Record wall-clock overhead in traces");

  BaselineArgs base;
  auto *base_cmd = app.add_subcommand("baseline", "Run a baseline optimizer");
  add_run_flags(base_cmd, base.run);
  add_surrogate_flags(base_cmd, base.cfg);
  base_cmd->add_option("--method", base.method, "random, sha or gp-full")
      ->required()
      ->check(CLI::IsMember({"random", "sha", "gp-full"}));
  base_cmd->add_option("--eta", base.sha.eta, "Successive-halving reduction factor");
  base_cmd->add_option("--r-min", base.sha.r_min, "Successive-halving minimum epochs")->check(at_least_one);

  std::string runs_dir, report_bench;
  auto *report_cmd = app.add_subcommand("report", "Summarize run traces into CSV reports");
  report_cmd->add_option("--runs", runs_dir, "Directory of run traces")->required();
  report_cmd->add_option("--bench", report_bench, "Benchmark directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    app.exit(e);
    return 2;
  }

  auto log = make_logger(g.quiet);
  try {
    if (*gen_cmd) return cmd_gen(gen, g, *log);
    if (*pareto_cmd) return cmd_pareto(models_path, g, *log);
    if (*meta_cmd) return cmd_metatrain(meta, g, *log);
    if (*tune_cmd) return cmd_tune(tune, g, *log);
    if (*base_cmd) return cmd_baseline(base, g, *log);
    if (*report_cmd) return cmd_report(runs_dir, report_bench, g, *log);
  } catch (const CliError &e) {
    log->error("{}", e.what());
    return e.code;
  } catch (const SingularKernelError &e) {
    log->error("numeric failure: {}", e.what());
    return 5;
  } catch (const NonFiniteError &e) {
    log->error("numeric failure: {}", e.what());
    return 5;
  } catch (const BenchFormatError &e) {
    log->error("{}", e.what());
    return 3;
  } catch (const std::filesystem::filesystem_error &e) {
    log->error("{}", e.what());
    return 3;
  } catch (const std::invalid_argument &e) {
    log->error("{}", e.what());
    return 2;
  } catch (const std::exception &e) {
    log->error("{}", e.what());
    return 3;
  }
  return 2;
}
