#pragma once

// The gray-box, cost-aware BO loop and the budget accounting shared by every
// optimizer that runs against a tabular benchmark.

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "quicktune/acquisition.hpp"
#include "quicktune/benchtab.hpp"
#include "quicktune/metalearn.hpp"

namespace quicktune {

struct TuneConfig {
  double budget = 0.0; // simulated seconds
  int delta_t = 1;
  bool use_meta = false;
  bool use_cost = true;
  bool full_fidelity = false; // one step straight to the last epoch, curves ignored
  int fit_steps = 100;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  bool count_overhead = false;
  bool measure_overhead = true;
  double refit_growth = 0.0;            // refit once the history grew by this fraction; 0: every step
  std::size_t max_fit_points = 0;       // 0: fit on the whole history
  std::size_t max_condition_points = 0; // 0: condition on the whole history
  std::size_t candidate_cap = 2000;

  int step(int max_epoch) const { return full_fidelity ? max_epoch : delta_t; }

  void validate(int max_epoch) const {
    if (!(budget > 0.0) || !std::isfinite(budget)) throw ValidationError("budget must be > 0");
    if (delta_t < 1) throw ValidationError("epoch step must be >= 1");
    if (step(max_epoch) > max_epoch) throw ValidationError("epoch step exceeds the maximum epoch");
    if (fit_steps < 0) throw ValidationError("fit steps must be >= 0");
    if (!(lr > 0.0)) throw ValidationError("learning rate must be > 0");
    if (!(refit_growth >= 0.0)) throw ValidationError("refit growth must be >= 0");
    if (candidate_cap < 1) throw ValidationError("candidate cap must be >= 1");
  }

  ojson to_json() const {
    ojson j;
    j["budget"] = budget;
    j["delta_t"] = delta_t;
    j["use_meta"] = use_meta;
    j["use_cost"] = use_cost;
    j["full_fidelity"] = full_fidelity;
    j["fit_steps"] = fit_steps;
    j["lr"] = lr;
    j["count_overhead"] = count_overhead;
    j["refit_growth"] = refit_growth;
    j["max_fit_points"] = max_fit_points;
    j["max_condition_points"] = max_condition_points;
    return j;
  }
};

struct TraceStep {
  PipelineId pipeline = 0;
  int epoch = 0;
  double loss = 0.0;
  double step_cost = 0.0;
  double cum_time = 0.0;
  double incumbent = 0.0;

  bool operator==(const TraceStep &) const = default;
};

struct RunTrace {
  std::string method;
  std::string dataset;
  std::uint64_t seed = 0;
  double budget = 0.0;
  ojson flags = ojson::object();
  std::vector<TraceStep> steps;
  std::optional<BestEntry> best;
  double overhead_seconds = 0.0;
  bool exhausted = false;
  std::string error; // set when the run aborted early

  double sim_seconds() const { return steps.empty() ? 0.0 : steps.back().cum_time; }
};

inline ojson trace_to_json(const RunTrace &t) {
  ojson j;
  j["method"] = t.method;
  j["dataset"] = t.dataset;
  j["seed"] = t.seed;
  j["budget"] = t.budget;
  j["flags"] = t.flags;
  ojson steps = ojson::array();
  for (const auto &s : t.steps) {
    ojson o;
    o["pipeline"] = s.pipeline;
    o["epoch"] = s.epoch;
    o["loss"] = s.loss;
    o["step_cost"] = s.step_cost;
    o["cum_time"] = s.cum_time;
    o["incumbent"] = s.incumbent;
    steps.push_back(std::move(o));
  }
  j["steps"] = std::move(steps);
  if (t.best) {
    j["best"] = {{"pipeline", t.best->pipeline_id}, {"epoch", t.best->epoch}, {"loss", t.best->loss}};
  } else {
    j["best"] = nullptr;
  }
  j["overhead_seconds"] = t.overhead_seconds;
  j["exhausted"] = t.exhausted;
  j["error"] = t.error.empty() ? ojson(nullptr) : ojson(t.error);
  return j;
}

inline RunTrace trace_from_json(const ojson &j) {
  RunTrace t;
  t.method = j.at("method").get<std::string>();
  t.dataset = j.at("dataset").get<std::string>();
  t.seed = j.at("seed").get<std::uint64_t>();
  t.budget = j.at("budget").get<double>();
  t.flags = j.value("flags", ojson::object());
  for (const auto &o : j.at("steps")) {
    t.steps.push_back({o.at("pipeline").get<PipelineId>(), o.at("epoch").get<int>(),
                       o.at("loss").get<double>(), o.at("step_cost").get<double>(),
                       o.at("cum_time").get<double>(), o.at("incumbent").get<double>()});
  }
  if (j.contains("best") && !j["best"].is_null()) {
    const auto &b = j["best"];
    t.best = BestEntry{b.at("pipeline").get<PipelineId>(), b.at("epoch").get<int>(),
                       b.at("loss").get<double>()};
  }
  t.overhead_seconds = j.value("overhead_seconds", 0.0);
  t.exhausted = j.value("exhausted", false);
  if (j.contains("error") && j["error"].is_string()) t.error = j["error"].get<std::string>();
  return t;
}

/// Running minimum of the trace's losses against simulated time.
inline std::vector<std::pair<double, double>> incumbent_curve(const RunTrace &t) {
  if (t.steps.empty()) throw EmptyHistoryError("incumbent curve of an empty trace");
  std::vector<std::pair<double, double>> out;
  double best = std::numeric_limits<double>::infinity();
  for (const auto &s : t.steps) {
    best = std::min(best, s.loss);
    out.emplace_back(s.cum_time, best);
  }
  return out;
}

/// Evaluates pipelines against a benchmark view and keeps the history, the
/// trace and the simulated clock. Every optimizer goes through this class,
/// so budget semantics are identical across methods.
class RunRecorder {
public:
  RunRecorder(const BenchView &bench, double budget, int delta_t, bool count_overhead)
      : bench_(&bench), history_(delta_t), count_overhead_(count_overhead) {
    trace_.dataset = bench.name();
    trace_.budget = budget;
  }

  const BenchView &bench() const { return *bench_; }
  const History &history() const { return history_; }
  RunTrace &trace() { return trace_; }

  double elapsed() const {
    return sim_time_ + (count_overhead_ ? trace_.overhead_seconds : 0.0);
  }
  bool budget_left() const { return elapsed() <= trace_.budget; }
  void add_overhead(double seconds) { trace_.overhead_seconds += seconds; }

  const TraceStep &evaluate(PipelineId id, int epoch) {
    const auto q = bench_->query(id, epoch);
    const double step_cost = q.cum_cost - history_.last_cost(id);
    history_.append({id, epoch, q.loss, q.cum_cost});
    sim_time_ += step_cost;
    best_ = std::min(best_, q.loss);
    trace_.steps.push_back({id, epoch, q.loss, step_cost, sim_time_, best_});
    return trace_.steps.back();
  }

  /// Records a failure and keeps whatever was evaluated so far.
  void abort(const std::string &why) { trace_.error = why; }

  RunTrace finish() {
    if (!history_.empty()) trace_.best = best_in_history(history_);
    return std::move(trace_);
  }

private:
  const BenchView *bench_;
  History history_;
  RunTrace trace_;
  bool count_overhead_;
  double sim_time_ = 0.0;
  double best_ = std::numeric_limits<double>::infinity();
};

/// The random draw every method starts from.
inline PipelineId initial_pipeline(std::size_t pipeline_count, std::uint64_t seed) {
  Rng rng = substream(seed, "initial");
  return static_cast<PipelineId>(uniform_index(rng, pipeline_count));
}

/// Observation indices used for fitting or conditioning when capped: the
/// latest observation of each pipeline (most recently touched first), then
/// the remaining observations from newest to oldest. Returned in append order.
inline std::vector<std::size_t> select_points(const History &h, std::size_t cap) {
  std::vector<std::size_t> all(h.size());
  std::iota(all.begin(), all.end(), 0);
  if (cap == 0 || h.size() <= cap) return all;
  std::vector<std::size_t> latest;
  for (PipelineId id : h.pipelines()) latest.push_back(h.of(id).back());
  std::sort(latest.rbegin(), latest.rend());
  std::vector<unsigned char> taken(h.size(), 0);
  std::vector<std::size_t> out;
  for (std::size_t i : latest) {
    if (out.size() == cap) break;
    out.push_back(i);
    taken[i] = 1;
  }
  for (std::size_t i = h.size(); i-- > 0 && out.size() < cap;) {
    if (!taken[i]) out.push_back(i);
  }
  std::sort(out.begin(), out.end());
  return out;
}

namespace detail {

class Stopwatch {
public:
  explicit Stopwatch(bool on) : on_(on) {
    if (on_) start_ = std::chrono::steady_clock::now();
  }
  double seconds() const {
    if (!on_) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

private:
  bool on_;
  std::chrono::steady_clock::time_point start_;
};

} // namespace detail

/// Gray-box BO over the pipelines of one benchmark dataset. Without
/// `use_meta` the checkpoint is never read.
inline RunTrace quick_tune(const BenchView &bench, const TuneConfig &cfg,
                           const MetaCheckpoint *checkpoint = nullptr,
                           const std::string &method = "quicktune") {
  const int n_epochs = bench.max_epoch();
  cfg.validate(n_epochs);
  const int dt = cfg.step(n_epochs);
  const bool use_curve = !cfg.full_fidelity;
  const auto &encodings = bench.encodings();
  if (encodings.empty()) throw ValidationError("benchmark has no pipelines");
  const std::size_t enc_width = encodings.front().features.size();
  const std::size_t hub = bench.space().hub().size();

  DeepKernelGP gp;
  CostPredictor cost;
  if (cfg.use_meta) {
    if (!checkpoint) throw ValidationError("meta-learned initialization needs a checkpoint");
    checkpoint->check_compatible(enc_width, hub, n_epochs);
    gp = checkpoint->gp;
    cost = checkpoint->cost;
    gp.adam() = AdamState{};
    cost.adam() = AdamState{};
  } else {
    gp = DeepKernelGP(enc_width, hub, n_epochs, cfg.seed);
    cost = CostPredictor(enc_width, hub, n_epochs, cfg.seed);
  }

  const bool timed = cfg.measure_overhead || cfg.count_overhead;
  RunRecorder run(bench, cfg.budget, dt, cfg.count_overhead);
  run.trace().method = method;
  run.trace().seed = cfg.seed;
  run.trace().flags = cfg.to_json();

  try {
    run.evaluate(initial_pipeline(bench.pipeline_count(), cfg.seed), dt);
  } catch (const std::exception &e) {
    run.abort(std::string("query failed: ") + e.what());
    return run.finish();
  }

  AcqConfig acq;
  acq.cost_aware = cfg.use_cost;
  acq.delta_t = dt;
  acq.candidate_cap = cfg.candidate_cap;
  Rng select_rng = substream(cfg.seed, "tune.select");
  std::vector<PipelineId> pool(bench.pipeline_count());
  std::iota(pool.begin(), pool.end(), PipelineId{0});

  double refit_at = 0.0;
  while (run.budget_left()) {
    const History &h = run.history();
    const bool any_open = std::any_of(pool.begin(), pool.end(),
                                      [&](PipelineId id) { return tau(h, id, dt) <= n_epochs; });
    if (!any_open) {
      run.trace().exhausted = true;
      break;
    }
    detail::Stopwatch clock(timed);
    CandidateScore pick;
    try {
      if (cfg.fit_steps > 0 && static_cast<double>(h.size()) >= refit_at) {
        refit_at = static_cast<double>(h.size()) * (1.0 + cfg.refit_growth);
        const auto fit_idx = select_points(h, cfg.max_fit_points);
        const auto ts = training_set(h, encodings, bench.meta(), n_epochs, use_curve, fit_idx);
        try {
          fit(gp, ts.inputs, ts.losses, cfg.fit_steps, cfg.lr);
        } catch (const SingularKernelError &) {
          // keep the previous surrogate parameters
        }
        if (cfg.use_cost) fit_cost(cost, ts.inputs, ts.costs, cfg.fit_steps, cfg.lr);
      }
      const auto cond_idx = select_points(h, cfg.max_condition_points);
      const auto cond = training_set(h, encodings, bench.meta(), n_epochs, use_curve, cond_idx);
      gp.fit_normalization(cond.losses);
      ScoringContext ctx{h, encodings, bench.meta(), n_epochs, use_curve, cond.inputs, cond.losses};
      pick = select_next(pool, ctx, gp, cfg.use_cost ? &cost : nullptr, acq, select_rng);
    } catch (const SearchExhausted &) {
      run.trace().exhausted = true;
      break;
    } catch (const SingularKernelError &e) {
      run.add_overhead(clock.seconds());
      run.abort(std::string("singular kernel: ") + e.what());
      break;
    }
    run.add_overhead(clock.seconds());
    try {
      run.evaluate(pick.id, pick.epoch);
    } catch (const std::exception &e) {
      run.abort(std::string("query failed: ") + e.what());
      break;
    }
  }
  return run.finish();
}

} // namespace quicktune
