#pragma once

// Baseline optimizers, normalized regret, rank aggregation and CSV reports.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "quicktune/optimizer.hpp"

namespace quicktune {

// ---------------------------------------------------------------------------
// Baselines

/// Samples pipelines uniformly without replacement and trains each to the
/// last epoch, one epoch per step, until the budget runs out.
inline RunTrace random_search(const BenchView &bench, double budget, std::uint64_t seed) {
  if (!(budget > 0.0)) throw ValidationError("budget must be > 0");
  const int n_epochs = bench.max_epoch();
  RunRecorder run(bench, budget, 1, false);
  run.trace().method = "random";
  run.trace().seed = seed;
  run.trace().flags = {{"budget", budget}};

  std::vector<PipelineId> fresh(bench.pipeline_count());
  std::iota(fresh.begin(), fresh.end(), PipelineId{0});
  Rng rng = substream(seed, "random.order");
  PipelineId current = initial_pipeline(bench.pipeline_count(), seed);
  fresh.erase(std::find(fresh.begin(), fresh.end(), current));
  try {
    run.evaluate(current, 1);
    while (run.budget_left()) {
      int next = run.history().max_epoch(current) + 1;
      if (next > n_epochs) {
        if (fresh.empty()) {
          run.trace().exhausted = true;
          break;
        }
        const auto k = static_cast<std::size_t>(uniform_index(rng, fresh.size()));
        current = fresh[k];
        fresh.erase(fresh.begin() + static_cast<std::ptrdiff_t>(k));
        next = 1;
      }
      run.evaluate(current, next);
    }
  } catch (const std::out_of_range &e) {
    run.abort(std::string("query failed: ") + e.what());
  }
  return run.finish();
}

struct ShaConfig {
  int eta = 3;
  int r_min = 1;
};

/// Rung epochs r_min, r_min*eta, ... not exceeding the last epoch.
inline std::vector<int> sha_rungs(int r_min, int eta, int max_epoch) {
  if (eta < 2) throw ValidationError("eta must be >= 2");
  if (r_min < 1 || r_min > max_epoch) throw ValidationError("r_min must be in [1, N]");
  std::vector<int> rungs;
  for (long r = r_min; r <= max_epoch; r *= eta) rungs.push_back(static_cast<int>(r));
  return rungs;
}

/// Indices of the best floor(n/eta) (at least one) entries by loss; ties go
/// to the lower pipeline id.
inline std::vector<PipelineId> sha_promote(std::vector<std::pair<double, PipelineId>> scored, int eta) {
  std::sort(scored.begin(), scored.end());
  const std::size_t keep = std::max<std::size_t>(1, scored.size() / static_cast<std::size_t>(eta));
  std::vector<PipelineId> out;
  for (std::size_t i = 0; i < keep && i < scored.size(); ++i) out.push_back(scored[i].second);
  return out;
}

/// Synchronous successive halving. Brackets of eta^(rungs-1) pipelines race
/// through the rungs; promoted pipelines resume from their last epoch so only
/// new epochs are charged. Brackets repeat until the budget runs out.
inline RunTrace successive_halving(const BenchView &bench, double budget, const ShaConfig &sha,
                                   std::uint64_t seed) {
  if (!(budget > 0.0)) throw ValidationError("budget must be > 0");
  const int n_epochs = bench.max_epoch();
  const auto rungs = sha_rungs(sha.r_min, sha.eta, n_epochs);
  std::size_t bracket_size = 1;
  for (std::size_t k = 1; k < rungs.size(); ++k) bracket_size *= static_cast<std::size_t>(sha.eta);

  RunRecorder run(bench, budget, 1, false);
  run.trace().method = "sha";
  run.trace().seed = seed;
  run.trace().flags = {{"budget", budget}, {"eta", sha.eta}, {"r_min", sha.r_min}};
  Rng rng = substream(seed, "sha.sample");
  const std::size_t n_pipes = bench.pipeline_count();
  std::vector<PipelineId> fresh(n_pipes);
  std::iota(fresh.begin(), fresh.end(), PipelineId{0});
  const PipelineId first = initial_pipeline(n_pipes, seed);
  fresh.erase(std::find(fresh.begin(), fresh.end(), first));

  // Trains `id` up to `epoch`; false when the budget ran out first.
  auto advance = [&](PipelineId id, int epoch) {
    for (int e = run.history().max_epoch(id) + 1; e <= epoch; ++e) {
      if (!run.history().empty() && !run.budget_left()) return false;
      run.evaluate(id, e);
    }
    return true;
  };

  try {
    bool first_bracket = true;
    while (run.budget_left()) {
      std::vector<PipelineId> bracket;
      if (first_bracket) bracket.push_back(first);
      first_bracket = false;
      while (bracket.size() < bracket_size && !fresh.empty()) {
        const auto k = static_cast<std::size_t>(uniform_index(rng, fresh.size()));
        bracket.push_back(fresh[k]);
        fresh.erase(fresh.begin() + static_cast<std::ptrdiff_t>(k));
      }
      // Once every pipeline has been started, refill with ones that have not
      // reached the top rung yet.
      if (bracket.size() < bracket_size) {
        std::vector<PipelineId> open;
        for (PipelineId id = 0; id < n_pipes; ++id) {
          if (run.history().max_epoch(id) < rungs.back() &&
              std::find(bracket.begin(), bracket.end(), id) == bracket.end())
            open.push_back(id);
        }
        while (bracket.size() < bracket_size && !open.empty()) {
          const auto k = static_cast<std::size_t>(uniform_index(rng, open.size()));
          bracket.push_back(open[k]);
          open.erase(open.begin() + static_cast<std::ptrdiff_t>(k));
        }
      }
      if (bracket.empty()) {
        run.trace().exhausted = true;
        break;
      }
      bool out_of_budget = false;
      for (std::size_t r = 0; r < rungs.size() && !bracket.empty(); ++r) {
        std::vector<std::pair<double, PipelineId>> scored;
        for (PipelineId id : bracket) {
          if (!advance(id, rungs[r])) {
            out_of_budget = true;
            break;
          }
          const auto &obs = run.history()[run.history().of(id)[static_cast<std::size_t>(rungs[r] - 1)]];
          scored.emplace_back(obs.val_loss, id);
        }
        if (out_of_budget) break;
        if (r + 1 < rungs.size()) bracket = sha_promote(std::move(scored), sha.eta);
      }
      if (out_of_budget) break;
    }
  } catch (const std::out_of_range &e) {
    run.abort(std::string("query failed: ") + e.what());
  }
  return run.finish();
}

/// Full-fidelity GP baseline: every evaluation trains to the last epoch,
/// plain EI without cost scaling or meta-learning.
inline RunTrace gp_full(const BenchView &bench, TuneConfig cfg) {
  cfg.full_fidelity = true;
  cfg.use_meta = false;
  cfg.use_cost = false;
  return quick_tune(bench, cfg, nullptr, "gp-full");
}

// ---------------------------------------------------------------------------
// Metrics

struct Regret {
  double value = 0.0;
  bool clamped = false;
  bool degenerate = false;
};

/// (y_max - y) / (y_max - y_min), with y clamped into the bounds.
inline Regret normalized_regret(double y, double y_min, double y_max) {
  if (!(y_max > y_min)) return {0.0, false, true};
  Regret r;
  if (y > y_max) {
    y = y_max;
    r.clamped = true;
  } else if (y < y_min) {
    y = y_min;
    r.clamped = true;
  }
  r.value = std::clamp((y_max - y) / (y_max - y_min), 0.0, 1.0);
  return r;
}

/// Regret of a best observed loss, with performance = 1 - loss.
inline Regret loss_regret(double best_loss, const PerformanceBounds &b) {
  return normalized_regret(1.0 - best_loss, b.y_min, b.y_max);
}

/// Right-continuous incumbent regret sampled at each grid time; 1 before
/// the first evaluation completes.
inline std::vector<double> regret_over_time(const RunTrace &t, const PerformanceBounds &b,
                                            std::span<const double> grid) {
  std::vector<double> out;
  out.reserve(grid.size());
  std::size_t k = 0;
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> sorted(grid.begin(), grid.end());
  if (!std::is_sorted(sorted.begin(), sorted.end())) throw ValidationError("time grid must be sorted");
  for (double g : grid) {
    while (k < t.steps.size() && t.steps[k].cum_time <= g) best = std::min(best, t.steps[k++].loss);
    out.push_back(std::isinf(best) ? 1.0 : loss_regret(best, b).value);
  }
  return out;
}

/// Exact time-average of the incumbent-regret step function over
/// [0, horizon].
inline double regret_auc(const RunTrace &t, const PerformanceBounds &b, double horizon) {
  if (!(horizon > 0.0)) throw ValidationError("horizon must be > 0");
  double area = 0.0, at = 0.0, level = 1.0;
  double best = std::numeric_limits<double>::infinity();
  for (const auto &s : t.steps) {
    if (s.cum_time >= horizon) break;
    area += level * (s.cum_time - at);
    at = s.cum_time;
    best = std::min(best, s.loss);
    level = loss_regret(best, b).value;
  }
  area += level * (horizon - at);
  return area / horizon;
}

/// Trapezoid rule over a sampled series, divided by the grid span.
inline double trapezoid_auc(std::span<const double> grid, std::span<const double> values) {
  if (grid.size() != values.size() || grid.size() < 2) throw ValidationError("need >= 2 samples");
  double area = 0.0;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    area += 0.5 * (values[i] + values[i - 1]) * (grid[i] - grid[i - 1]);
  }
  return area / (grid.back() - grid.front());
}

inline std::vector<double> linear_grid(double lo, double hi, std::size_t points) {
  if (points < 2) throw ValidationError("grid needs >= 2 points");
  std::vector<double> g(points);
  for (std::size_t i = 0; i < points; ++i) {
    g[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
  }
  g.back() = hi;
  return g;
}

// ---------------------------------------------------------------------------
// Ranks

struct RankSummary {
  std::string method;
  double mean_rank = 0.0;
  double std_rank = 0.0;
};

/// cells[dataset][method] = final regret. Methods are ranked per dataset
/// (lower regret first, ties averaged); mean and population standard
/// deviation are taken across datasets. Output follows method name order.
inline std::vector<RankSummary> rank_table(
    const std::map<std::string, std::map<std::string, double>> &cells) {
  if (cells.empty()) throw ValidationError("rank table needs at least one dataset");
  std::vector<std::string> methods;
  for (const auto &[m, _] : cells.begin()->second) methods.push_back(m);
  std::map<std::string, std::vector<double>> ranks;
  for (const auto &[dataset, row] : cells) {
    std::vector<double> regrets;
    for (const auto &m : methods) {
      const auto it = row.find(m);
      if (it == row.end()) throw ValidationError("method '" + m + "' missing on dataset '" + dataset + "'");
      regrets.push_back(it->second);
    }
    if (row.size() != methods.size()) {
      throw ValidationError("dataset '" + dataset + "' has methods absent elsewhere");
    }
    const auto r = average_ranks(regrets);
    for (std::size_t i = 0; i < methods.size(); ++i) ranks[methods[i]].push_back(r[i]);
  }
  std::vector<RankSummary> out;
  for (const auto &m : methods) {
    const auto &v = ranks[m];
    const double n = static_cast<double>(v.size());
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    out.push_back({m, mean, std::sqrt(ss / n)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

struct MethodResult {
  std::string method;
  std::string dataset;
  std::uint64_t seed = 0;
  RunTrace trace;
  double final_regret = 1.0;
  double auc_regret = 1.0;
  std::vector<double> grid;
  std::vector<double> regret_series;
};

inline MethodResult evaluate_trace(RunTrace trace, const PerformanceBounds &b,
                                   std::size_t grid_points = 51) {
  MethodResult r;
  r.method = trace.method;
  r.dataset = trace.dataset;
  r.seed = trace.seed;
  if (trace.best) r.final_regret = loss_regret(trace.best->loss, b).value;
  r.auc_regret = regret_auc(trace, b, trace.budget);
  r.grid = linear_grid(0.0, trace.budget, grid_points);
  r.regret_series = regret_over_time(trace, b, r.grid);
  r.trace = std::move(trace);
  return r;
}

inline std::string csv_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string results_csv(const std::vector<MethodResult> &rs) {
  std::string out = "method,dataset,seed,final_regret,auc_regret,steps,sim_seconds,overhead_seconds\n";
  for (const auto &r : rs) {
    out += r.method + ',' + r.dataset + ',' + std::to_string(r.seed) + ',' + csv_number(r.final_regret) +
           ',' + csv_number(r.auc_regret) + ',' + std::to_string(r.trace.steps.size()) + ',' +
           csv_number(r.trace.sim_seconds()) + ',' + csv_number(r.trace.overhead_seconds) + '\n';
  }
  return out;
}

/// Seeds are averaged per (dataset, method) before ranking.
inline std::vector<RankSummary> rank_results(const std::vector<MethodResult> &rs) {
  std::map<std::string, std::map<std::string, std::pair<double, int>>> acc;
  for (const auto &r : rs) {
    auto &c = acc[r.dataset][r.method];
    c.first += r.final_regret;
    c.second += 1;
  }
  std::map<std::string, std::map<std::string, double>> cells;
  for (const auto &[d, row] : acc)
    for (const auto &[m, c] : row) cells[d][m] = c.first / c.second;
  return rank_table(cells);
}

inline std::string ranks_csv(const std::vector<RankSummary> &ranks) {
  std::string out = "method,mean_rank,std_rank\n";
  for (const auto &r : ranks) out += r.method + ',' + csv_number(r.mean_rank) + ',' + csv_number(r.std_rank) + '\n';
  return out;
}

inline std::string regret_curves_csv(const std::vector<MethodResult> &rs) {
  std::string out = "method,dataset,seed,time,regret\n";
  for (const auto &r : rs) {
    for (std::size_t i = 0; i < r.grid.size(); ++i) {
      out += r.method + ',' + r.dataset + ',' + std::to_string(r.seed) + ',' + csv_number(r.grid[i]) + ',' +
             csv_number(r.regret_series[i]) + '\n';
    }
  }
  return out;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw ValidationError("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace quicktune
