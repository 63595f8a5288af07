#pragma once

// Expected Improvement for loss minimization and its multi-fidelity,
// cost-aware variant: EI at the next unobserved epoch divided by the
// predicted cost of reaching it.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "quicktune/costmodel.hpp"
#include "quicktune/surrogate.hpp"

namespace quicktune {

class SearchExhausted : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline double normal_pdf(double u) {
  return std::exp(-0.5 * u * u) / std::sqrt(2.0 * std::numbers::pi);
}

inline double normal_cdf(double u) { return 0.5 * std::erfc(-u / std::numbers::sqrt2); }

/// E[max(best - L, 0)] for L ~ N(mean, stddev^2).
inline double expected_improvement(double mean, double stddev, double best) {
  if (!(stddev > 0.0)) return std::max(best - mean, 0.0);
  const double diff = best - mean;
  const double u = diff / stddev;
  return std::max(0.0, diff * normal_cdf(u) + stddev * normal_pdf(u));
}

struct AcqConfig {
  bool cost_aware = true;
  int delta_t = 1;
  std::size_t candidate_cap = 2000;
  double eps_cost = min_step_cost;
};

inline double ei_per_unit_cost(double ei, double step_cost, bool cost_aware) {
  return cost_aware ? ei / step_cost : ei;
}

/// Everything the scorer needs besides the predictors.
struct ScoringContext {
  const History &history;
  const std::vector<EncodedPipeline> &encodings;
  MetaFeatures meta;
  int max_epoch = 50;
  bool use_curve = true;
  const std::vector<SurrogateInput> &train_inputs;
  std::span<const double> train_losses;
};

struct CandidateScore {
  PipelineId id = 0;
  int epoch = 0;
  double mean = 0.0;
  double stddev = 0.0;
  double incumbent = 0.0;
  double ei = 0.0;
  double step_cost = 1.0;
  double score = 0.0;
};

/// Scores candidates at their next query epoch. Fidelity-exhausted ids are
/// dropped. The cost predictor is only consulted when cost-aware.
inline std::vector<CandidateScore> score_candidates(std::span<const PipelineId> ids,
                                                    const ScoringContext &ctx, DeepKernelGP &gp,
                                                    CostPredictor *cp, const AcqConfig &cfg) {
  if (cfg.delta_t < 1) throw std::invalid_argument("epoch step must be >= 1");
  std::vector<CandidateScore> out;
  std::vector<SurrogateInput> test;
  for (PipelineId id : ids) {
    const int at = tau(ctx.history, id, cfg.delta_t);
    if (at > ctx.max_epoch) continue;
    CandidateScore s;
    s.id = id;
    s.epoch = at;
    out.push_back(s);
    test.push_back(make_input(ctx.history, id, ctx.encodings.at(id), ctx.meta, ctx.max_epoch, at,
                              ctx.use_curve));
  }
  if (out.empty()) return out;
  const auto post = gp.posterior(ctx.train_inputs, ctx.train_losses, test,
                                 PosteriorOptions{.full_cov = false, .include_noise = true});
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto &s = out[i];
    s.mean = post.mean[i];
    s.stddev = std::sqrt(std::max(0.0, post.variance[i]));
    s.incumbent = incumbent(ctx.history, s.epoch);
    s.ei = expected_improvement(s.mean, s.stddev, s.incumbent);
    if (cfg.cost_aware) {
      if (!cp) throw std::invalid_argument("cost-aware scoring needs a cost predictor");
      s.step_cost = std::max(cp->predict(test[i]) - ctx.history.last_cost(s.id), cfg.eps_cost);
    } else {
      s.step_cost = 1.0;
    }
    s.score = ei_per_unit_cost(s.ei, s.step_cost, cfg.cost_aware);
  }
  return out;
}

/// Score of one pipeline; throws FidelityExhausted past the last epoch.
inline double ei_per_unit_cost(PipelineId id, const ScoringContext &ctx, DeepKernelGP &gp,
                               CostPredictor *cp, const AcqConfig &cfg) {
  const PipelineId one[] = {id};
  const auto s = score_candidates(one, ctx, gp, cp, cfg);
  if (s.empty()) throw FidelityExhausted("pipeline " + std::to_string(id) + " is fully evaluated");
  return s.front().score;
}

/// Highest-scoring candidate; ties go to the lowest pipeline id.
inline std::optional<CandidateScore> argmax_score(std::span<const CandidateScore> scores) {
  std::optional<CandidateScore> best;
  for (const auto &s : scores) {
    if (!best || s.score > best->score || (s.score == best->score && s.id < best->id)) best = s;
  }
  return best;
}

/// Picks the next pipeline from `pool`. Pools above the cap are subsampled
/// with `rng`. Throws SearchExhausted when nothing can be advanced.
inline CandidateScore select_next(std::span<const PipelineId> pool, const ScoringContext &ctx,
                                  DeepKernelGP &gp, CostPredictor *cp, const AcqConfig &cfg,
                                  Rng &rng) {
  if (cfg.candidate_cap < 1) throw std::invalid_argument("candidate cap must be >= 1");
  std::vector<PipelineId> open;
  for (PipelineId id : pool) {
    if (tau(ctx.history, id, cfg.delta_t) <= ctx.max_epoch) open.push_back(id);
  }
  if (open.empty()) throw SearchExhausted("every candidate is at its last epoch");
  std::sort(open.begin(), open.end());
  if (open.size() > cfg.candidate_cap) {
    shuffle(open, rng);
    open.resize(cfg.candidate_cap);
    std::sort(open.begin(), open.end());
  }
  const auto scores = score_candidates(open, ctx, gp, cp, cfg);
  return *argmax_score(scores);
}

} // namespace quicktune
