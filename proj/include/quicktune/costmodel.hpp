#pragma once

// Point-estimate runtime predictor. Regresses log(1 + cumulative seconds)
// with a linear head on top of its own feature extractor.

#include <cmath>
#include <span>
#include <vector>

#include "quicktune/surrogate.hpp"

namespace quicktune {

inline constexpr double min_step_cost = 1e-6;

class FidelityExhausted : public std::out_of_range {
public:
  using std::out_of_range::out_of_range;
};

class CostPredictor {
public:
  CostPredictor() = default;
  CostPredictor(std::size_t enc_width, std::size_t hub_size, int max_epoch, std::uint64_t seed)
      : fx_("", enc_width, hub_size, max_epoch), head_("head", feature_width, 1) {
    Rng rng = substream(seed, "cost.init");
    fx_.init(rng);
    head_.init(rng);
  }

  FeatureExtractor &extractor() { return fx_; }
  AdamState &adam() { return adam_; }

  ParamList params() {
    ParamList p = fx_.params();
    for (auto *b : head_.params()) p.push_back(b);
    return p;
  }

  /// Unclamped head output, in log(1 + seconds).
  double raw(const SurrogateInput &in) {
    const auto z = memo_.get(in, signature(fx_.params()), [&] { return fx_.forward(in); });
    double out = 0.0;
    head_.forward(z, std::span<double>(&out, 1));
    return out;
  }

  /// Predicted cumulative cost in seconds; never negative.
  double predict(const SurrogateInput &in) { return std::expm1(std::max(0.0, raw(in))); }

  /// Mean squared error in log(1 + cost) space.
  double loss(const std::vector<SurrogateInput> &train, std::span<const double> costs) {
    if (train.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < train.size(); ++i) {
      const double e = raw(train[i]) - std::log1p(costs[i]);
      s += e * e;
    }
    return s / static_cast<double>(train.size());
  }

  double loss_with_grad(const std::vector<SurrogateInput> &train, std::span<const double> costs) {
    const std::size_t n = train.size();
    if (n == 0) return 0.0;
    double s = 0.0;
    FeatureTrace trace;
    std::vector<double> dz(feature_width);
    for (std::size_t i = 0; i < n; ++i) {
      const auto z = fx_.forward(train[i], trace);
      double out = 0.0;
      head_.forward(z, std::span<double>(&out, 1));
      const double e = out - std::log1p(costs[i]);
      s += e * e;
      const double g = 2.0 * e / static_cast<double>(n);
      head_.backward(z, std::span<const double>(&g, 1), dz);
      fx_.backward(trace, dz);
    }
    return s / static_cast<double>(n);
  }

private:
  FeatureExtractor fx_;
  Dense head_;
  AdamState adam_;
  FeatureMemo memo_;
};

inline FitResult fit_cost(CostPredictor &cp, const std::vector<SurrogateInput> &train,
                          std::span<const double> costs, int steps = 100, double lr = 1e-4) {
  if (train.empty()) return {};
  if (train.size() != costs.size()) throw std::invalid_argument("inputs/targets length mismatch");
  return adam_fit(cp.params(), cp.adam(), steps, lr,
                  [&] { return cp.loss_with_grad(train, costs); });
}

/// Denominator of the cost-aware acquisition: predicted cumulative cost at
/// the query epoch minus the observed cumulative cost one step earlier.
inline double step_cost_from(double predicted_cum_cost, double observed_prev_cost) {
  return std::max(predicted_cum_cost - observed_prev_cost, min_step_cost);
}

inline double next_step_cost(CostPredictor &cp, PipelineId id, const EncodedPipeline &enc,
                             const History &h, const MetaFeatures &d, int delta_t, int max_epoch,
                             bool use_curve = true) {
  const int at = tau(h, id, delta_t);
  if (at > max_epoch) {
    throw FidelityExhausted("pipeline " + std::to_string(id) + " already at the last epoch");
  }
  const auto in = make_input(h, id, enc, d, max_epoch, at, use_curve);
  return step_cost_from(cp.predict(in), h.last_cost(id));
}

} // namespace quicktune
