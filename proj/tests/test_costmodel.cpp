#include <gtest/gtest.h>

#include <cmath>

#include "quicktune/costmodel.hpp"

using namespace quicktune;

namespace {

constexpr std::size_t enc_w = 5, hub_n = 2;
constexpr int max_n = 8;

SurrogateInput random_input(Rng &rng) {
  SurrogateInput in;
  in.enc.assign(enc_w, 0.0);
  for (std::size_t i = 0; i < enc_w - hub_n; ++i) in.enc[i] = uniform01(rng);
  in.enc[enc_w - hub_n + uniform_index(rng, hub_n)] = 1.0;
  in.epoch = 1 + static_cast<int>(uniform_index(rng, max_n));
  in.curve.assign(max_n, 0.0);
  for (int t = 0; t + 1 < in.epoch; ++t) in.curve[t] = uniform(rng, 0.1, 0.9);
  in.meta = {2000, 64, 3, 50};
  return in;
}

/// Seconds for `epoch` epochs of a pipeline whose model is the last one-hot.
double synthetic_cost(const SurrogateInput &in) {
  const double per_epoch = in.enc[enc_w - 1] == 1.0 ? 40.0 : 10.0;
  return per_epoch * in.epoch;
}

void jitter_params(CostPredictor &cp, std::uint64_t seed) {
  Rng rng = substream(seed, "jitter");
  auto params = cp.params();
  auto flat = snapshot(params);
  for (double &v : flat) v += (uniform01(rng) < 0.5 ? -1.0 : 1.0) * uniform(rng, 0.01, 0.05);
  restore(params, flat);
}

} // namespace

TEST(CostPredictorTest, LossIsMeanSquaredLog1pError) {
  CostPredictor cp(enc_w, hub_n, max_n, 1);
  Rng rng = substream(1, "data");
  std::vector<SurrogateInput> in;
  std::vector<double> cost;
  for (int i = 0; i < 7; ++i) {
    in.push_back(random_input(rng));
    cost.push_back(synthetic_cost(in.back()));
  }
  double want = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) want += std::pow(cp.raw(in[i]) - std::log(1.0 + cost[i]), 2);
  want /= static_cast<double>(in.size());
  EXPECT_NEAR(cp.loss(in, cost), want, 1e-12);
  EXPECT_NEAR(cp.loss_with_grad(in, cost), want, 1e-12);
  EXPECT_EQ(cp.loss({}, {}), 0.0);
}

TEST(CostPredictorTest, PredictionIsNonNegativeSeconds) {
  CostPredictor cp(enc_w, hub_n, max_n, 2);
  Rng rng = substream(2, "data");
  for (int i = 0; i < 50; ++i) {
    const auto in = random_input(rng);
    const double r = cp.raw(in);
    EXPECT_GE(cp.predict(in), 0.0);
    EXPECT_NEAR(cp.predict(in), r > 0.0 ? std::exp(r) - 1.0 : 0.0, 1e-12);
  }
}

TEST(CostPredictorTest, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (std::size_t n : {2u, 8u, 32u}) {
      CostPredictor cp(enc_w, hub_n, max_n, seed);
      jitter_params(cp, seed);
      Rng rng = substream(seed, "data", n);
      std::vector<SurrogateInput> in;
      std::vector<double> cost;
      for (std::size_t i = 0; i < n; ++i) {
        in.push_back(random_input(rng));
        cost.push_back(synthetic_cost(in.back()));
      }
      // A loss near 10 differenced at h = 1e-5 carries ~2e-10 of rounding,
      // so components under 1e-5 are held to 1e-9 absolute.
      const auto r = grad_check(
          cp.params(), [&] { return cp.loss(in, cost); }, [&] { cp.loss_with_grad(in, cost); }, seed, 0, 1e-5);
      EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed << " n " << n << " worst " << r.worst_block << "["
                                       << r.worst_index << "] " << r.worst_analytic << " vs " << r.worst_numeric;
    }
  }
}

TEST(CostPredictorTest, FitLearnsPerModelRuntime) {
  CostPredictor cp(enc_w, hub_n, max_n, 3);
  Rng rng = substream(3, "data");
  std::vector<SurrogateInput> in;
  std::vector<double> cost;
  for (int i = 0; i < 40; ++i) {
    in.push_back(random_input(rng));
    cost.push_back(synthetic_cost(in.back()));
  }
  const auto r = fit_cost(cp, in, cost, 400, 1e-2);
  EXPECT_FALSE(r.rolled_back);
  EXPECT_LT(r.final_loss, 0.05 * r.initial_loss);
  EXPECT_NEAR(cp.loss(in, cost), r.final_loss, 1e-12);
  EXPECT_THROW(fit_cost(cp, in, std::vector<double>{1.0}), std::invalid_argument);
}

TEST(StepCost, FlooredDifference) {
  EXPECT_DOUBLE_EQ(step_cost_from(30.0, 10.0), 20.0);
  EXPECT_DOUBLE_EQ(step_cost_from(10.0, 30.0), min_step_cost);
  EXPECT_DOUBLE_EQ(step_cost_from(5.0, 5.0), min_step_cost);
}

TEST(StepCost, NextStepUsesQueryEpochAndLastObservedCost) {
  CostPredictor cp(enc_w, hub_n, max_n, 4);
  const EncodedPipeline enc{{0.2, 0.4, 0.6, 1.0, 0.0}, {1, 1, 1, 1, 1}};
  const MetaFeatures meta{2000, 64, 3, 50};
  History h(2);
  EXPECT_NEAR(next_step_cost(cp, 0, enc, h, meta, 2, max_n),
              step_cost_from(cp.predict(make_input(h, 0, enc, meta, max_n, 2)), 0.0), 1e-15);
  h.append({0, 2, 0.7, 12.0});
  h.append({0, 4, 0.6, 25.0});
  EXPECT_NEAR(next_step_cost(cp, 0, enc, h, meta, 2, max_n),
              step_cost_from(cp.predict(make_input(h, 0, enc, meta, max_n, 6)), 25.0), 1e-15);
  h.append({0, 6, 0.5, 37.0});
  h.append({0, 8, 0.45, 50.0});
  EXPECT_THROW(next_step_cost(cp, 0, enc, h, meta, 2, max_n), FidelityExhausted);
}
