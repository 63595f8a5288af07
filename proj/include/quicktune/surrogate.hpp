#pragma once

// Deep-kernel Gaussian-process loss predictor: a learned feature map
// followed by a Matern-5/2 kernel and an exact GP posterior.

#include <array>
#include <bit>
#include <cmath>
#include <unordered_map>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "quicktune/core.hpp"
#include "quicktune/linalg.hpp"
#include "quicktune/neural.hpp"

namespace quicktune {

inline constexpr std::size_t feature_width = 32;
inline constexpr std::size_t model_embedding_width = 4;

/// One predictor query: pipeline encoding, observed loss prefix (zero padded
/// to the maximum epoch), dataset meta-features and the queried epoch.
struct SurrogateInput {
  std::vector<double> enc;
  std::vector<double> curve;
  MetaFeatures meta;
  int epoch = 1;

  bool operator==(const SurrogateInput &) const = default;
};

/// Bounded O(1) meta-feature scaling.
inline std::array<double, 4> scale_meta_features(const MetaFeatures &d) {
  return {std::log10(static_cast<double>(d.n_samples)) / 6.0,
          std::log10(static_cast<double>(d.resolution)) / 3.0,
          static_cast<double>(d.channels) / 4.0,
          std::log10(static_cast<double>(d.classes)) / 3.0};
}

struct FeatureTrace {
  MlpTrace trunk;
  CurveTrace curve;
  std::vector<double> model_onehot;
};

/// z = trunk([enc, t/N, scaled meta, model embedding, curve embedding]).
class FeatureExtractor {
public:
  FeatureExtractor() = default;
  FeatureExtractor(const std::string &prefix, std::size_t enc_width, std::size_t hub_size,
                   int max_epoch)
      : enc_width_(enc_width), hub_size_(hub_size), max_epoch_(max_epoch),
        model_embed_(prefix + "model_embed", hub_size, model_embedding_width),
        curve_(prefix + "curve", static_cast<std::size_t>(max_epoch)),
        trunk_(prefix + "trunk", MlpSpec{enc_width + 1 + 4 + model_embedding_width +
                                             CurveEncoder::channels,
                                         {32, 32}, feature_width}) {
    if (hub_size == 0 || hub_size > enc_width) throw std::invalid_argument("bad hub size");
    if (max_epoch < 1) throw std::invalid_argument("max epoch must be >= 1");
  }

  std::size_t enc_width() const { return enc_width_; }
  std::size_t hub_size() const { return hub_size_; }
  int max_epoch() const { return max_epoch_; }

  void init(Rng &rng) {
    model_embed_.init(rng);
    curve_.init(rng);
    trunk_.init(rng);
  }

  ParamList params() {
    ParamList out = model_embed_.params();
    for (auto *p : curve_.params()) out.push_back(p);
    for (auto *p : trunk_.params()) out.push_back(p);
    return out;
  }

  std::vector<double> forward(const SurrogateInput &in, FeatureTrace &trace) {
    if (in.enc.size() != enc_width_) {
      throw std::invalid_argument("encoding width " + std::to_string(in.enc.size()) +
                                  ", expected " + std::to_string(enc_width_));
    }
    if (in.epoch < 1 || in.epoch > max_epoch_) {
      throw std::invalid_argument("epoch " + std::to_string(in.epoch) + " outside [1, N]");
    }
    trace.model_onehot.assign(in.enc.end() - static_cast<std::ptrdiff_t>(hub_size_), in.enc.end());
    std::array<double, model_embedding_width> embed{};
    model_embed_.forward(trace.model_onehot, embed);
    const auto curve_embed = curve_.forward(in.curve, trace.curve);
    const auto meta = scale_meta_features(in.meta);

    std::vector<double> x;
    x.reserve(trunk_.input_width());
    x.insert(x.end(), in.enc.begin(), in.enc.end());
    x.push_back(static_cast<double>(in.epoch) / static_cast<double>(max_epoch_));
    x.insert(x.end(), meta.begin(), meta.end());
    x.insert(x.end(), embed.begin(), embed.end());
    x.insert(x.end(), curve_embed.begin(), curve_embed.end());
    return trunk_.forward(x, trace.trunk);
  }

  std::vector<double> forward(const SurrogateInput &in) {
    FeatureTrace t;
    return forward(in, t);
  }

  void backward(const FeatureTrace &trace, std::span<const double> dz) {
    const auto dx = trunk_.backward(trace.trunk, dz);
    const std::size_t embed_at = enc_width_ + 1 + 4;
    const std::size_t curve_at = embed_at + model_embedding_width;
    model_embed_.backward(trace.model_onehot,
                          std::span<const double>(dx).subspan(embed_at, model_embedding_width),
                          {});
    curve_.backward(trace.curve,
                    std::span<const double>(dx).subspan(curve_at, CurveEncoder::channels));
  }

private:
  std::size_t enc_width_ = 0, hub_size_ = 0;
  int max_epoch_ = 1;
  Dense model_embed_;
  CurveEncoder curve_;
  Mlp trunk_;
};

/// Feature-map outputs keyed by input content, valid for a single parameter
/// signature. Lets repeated queries skip the forward pass between refits.
class FeatureMemo {
public:
  template <class Compute>
  std::vector<double> get(const SurrogateInput &in, std::uint64_t sig, Compute &&compute) {
    if (sig != sig_ || entries_ > limit) {
      table_.clear();
      entries_ = 0;
      sig_ = sig;
    }
    auto &bucket = table_[hash(in)];
    for (const auto &e : bucket) {
      if (e.first == in) return e.second;
    }
    bucket.emplace_back(in, compute());
    ++entries_;
    return bucket.back().second;
  }

  void clear() {
    table_.clear();
    entries_ = 0;
  }

private:
  static constexpr std::size_t limit = 1 << 16;

  static std::uint64_t hash(const SurrogateInput &in) {
    std::uint64_t h = splitmix64(static_cast<std::uint64_t>(in.epoch));
    auto mix = [&h](double v) { h = splitmix64(h ^ std::bit_cast<std::uint64_t>(v)); };
    for (double v : in.enc) mix(v);
    for (double v : in.curve) mix(v);
    for (long v : {in.meta.n_samples, in.meta.resolution, in.meta.channels, in.meta.classes}) {
      h = splitmix64(h ^ static_cast<std::uint64_t>(v));
    }
    return h;
  }

  std::uint64_t sig_ = 0;
  std::size_t entries_ = 0;
  std::unordered_map<std::uint64_t, std::vector<std::pair<SurrogateInput, std::vector<double>>>> table_;
};

// ---------------------------------------------------------------------------
// Kernel

struct KernelValues {
  double lengthscale = 1.0;
  double signal = 1.0;
  double noise = 1e-2;
};

inline constexpr double noise_floor = 1e-8;

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline double matern52_of_distance(double r, double lengthscale, double signal) {
  const double a = std::sqrt(5.0) * r / lengthscale;
  return signal * (1.0 + a + a * a / 3.0) * std::exp(-a);
}

/// sigma^2 (1 + sqrt5 r/l + 5 r^2 / 3l^2) exp(-sqrt5 r/l), r = ||z - z'||.
inline double matern52(std::span<const double> z1, std::span<const double> z2,
                       const KernelValues &k) {
  if (z1.size() != z2.size()) throw std::invalid_argument("kernel inputs differ in width");
  return matern52_of_distance(std::sqrt(squared_distance(z1, z2)), k.lengthscale, k.signal);
}

/// Signal-only Gram matrix between two feature sets.
inline Matrix gram(const std::vector<std::vector<double>> &a,
                   const std::vector<std::vector<double>> &b, const KernelValues &k) {
  Matrix g(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) g(i, j) = matern52(a[i], b[j], k);
  return g;
}

inline Matrix gram(const std::vector<std::vector<double>> &a, const KernelValues &k) {
  const std::size_t n = a.size();
  Matrix g(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    g(i, i) = k.signal;
    for (std::size_t j = 0; j < i; ++j) {
      const double v = matern52(a[i], a[j], k);
      g(i, j) = v;
      g(j, i) = v;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Posterior on fixed features

struct Posterior {
  std::vector<double> mean;
  std::vector<double> variance;
  Matrix cov; // empty unless requested
};

struct PosteriorOptions {
  bool full_cov = false;
  bool include_noise = false; // predictive rather than latent variance
};

/// Exact GP posterior in normalized units, from precomputed features.
inline Posterior posterior_from_features(const std::vector<std::vector<double>> &train,
                                         std::span<const double> y,
                                         const std::vector<std::vector<double>> &test,
                                         const KernelValues &k, PosteriorOptions opt = {}) {
  const std::size_t n = train.size(), m = test.size();
  Posterior post;
  post.mean.assign(m, 0.0);
  post.variance.assign(m, 0.0);
  if (opt.full_cov) post.cov = Matrix(m, m);
  const double add = opt.include_noise ? k.noise : 0.0;
  if (n == 0) {
    for (std::size_t i = 0; i < m; ++i) {
      post.variance[i] = k.signal + add;
      if (opt.full_cov) {
        for (std::size_t j = 0; j < m; ++j) post.cov(i, j) = matern52(test[i], test[j], k);
        post.cov(i, i) += add;
      }
    }
    return post;
  }
  Matrix a = gram(train, k);
  for (std::size_t i = 0; i < n; ++i) a(i, i) += k.noise;
  const auto chol = cholesky_with_jitter(a);
  const auto alpha = cholesky_solve(chol.lower, y);
  const Matrix ks = gram(train, test, k); // n x m
  // V = L^{-1} K_*, column by column.
  Matrix v(m, n);
  std::vector<double> col(n);
  for (std::size_t j = 0; j < m; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      col[i] = ks(i, j);
      mu += ks(i, j) * alpha[i];
    }
    post.mean[j] = mu;
    forward_substitute(chol.lower, col);
    std::copy(col.begin(), col.end(), v.row(j).begin());
    double ss = 0.0;
    for (double c : col) ss += c * c;
    const double var = k.signal - ss;
    post.variance[j] = std::max(0.0, var) + add;
  }
  if (opt.full_cov) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t q = 0; q < n; ++q) s += v(i, q) * v(j, q);
        const double c = (i == j ? k.signal : matern52(test[i], test[j], k)) - s;
        post.cov(i, j) = c;
        post.cov(j, i) = c;
      }
      post.cov(i, i) = std::max(0.0, post.cov(i, i)) + add;
    }
  }
  return post;
}

/// Negative log marginal likelihood on fixed features.
inline double nll_from_features(const std::vector<std::vector<double>> &train,
                                std::span<const double> y, const KernelValues &k) {
  const std::size_t n = train.size();
  if (n == 0) return 0.0;
  Matrix a = gram(train, k);
  for (std::size_t i = 0; i < n; ++i) a(i, i) += k.noise;
  const auto chol = cholesky_with_jitter(a);
  const auto alpha = cholesky_solve(chol.lower, y);
  double quad = 0.0;
  for (std::size_t i = 0; i < n; ++i) quad += y[i] * alpha[i];
  return 0.5 * quad + 0.5 * cholesky_log_det(chol.lower) +
         0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
}

// ---------------------------------------------------------------------------
// Deep-kernel GP

struct FitResult {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int steps = 0;
  bool rolled_back = false;
};

class DeepKernelGP {
public:
  DeepKernelGP() = default;
  DeepKernelGP(std::size_t enc_width, std::size_t hub_size, int max_epoch, std::uint64_t seed)
      : fx_("", enc_width, hub_size, max_epoch), kernel_("kernel", {3}) {
    Rng rng = substream(seed, "surrogate.init");
    fx_.init(rng);
    kernel_.values = {0.0, 0.0, std::log(1e-2)};
  }

  FeatureExtractor &extractor() { return fx_; }
  ParamBlock &kernel() { return kernel_; }
  const ParamBlock &kernel() const { return kernel_; }
  AdamState &adam() { return adam_; }

  KernelValues kernel_values() const {
    return {std::exp(kernel_.values[0]), std::exp(kernel_.values[1]),
            std::exp(kernel_.values[2]) + noise_floor};
  }

  ParamList params() {
    ParamList p = fx_.params();
    p.push_back(&kernel_);
    return p;
  }

  double target_mean() const { return y_mean_; }
  double target_std() const { return y_std_; }

  void set_normalization(double mean, double std) {
    y_mean_ = mean;
    y_std_ = std > 1e-12 && std::isfinite(std) ? std : 1.0;
  }

  /// Mean and standard deviation of the targets; std falls back to 1.
  void fit_normalization(std::span<const double> y) {
    if (y.empty()) {
      set_normalization(0.0, 1.0);
      return;
    }
    double mean = 0.0;
    for (double v : y) mean += v;
    mean /= static_cast<double>(y.size());
    double var = 0.0;
    for (double v : y) var += (v - mean) * (v - mean);
    var /= static_cast<double>(y.size());
    set_normalization(mean, std::sqrt(var));
  }

  double normalize(double y) const { return (y - y_mean_) / y_std_; }
  double denormalize(double y) const { return y * y_std_ + y_mean_; }

  std::vector<std::vector<double>> features(const std::vector<SurrogateInput> &in) {
    std::vector<std::vector<double>> z;
    z.reserve(in.size());
    const auto sig = signature(fx_.params());
    for (const auto &x : in) z.push_back(memo_.get(x, sig, [&] { return fx_.forward(x); }));
    return z;
  }

  /// Posterior in the original loss scale.
  Posterior posterior(const std::vector<SurrogateInput> &train, std::span<const double> y,
                      const std::vector<SurrogateInput> &test, PosteriorOptions opt = {}) {
    std::vector<double> yn(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) yn[i] = normalize(y[i]);
    auto post = posterior_from_features(features(train), yn, features(test), kernel_values(), opt);
    const double s2 = y_std_ * y_std_;
    for (auto &m : post.mean) m = denormalize(m);
    for (auto &v : post.variance) v *= s2;
    for (auto &c : post.cov.data) c *= s2;
    return post;
  }

  double nll(const std::vector<SurrogateInput> &train, std::span<const double> y) {
    std::vector<double> yn(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) yn[i] = normalize(y[i]);
    return nll_from_features(features(train), yn, kernel_values());
  }

  /// NLL on normalized targets; accumulates dNLL/dparam into every block.
  double nll_with_grad(const std::vector<SurrogateInput> &train, std::span<const double> y) {
    const std::size_t n = train.size();
    if (n == 0) return 0.0;
    std::vector<FeatureTrace> traces(n);
    std::vector<std::vector<double>> z(n);
    for (std::size_t i = 0; i < n; ++i) z[i] = fx_.forward(train[i], traces[i]);
    std::vector<double> yn(n);
    for (std::size_t i = 0; i < n; ++i) yn[i] = normalize(y[i]);

    const KernelValues k = kernel_values();
    Matrix dist(n, n), kmat(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      kmat(i, i) = k.signal;
      for (std::size_t j = 0; j < i; ++j) {
        const double r = std::sqrt(squared_distance(z[i], z[j]));
        dist(i, j) = dist(j, i) = r;
        kmat(i, j) = kmat(j, i) = matern52_of_distance(r, k.lengthscale, k.signal);
      }
    }
    Matrix a = kmat;
    for (std::size_t i = 0; i < n; ++i) a(i, i) += k.noise;
    const auto chol = cholesky_with_jitter(a);
    const auto alpha = cholesky_solve(chol.lower, yn);
    double quad = 0.0;
    for (std::size_t i = 0; i < n; ++i) quad += yn[i] * alpha[i];
    const double value = 0.5 * quad + 0.5 * cholesky_log_det(chol.lower) +
                         0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);

    // dNLL/dA = W = (A^{-1} - alpha alpha^T) / 2
    Matrix w = cholesky_inverse(chol.lower);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) w(i, j) = 0.5 * (w(i, j) - alpha[i] * alpha[j]);

    double g_log_ls = 0.0, g_log_sv = 0.0, g_log_nv = 0.0;
    const double sqrt5 = std::sqrt(5.0);
    const double coef = 5.0 / (3.0 * k.lengthscale * k.lengthscale);
    std::vector<std::vector<double>> dz(n, std::vector<double>(feature_width, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      g_log_sv += w(i, i) * kmat(i, i);
      g_log_nv += w(i, i);
      for (std::size_t j = 0; j < i; ++j) {
        const double wij = w(i, j) + w(j, i);
        const double aij = sqrt5 * dist(i, j) / k.lengthscale;
        const double e = std::exp(-aij);
        g_log_sv += wij * kmat(i, j);
        g_log_ls += wij * k.signal * (aij * aij / 3.0) * (1.0 + aij) * e;
        // dk/dz_i = -sigma^2 (5 / 3l^2)(1 + a) e^{-a} (z_i - z_j)
        const double s = -wij * k.signal * coef * (1.0 + aij) * e;
        for (std::size_t q = 0; q < feature_width; ++q) {
          const double diff = s * (z[i][q] - z[j][q]);
          dz[i][q] += diff;
          dz[j][q] -= diff;
        }
      }
    }
    kernel_.grad[0] += g_log_ls;
    kernel_.grad[1] += g_log_sv;
    kernel_.grad[2] += g_log_nv * std::exp(kernel_.values[2]);
    for (std::size_t i = 0; i < n; ++i) fx_.backward(traces[i], dz[i]);
    return value;
  }

private:
  FeatureExtractor fx_;
  ParamBlock kernel_;
  AdamState adam_;
  FeatureMemo memo_;
  double y_mean_ = 0.0;
  double y_std_ = 1.0;
};

/// Full-batch Adam on a differentiable objective. Keeps the lowest-loss
/// parameters seen (so the result never ends above the start) and restores
/// the pre-fit state when the objective turns non-finite.
template <class LossWithGrad>
FitResult adam_fit(const ParamList &params, AdamState &adam, int steps, double lr,
                   LossWithGrad &&loss_with_grad) {
  FitResult res;
  const auto start = snapshot(params);
  const AdamState start_adam = adam;
  adam.lr = lr;
  auto rollback = [&] {
    restore(params, start);
    adam = start_adam;
    res.rolled_back = true;
    res.final_loss = res.initial_loss;
    return res;
  };
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> best_params;
  for (int s = 0; s <= steps; ++s) {
    zero_grads(params);
    double value;
    try {
      value = loss_with_grad();
    } catch (const SingularKernelError &) {
      restore(params, start);
      adam = start_adam;
      throw;
    }
    if (!std::isfinite(value)) return rollback();
    if (s == 0) res.initial_loss = value;
    if (value < best) {
      best = value;
      best_params = snapshot(params);
    }
    if (s == steps) break;
    try {
      adam_step(adam, params);
    } catch (const NonFiniteError &) {
      return rollback();
    }
    res.steps = s + 1;
  }
  restore(params, best_params);
  res.final_loss = best;
  return res;
}

/// Refits the GP on (inputs, losses): recomputes target normalization, then
/// full-batch Adam on the NLL. Empty training data leaves the GP unchanged.
inline FitResult fit(DeepKernelGP &gp, const std::vector<SurrogateInput> &train,
                     std::span<const double> losses, int steps = 100, double lr = 1e-4) {
  if (train.empty()) return {};
  if (train.size() != losses.size()) throw std::invalid_argument("inputs/targets length mismatch");
  const double old_mean = gp.target_mean(), old_std = gp.target_std();
  gp.fit_normalization(losses);
  try {
    auto res = adam_fit(gp.params(), gp.adam(), steps, lr,
                        [&] { return gp.nll_with_grad(train, losses); });
    if (res.rolled_back) gp.set_normalization(old_mean, old_std);
    return res;
  } catch (...) {
    gp.set_normalization(old_mean, old_std);
    throw;
  }
}

// ---------------------------------------------------------------------------
// Building predictor inputs from a history

/// Input for querying pipeline `id` at epoch `epoch`: the curve holds the
/// observed losses up to epoch - delta_t (zeros when curves are ignored).
inline SurrogateInput make_input(const History &h, PipelineId id, const EncodedPipeline &enc,
                                 const MetaFeatures &d, int max_epoch, int epoch,
                                 bool use_curve = true) {
  SurrogateInput in;
  in.enc = enc.features;
  in.meta = d;
  in.epoch = epoch;
  in.curve = use_curve ? h.curve(id, max_epoch, epoch - h.delta_t())
                       : std::vector<double>(static_cast<std::size_t>(max_epoch), 0.0);
  return in;
}

struct TrainingSet {
  std::vector<SurrogateInput> inputs;
  std::vector<double> losses;
  std::vector<double> costs;
};

/// One training example per observation (or per listed observation index).
inline TrainingSet training_set(const History &h, const std::vector<EncodedPipeline> &encodings,
                                const MetaFeatures &d, int max_epoch, bool use_curve = true,
                                std::span<const std::size_t> subset = {}) {
  TrainingSet ts;
  auto add = [&](const Observation &o) {
    ts.inputs.push_back(
        make_input(h, o.pipeline_id, encodings.at(o.pipeline_id), d, max_epoch, o.epoch, use_curve));
    ts.losses.push_back(o.val_loss);
    ts.costs.push_back(o.cum_cost);
  };
  if (subset.empty()) {
    for (const auto &o : h.observations()) add(o);
  } else {
    for (std::size_t i : subset) add(h[i]);
  }
  return ts;
}

} // namespace quicktune
