#pragma once

// Fixed-architecture differentiable building blocks: dense layers, 1-D
// convolutions, ReLU MLPs, Adam, and a parameter checkpoint format.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "quicktune/rng.hpp"

namespace quicktune {

using ojson = nlohmann::ordered_json;

class StaleTraceError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

class NonFiniteError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct ParamBlock {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;
  std::vector<double> grad;
  std::uint64_t version = 0; // bumped whenever values change

  ParamBlock() = default;
  ParamBlock(std::string n, std::vector<std::size_t> s)
      : name(std::move(n)), shape(std::move(s)) {
    const std::size_t count = std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                                              std::multiplies<>());
    values.assign(count, 0.0);
    grad.assign(count, 0.0);
  }

  std::size_t size() const { return values.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

using ParamList = std::vector<ParamBlock *>;

inline std::uint64_t signature(const ParamList &params) {
  std::uint64_t s = 0;
  for (const auto *p : params) s = splitmix64(s ^ p->version);
  return s;
}

inline void zero_grads(const ParamList &params) {
  for (auto *p : params) p->zero_grad();
}

inline std::size_t param_count(const ParamList &params) {
  std::size_t n = 0;
  for (const auto *p : params) n += p->size();
  return n;
}

/// Flat copy of all parameter values, used for rollback.
inline std::vector<double> snapshot(const ParamList &params) {
  std::vector<double> out;
  out.reserve(param_count(params));
  for (const auto *p : params) out.insert(out.end(), p->values.begin(), p->values.end());
  return out;
}

inline void restore(const ParamList &params, const std::vector<double> &flat) {
  std::size_t k = 0;
  for (auto *p : params) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(k), p->size(), p->values.begin());
    k += p->size();
    ++p->version;
  }
}

// ---------------------------------------------------------------------------
// Layers

/// y = W x + b with W stored row-major [out][in].
class Dense {
public:
  Dense() = default;
  Dense(const std::string &name, std::size_t in, std::size_t out)
      : in_(in), out_(out), weight_(name + ".weight", {out, in}),
        bias_(name + ".bias", {out}) {
    if (in == 0 || out == 0) throw std::invalid_argument("dense widths must be >= 1");
  }

  std::size_t in() const { return in_; }
  std::size_t out() const { return out_; }

  /// Uniform in +-sqrt(6 / (fan_in + fan_out)), zero bias.
  void init(Rng &rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(in_ + out_));
    for (double &w : weight_.values) w = uniform(rng, -a, a);
    std::fill(bias_.values.begin(), bias_.values.end(), 0.0);
    ++weight_.version;
    ++bias_.version;
  }

  void forward(std::span<const double> x, std::span<double> y) const {
    const double *w = weight_.values.data();
    for (std::size_t o = 0; o < out_; ++o) {
      double acc = bias_.values[o];
      const double *row = w + o * in_;
      for (std::size_t i = 0; i < in_; ++i) acc += row[i] * x[i];
      y[o] = acc;
    }
  }

  /// Accumulates parameter gradients; writes dL/dx when dx is non-empty.
  void backward(std::span<const double> x, std::span<const double> dy,
                std::span<double> dx) {
    double *gw = weight_.grad.data();
    for (std::size_t o = 0; o < out_; ++o) {
      const double g = dy[o];
      bias_.grad[o] += g;
      if (g == 0.0) continue;
      double *row = gw + o * in_;
      for (std::size_t i = 0; i < in_; ++i) row[i] += g * x[i];
    }
    if (dx.empty()) return;
    std::fill(dx.begin(), dx.end(), 0.0);
    const double *w = weight_.values.data();
    for (std::size_t o = 0; o < out_; ++o) {
      const double g = dy[o];
      if (g == 0.0) continue;
      const double *row = w + o * in_;
      for (std::size_t i = 0; i < in_; ++i) dx[i] += g * row[i];
    }
  }

  ParamBlock &weight() { return weight_; }
  ParamBlock &bias() { return bias_; }
  const ParamBlock &weight() const { return weight_; }
  const ParamBlock &bias() const { return bias_; }
  ParamList params() { return {&weight_, &bias_}; }

private:
  std::size_t in_ = 0, out_ = 0;
  ParamBlock weight_, bias_;
};

/// 'Same'-padded 1-D convolution, odd kernel width. Data layout [channel][position].
class Conv1d {
public:
  Conv1d() = default;
  Conv1d(const std::string &name, std::size_t in_ch, std::size_t out_ch, std::size_t width)
      : in_(in_ch), out_(out_ch), k_(width), weight_(name + ".weight", {out_ch, in_ch, width}),
        bias_(name + ".bias", {out_ch}) {
    if (width % 2 == 0) throw std::invalid_argument("conv kernel width must be odd");
  }

  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }

  void init(Rng &rng) {
    const double a = std::sqrt(6.0 / static_cast<double>((in_ + out_) * k_));
    for (double &w : weight_.values) w = uniform(rng, -a, a);
    std::fill(bias_.values.begin(), bias_.values.end(), 0.0);
    ++weight_.version;
    ++bias_.version;
  }

  /// Output positions [0, upto) of a length-`len` signal.
  void forward(std::span<const double> x, std::span<double> y, std::size_t len,
               std::size_t upto = std::numeric_limits<std::size_t>::max()) const {
    const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k_ / 2);
    const auto n = static_cast<std::ptrdiff_t>(len);
    const auto m = static_cast<std::ptrdiff_t>(std::min(upto, len));
    for (std::size_t o = 0; o < out_; ++o) {
      double *yo = y.data() + o * len;
      std::fill(yo, yo + m, bias_.values[o]);
      for (std::size_t c = 0; c < in_; ++c) {
        const double *xc = x.data() + c * len;
        const double *w = weight_.values.data() + (o * in_ + c) * k_;
        for (std::size_t k = 0; k < k_; ++k) {
          const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - half;
          const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
          const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(m, n - shift);
          const double wk = w[k];
          for (std::ptrdiff_t p = lo; p < hi; ++p) yo[p] += wk * xc[p + shift];
        }
      }
    }
  }

  /// Gradient contributions of output positions [0, upto). dx is cleared
  /// and receives dL/dx from those positions only.
  void backward(std::span<const double> x, std::span<const double> dy, std::span<double> dx,
                std::size_t len, std::size_t upto = std::numeric_limits<std::size_t>::max()) {
    const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k_ / 2);
    const auto n = static_cast<std::ptrdiff_t>(len);
    const auto m = static_cast<std::ptrdiff_t>(std::min(upto, len));
    if (!dx.empty()) std::fill(dx.begin(), dx.end(), 0.0);
    for (std::size_t o = 0; o < out_; ++o) {
      const double *go = dy.data() + o * len;
      double gb = 0.0;
      for (std::ptrdiff_t p = 0; p < m; ++p) gb += go[p];
      bias_.grad[o] += gb;
      for (std::size_t c = 0; c < in_; ++c) {
        const double *xc = x.data() + c * len;
        const double *w = weight_.values.data() + (o * in_ + c) * k_;
        double *gw = weight_.grad.data() + (o * in_ + c) * k_;
        for (std::size_t k = 0; k < k_; ++k) {
          const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - half;
          const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
          const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(m, n - shift);
          double acc = 0.0;
          for (std::ptrdiff_t p = lo; p < hi; ++p) acc += go[p] * xc[p + shift];
          gw[k] += acc;
          if (!dx.empty()) {
            double *dxc = dx.data() + c * len;
            const double wk = w[k];
            for (std::ptrdiff_t p = lo; p < hi; ++p) dxc[p + shift] += wk * go[p];
          }
        }
      }
    }
  }

  ParamBlock &weight() { return weight_; }
  ParamBlock &bias() { return bias_; }
  const ParamBlock &weight() const { return weight_; }
  const ParamBlock &bias() const { return bias_; }
  ParamList params() { return {&weight_, &bias_}; }

private:
  std::size_t in_ = 0, out_ = 0, k_ = 3;
  ParamBlock weight_, bias_;
};

// ---------------------------------------------------------------------------
// Networks

struct MlpSpec {
  std::size_t input_width = 1;
  std::vector<std::size_t> hidden{32, 32};
  std::size_t output_width = 1;
};

struct MlpTrace {
  const void *owner = nullptr;
  std::uint64_t signature = 0;
  std::vector<std::vector<double>> acts; // acts[0] is the input
};

/// Dense layers with ReLU after every hidden layer and a linear output.
class Mlp {
public:
  Mlp() = default;
  Mlp(const std::string &name, const MlpSpec &spec) : spec_(spec) {
    std::size_t in = spec.input_width;
    std::size_t i = 0;
    for (std::size_t h : spec.hidden) {
      layers_.emplace_back(name + ".fc" + std::to_string(i++), in, h);
      in = h;
    }
    layers_.emplace_back(name + ".fc" + std::to_string(i), in, spec.output_width);
  }

  const MlpSpec &spec() const { return spec_; }
  std::size_t input_width() const { return spec_.input_width; }
  std::size_t output_width() const { return spec_.output_width; }
  std::vector<Dense> &layers() { return layers_; }

  void init(Rng &rng) {
    for (auto &l : layers_) l.init(rng);
  }

  ParamList params() {
    ParamList out;
    for (auto &l : layers_) {
      auto p = l.params();
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }

  std::vector<double> forward(std::span<const double> x, MlpTrace &trace) {
    if (x.size() != spec_.input_width) {
      throw std::invalid_argument("mlp input width " + std::to_string(x.size()) +
                                  ", expected " + std::to_string(spec_.input_width));
    }
    trace.owner = this;
    trace.signature = signature(params());
    trace.acts.resize(layers_.size() + 1);
    trace.acts[0].assign(x.begin(), x.end());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      auto &y = trace.acts[i + 1];
      y.resize(layers_[i].out());
      layers_[i].forward(trace.acts[i], y);
      if (i + 1 < layers_.size()) {
        for (double &v : y) v = v > 0.0 ? v : 0.0;
      }
    }
    return trace.acts.back();
  }

  std::vector<double> forward(std::span<const double> x) {
    MlpTrace t;
    return forward(x, t);
  }

  /// Accumulates parameter gradients and returns dL/dx.
  std::vector<double> backward(const MlpTrace &trace, std::span<const double> dy) {
    if (trace.owner != this || trace.signature != signature(params()) ||
        trace.acts.size() != layers_.size() + 1) {
      throw StaleTraceError("mlp trace does not match current parameters");
    }
    if (dy.size() != spec_.output_width) throw std::invalid_argument("mlp output-gradient width");
    std::vector<double> g(dy.begin(), dy.end()), dx;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      if (i + 1 < layers_.size()) {
        const auto &post = trace.acts[i + 1];
        for (std::size_t k = 0; k < g.size(); ++k) {
          if (post[k] <= 0.0) g[k] = 0.0;
        }
      }
      dx.assign(layers_[i].in(), 0.0);
      layers_[i].backward(trace.acts[i], g, dx);
      g.swap(dx);
    }
    return g;
  }

private:
  MlpSpec spec_;
  std::vector<Dense> layers_;
};

struct CurveTrace {
  const void *owner = nullptr;
  std::uint64_t signature = 0;
  std::vector<double> input, h1, h2; // h1/h2 post-ReLU
  std::size_t explicit_len = 0;
};

/// Two ReLU convolutions (1 -> 8 -> 8 channels, width 3) and a mean pool over
/// the zero-padded curve. Output width 8 for any observed prefix.
class CurveEncoder {
public:
  static constexpr std::size_t channels = 8;
  static constexpr std::size_t kernel = 3;

  CurveEncoder() = default;
  CurveEncoder(const std::string &name, std::size_t length)
      : len_(length), conv1_(name + ".conv0", 1, channels, kernel),
        conv2_(name + ".conv1", channels, channels, kernel) {
    if (length == 0) throw std::invalid_argument("curve length must be >= 1");
  }

  std::size_t length() const { return len_; }
  std::size_t output_width() const { return channels; }

  void init(Rng &rng) {
    conv1_.init(rng);
    conv2_.init(rng);
  }

  ParamList params() {
    auto a = conv1_.params();
    auto b = conv2_.params();
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }

  std::vector<double> forward(std::span<const double> curve, CurveTrace &trace) {
    if (curve.size() != len_) {
      throw std::invalid_argument("curve length " + std::to_string(curve.size()) +
                                  ", expected " + std::to_string(len_));
    }
    trace.owner = this;
    trace.signature = signature(params());
    trace.input.assign(curve.begin(), curve.end());
    std::size_t active = len_;
    while (active > 0 && curve[active - 1] == 0.0) --active;
    // Past the last nonzero input, hidden activations are per-channel
    // constants; only the first `explicit_len` positions need the full conv.
    const std::size_t m = std::min(len_, active + 3);
    trace.explicit_len = m;
    trace.h1.resize(channels * len_);
    trace.h2.resize(channels * len_);
    const auto &b1 = conv1_.bias().values;
    conv1_.forward(trace.input, trace.h1, len_, m);
    for (std::size_t c = 0; c < channels; ++c) {
      double *h = trace.h1.data() + c * len_;
      for (std::size_t p = 0; p < m; ++p) h[p] = h[p] > 0.0 ? h[p] : 0.0;
      std::fill(h + m, h + len_, b1[c] > 0.0 ? b1[c] : 0.0);
    }
    conv2_.forward(trace.h1, trace.h2, len_, m);
    const auto &w2 = conv2_.weight().values;
    const auto &b2 = conv2_.bias().values;
    std::vector<double> out(channels, 0.0);
    for (std::size_t o = 0; o < channels; ++o) {
      double *h = trace.h2.data() + o * len_;
      double s = 0.0;
      for (std::size_t p = 0; p < m; ++p) {
        h[p] = h[p] > 0.0 ? h[p] : 0.0;
        s += h[p];
      }
      if (m < len_) {
        double mid = b2[o], edge = b2[o];
        for (std::size_t c = 0; c < channels; ++c) {
          const double t1 = trace.h1[c * len_ + m];
          const double *w = w2.data() + (o * channels + c) * kernel;
          mid += t1 * (w[0] + w[1] + w[2]);
          edge += t1 * (w[0] + w[1]);
        }
        mid = mid > 0.0 ? mid : 0.0;
        edge = edge > 0.0 ? edge : 0.0;
        std::fill(h + m, h + len_ - 1, mid);
        h[len_ - 1] = edge;
        s += mid * static_cast<double>(len_ - 1 - m) + edge;
      }
      out[o] = s / static_cast<double>(len_);
    }
    return out;
  }

  void backward(const CurveTrace &trace, std::span<const double> dy) {
    if (trace.owner != this || trace.signature != signature(params())) {
      throw StaleTraceError("curve-encoder trace does not match current parameters");
    }
    const std::size_t n = len_, m = trace.explicit_len;
    std::vector<double> g2(channels * n), g1(channels * n);
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t p = 0; p < n; ++p) {
        g2[c * n + p] = trace.h2[c * n + p] > 0.0 ? dy[c] * inv : 0.0;
      }
    }
    conv2_.backward(trace.h1, g2, g1, n, m);
    if (m < n) {
      // Contributions of output positions [m, n), where the hidden input is
      // the constant t1 (zero padding past n - 1).
      auto &w2 = conv2_.weight();
      auto &b2 = conv2_.bias();
      std::vector<double> prefix(n + 1);
      std::vector<double> tail_dh1(channels, 0.0);
      for (std::size_t o = 0; o < channels; ++o) {
        const double *go = g2.data() + o * n;
        double tail = 0.0;
        for (std::size_t p = m; p < n; ++p) tail += go[p];
        b2.grad[o] += tail;
        prefix[0] = 0.0;
        for (std::size_t p = 0; p < n; ++p) prefix[p + 1] = prefix[p] + go[p];
        for (std::size_t c = 0; c < channels; ++c) {
          const double t1 = trace.h1[c * n + m];
          const double *w = w2.values.data() + (o * channels + c) * kernel;
          double *gw = w2.grad.data() + (o * channels + c) * kernel;
          gw[0] += t1 * tail;
          gw[1] += t1 * tail;
          gw[2] += t1 * (tail - go[n - 1]);
          // Output m reads hidden position m - 1 through tap 0.
          g1[c * n + m - 1] += w[0] * go[m];
          // Sum over hidden positions q in [m, n) of dL/dh1[q]; tap k reads
          // output q - k + 1.
          for (std::size_t k = 0; k < kernel; ++k) {
            const auto lo = static_cast<std::ptrdiff_t>(m) - static_cast<std::ptrdiff_t>(k) + 1;
            const auto hi = static_cast<std::ptrdiff_t>(n) - static_cast<std::ptrdiff_t>(k) + 1;
            const auto clip = [n](std::ptrdiff_t i) {
              return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(n)));
            };
            tail_dh1[c] += w[k] * (prefix[clip(hi)] - prefix[clip(lo)]);
          }
        }
      }
      auto &b1 = conv1_.bias();
      for (std::size_t c = 0; c < channels; ++c) {
        if (b1.values[c] > 0.0) b1.grad[c] += tail_dh1[c];
      }
    }
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t p = 0; p < m; ++p) {
        if (trace.h1[c * n + p] <= 0.0) g1[c * n + p] = 0.0;
      }
    }
    conv1_.backward(trace.input, g1, {}, n, m);
  }

private:
  std::size_t len_ = 1;
  Conv1d conv1_, conv2_;
};

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> m, v;
};

/// Bias-corrected Adam update using each block's accumulated grad. Throws
/// NonFiniteError, leaving everything untouched, if any gradient is not finite.
inline void adam_step(AdamState &state, const ParamList &params) {
  for (const auto *p : params) {
    if (p->grad.size() != p->values.size()) throw std::invalid_argument("grad/value shape mismatch");
    for (double g : p->grad) {
      if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient in '" + p->name + "'");
    }
  }
  if (state.m.empty()) {
    for (const auto *p : params) {
      state.m.emplace_back(p->size(), 0.0);
      state.v.emplace_back(p->size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam state/param count mismatch");
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (state.m[b].size() != params[b]->size()) {
      throw std::invalid_argument("adam moment shape mismatch for '" + params[b]->name + "'");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t b = 0; b < params.size(); ++b) {
    auto &p = *params[b];
    auto &m = state.m[b];
    auto &v = state.v[b];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = p.grad[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p.values[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    ++p.version;
  }
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_block;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

/// Compares `compute_grads` (which must leave dObjective/dp in each block's
/// grad) with central differences, h = 1e-5 * max(1, |p|). With max_params
/// > 0 a seeded subset of entries is checked. The relative error's
/// denominator never drops below abs_floor. Entries that disagree are
/// retried at h / 10, h / 100 and h / 1000.
inline GradCheckReport grad_check(const ParamList &params, const std::function<double()> &objective,
                                  const std::function<void()> &compute_grads, std::uint64_t seed,
                                  std::size_t max_params = 0, double abs_floor = 1e-8) {
  zero_grads(params);
  compute_grads();
  std::vector<std::pair<std::size_t, std::size_t>> entries;
  for (std::size_t b = 0; b < params.size(); ++b) {
    for (std::size_t i = 0; i < params[b]->size(); ++i) entries.emplace_back(b, i);
  }
  if (max_params > 0 && entries.size() > max_params) {
    Rng rng = substream(seed, "grad_check");
    shuffle(entries, rng);
    entries.resize(max_params);
    std::sort(entries.begin(), entries.end());
  }
  GradCheckReport report;
  for (const auto &[b, i] : entries) {
    auto &blk = *params[b];
    const double analytic = blk.grad[i];
    const double orig = blk.values[i];
    const auto central = [&](double h) {
      blk.values[i] = orig + h;
      ++blk.version;
      const double fp = objective();
      blk.values[i] = orig - h;
      ++blk.version;
      const double fm = objective();
      blk.values[i] = orig;
      ++blk.version;
      return (fp - fm) / (2.0 * h);
    };
    const auto rel = [&](double numeric) {
      return std::abs(analytic - numeric) / std::max(abs_floor, std::abs(analytic) + std::abs(numeric));
    };
    double h = 1e-5 * std::max(1.0, std::abs(orig));
    double numeric = central(h);
    double err = rel(numeric);
    // A ReLU kink inside [p - h, p + h] corrupts the difference; shrinking
    // the step moves past it, a wrong gradient stays wrong.
    for (int shrink = 0; shrink < 3 && err > 1e-6; ++shrink) {
      h *= 0.1;
      const double again = central(h);
      if (rel(again) < err) {
        numeric = again;
        err = rel(again);
      }
    }
    ++report.checked;
    if (err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_block = blk.name;
      report.worst_index = i;
      report.worst_analytic = analytic;
      report.worst_numeric = numeric;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoints ("qtck-1")

namespace detail {

inline std::string base64_encode(const unsigned char *data, std::size_t n) {
  static constexpr char tbl[] =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((n + 2) / 3 * 4);
  for (std::size_t i = 0; i < n; i += 3) {
    const std::uint32_t a = data[i];
    const std::uint32_t b = i + 1 < n ? data[i + 1] : 0;
    const std::uint32_t c = i + 2 < n ? data[i + 2] : 0;
    const std::uint32_t triple = (a << 16) | (b << 8) | c;
    out.push_back(tbl[(triple >> 18) & 63]);
    out.push_back(tbl[(triple >> 12) & 63]);
    out.push_back(i + 1 < n ? tbl[(triple >> 6) & 63] : '=');
    out.push_back(i + 2 < n ? tbl[triple & 63] : '=');
  }
  return out;
}

inline std::vector<unsigned char> base64_decode(const std::string &s) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (s.size() % 4 != 0) throw std::invalid_argument("base64 length not a multiple of 4");
  std::vector<unsigned char> out;
  out.reserve(s.size() / 4 * 3);
  for (std::size_t i = 0; i < s.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      if (s[i + k] == '=') {
        v[k] = 0;
        ++pad;
      } else {
        v[k] = val(s[i + k]);
        if (v[k] < 0 || pad > 0) throw std::invalid_argument("invalid base64 character");
      }
    }
    const std::uint32_t triple = (static_cast<std::uint32_t>(v[0]) << 18) |
                                 (static_cast<std::uint32_t>(v[1]) << 12) |
                                 (static_cast<std::uint32_t>(v[2]) << 6) |
                                 static_cast<std::uint32_t>(v[3]);
    out.push_back(static_cast<unsigned char>(triple >> 16));
    if (pad < 2) out.push_back(static_cast<unsigned char>(triple >> 8));
    if (pad < 1) out.push_back(static_cast<unsigned char>(triple));
  }
  return out;
}

} // namespace detail

inline std::string encode_f64le(const std::vector<double> &values) {
  std::vector<unsigned char> bytes(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t u = std::bit_cast<std::uint64_t>(values[i]);
    for (int b = 0; b < 8; ++b) bytes[i * 8 + b] = static_cast<unsigned char>(u >> (8 * b));
  }
  return detail::base64_encode(bytes.data(), bytes.size());
}

inline std::vector<double> decode_f64le(const std::string &s) {
  const auto bytes = detail::base64_decode(s);
  if (bytes.size() % 8 != 0) throw std::invalid_argument("payload is not a whole number of f64");
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t u = 0;
    for (int b = 0; b < 8; ++b) u |= static_cast<std::uint64_t>(bytes[i * 8 + b]) << (8 * b);
    out[i] = std::bit_cast<double>(u);
  }
  return out;
}

inline constexpr const char *checkpoint_format = "qtck-1";

/// Block list in checkpoint order; names are prefixed with `prefix`.
inline ojson blocks_to_json(const ParamList &params, const std::string &prefix = "") {
  ojson blocks = ojson::array();
  for (const auto *p : params) {
    ojson b;
    b["name"] = prefix + p->name;
    b["shape"] = p->shape;
    b["values_b64_f64le"] = encode_f64le(p->values);
    blocks.push_back(std::move(b));
  }
  return blocks;
}

/// Loads matching blocks by name (after `prefix`). Every parameter must be
/// present with an identical shape.
inline void blocks_from_json(const ojson &blocks, const ParamList &params,
                             const std::string &prefix = "") {
  if (!blocks.is_array()) throw std::invalid_argument("checkpoint 'blocks' must be an array");
  for (auto *p : params) {
    const ojson *found = nullptr;
    for (const auto &b : blocks) {
      if (b.contains("name") && b["name"] == prefix + p->name) found = &b;
    }
    if (!found) throw std::invalid_argument("checkpoint lacks block '" + prefix + p->name + "'");
    const auto shape = (*found)["shape"].get<std::vector<std::size_t>>();
    if (shape != p->shape) {
      throw std::invalid_argument("checkpoint block '" + prefix + p->name + "' has a different shape");
    }
    auto values = decode_f64le((*found)["values_b64_f64le"].get<std::string>());
    if (values.size() != p->size()) {
      throw std::invalid_argument("checkpoint block '" + prefix + p->name + "' has wrong length");
    }
    p->values = std::move(values);
    ++p->version;
  }
}

} // namespace quicktune
