#pragma once

// Search-space schema, pipelines, observation history and the pipeline
// encoding shared by every predictor.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "quicktune/rng.hpp"

namespace quicktune {

using json = nlohmann::json;

class ValidationError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

class EmptyHistoryError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

enum class DimKind { numeric, ordinal, categorical };
enum class Scale { linear, log };

struct Condition {
  std::string parent;
  std::vector<std::string> values; // as written in the schema
  std::size_t parent_index = 0;    // resolved by SearchSpace
  std::vector<std::size_t> active_levels;
};

struct HyperparamDim {
  std::string name;
  DimKind kind = DimKind::numeric;
  double lo = 0.0;
  double hi = 1.0;
  Scale scale = Scale::linear;
  std::vector<double> levels;       // ordinal
  std::vector<std::string> choices; // categorical
  std::optional<Condition> condition;

  std::size_t level_count() const {
    return kind == DimKind::ordinal ? levels.size() : choices.size();
  }
  /// Entries this dim occupies in an encoded pipeline.
  std::size_t encoded_width() const {
    return kind == DimKind::categorical ? choices.size() : 1;
  }
};

struct ModelInfo {
  std::string name;
  double param_count = 1.0;       // millions
  double upstream_accuracy = 0.0; // percent

  bool operator==(const ModelInfo &) const = default;
};

struct MetaFeatures {
  long n_samples = 1;
  long resolution = 1;
  long channels = 1;
  long classes = 1;

  bool operator==(const MetaFeatures &) const = default;

  void validate() const {
    if (n_samples <= 0 || resolution <= 0 || channels <= 0 || classes <= 0) {
      throw ValidationError("meta-features must be strictly positive");
    }
  }
};

/// x = {m, lambda}. Numeric dims carry the value itself; ordinal and
/// categorical dims carry the level index. Inactive dims are empty.
struct Pipeline {
  std::size_t model_index = 0;
  std::vector<std::optional<double>> values;

  bool operator==(const Pipeline &) const = default;
};

struct EncodedPipeline {
  std::vector<double> features;
  std::vector<unsigned char> mask;
};

class SearchSpace {
public:
  SearchSpace() = default;

  SearchSpace(std::vector<HyperparamDim> dims, std::vector<ModelInfo> hub)
      : dims_(std::move(dims)), hub_(std::move(hub)) {
    validate_and_resolve();
  }

  const std::vector<HyperparamDim> &dims() const { return dims_; }
  const std::vector<ModelInfo> &hub() const { return hub_; }

  std::optional<std::size_t> dim_index(const std::string &name) const {
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (dims_[i].name == name) return i;
    }
    return std::nullopt;
  }

  /// Width of the hyperparameter block (everything except the model one-hot).
  std::size_t hparam_width() const {
    std::size_t w = 0;
    for (const auto &d : dims_) w += d.encoded_width();
    return w;
  }

  std::size_t encoded_width() const { return hparam_width() + hub_.size(); }

  bool is_active(const Pipeline &p, std::size_t dim) const {
    const auto &c = dims_[dim].condition;
    if (!c) return true;
    if (!is_active(p, c->parent_index)) return false;
    const auto &pv = p.values[c->parent_index];
    if (!pv) return false;
    const auto level = static_cast<std::size_t>(*pv);
    return std::find(c->active_levels.begin(), c->active_levels.end(), level) !=
           c->active_levels.end();
  }

  void validate(const Pipeline &p) const {
    if (p.model_index >= hub_.size()) {
      throw ValidationError("model index out of range");
    }
    if (p.values.size() != dims_.size()) {
      throw ValidationError("pipeline has " + std::to_string(p.values.size()) +
                            " values, space has " +
                            std::to_string(dims_.size()) + " dims");
    }
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      const auto &d = dims_[i];
      const auto &v = p.values[i];
      const bool active = is_active(p, i);
      if (active != v.has_value()) {
        throw ValidationError("dim '" + d.name + "' is " +
                              (active ? "active but unset" : "inactive but set"));
      }
      if (!v) continue;
      if (d.kind == DimKind::numeric) {
        if (!(*v >= d.lo && *v <= d.hi)) {
          throw ValidationError("value of '" + d.name + "' outside [" +
                                std::to_string(d.lo) + ", " +
                                std::to_string(d.hi) + "]");
        }
      } else {
        const double idx = *v;
        if (idx < 0 || idx != std::floor(idx) ||
            idx >= static_cast<double>(d.level_count())) {
          throw ValidationError("level index of '" + d.name + "' out of range");
        }
      }
    }
  }

private:
  void validate_and_resolve() {
    if (hub_.empty()) throw ValidationError("model hub is empty");
    for (std::size_t m = 0; m < hub_.size(); ++m) {
      if (!(hub_[m].param_count > 0)) {
        throw ValidationError("model '" + hub_[m].name + "' needs param_count > 0");
      }
      if (!(hub_[m].upstream_accuracy >= 0 && hub_[m].upstream_accuracy <= 100)) {
        throw ValidationError("model '" + hub_[m].name +
                              "' accuracy outside [0, 100]");
      }
    }
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      auto &d = dims_[i];
      for (std::size_t j = 0; j < i; ++j) {
        if (dims_[j].name == d.name) {
          throw ValidationError("duplicate dim name '" + d.name + "'");
        }
      }
      switch (d.kind) {
      case DimKind::numeric:
        if (!(d.lo < d.hi)) throw ValidationError("dim '" + d.name + "': lo >= hi");
        if (d.scale == Scale::log && !(d.lo > 0)) {
          throw ValidationError("dim '" + d.name + "': log scale needs lo > 0");
        }
        break;
      case DimKind::ordinal:
        if (d.levels.empty()) throw ValidationError("dim '" + d.name + "' has no levels");
        for (std::size_t a = 0; a < d.levels.size(); ++a)
          for (std::size_t b = 0; b < a; ++b)
            if (d.levels[a] == d.levels[b])
              throw ValidationError("dim '" + d.name + "' repeats a level");
        break;
      case DimKind::categorical:
        if (d.choices.empty()) throw ValidationError("dim '" + d.name + "' has no choices");
        for (std::size_t a = 0; a < d.choices.size(); ++a)
          for (std::size_t b = 0; b < a; ++b)
            if (d.choices[a] == d.choices[b])
              throw ValidationError("dim '" + d.name + "' repeats a choice");
        break;
      }
      if (d.condition) resolve_condition(i);
    }
  }

  // Parents must be declared earlier, which also rules out cycles.
  void resolve_condition(std::size_t i) {
    auto &c = *dims_[i].condition;
    std::optional<std::size_t> parent;
    for (std::size_t j = 0; j < i; ++j) {
      if (dims_[j].name == c.parent) parent = j;
    }
    if (!parent) {
      throw ValidationError("dim '" + dims_[i].name + "': parent '" + c.parent +
                            "' must be declared before it");
    }
    const auto &p = dims_[*parent];
    if (p.kind == DimKind::numeric) {
      throw ValidationError("dim '" + dims_[i].name +
                            "': conditions on numeric parents are unsupported");
    }
    if (c.values.empty()) {
      throw ValidationError("dim '" + dims_[i].name + "': empty condition values");
    }
    c.parent_index = *parent;
    c.active_levels.clear();
    for (const auto &v : c.values) {
      std::optional<std::size_t> level;
      for (std::size_t k = 0; k < p.level_count(); ++k) {
        if (p.kind == DimKind::categorical ? p.choices[k] == v
                                           : format_level(p.levels[k]) == v ||
                                                 parse_number(v) == p.levels[k]) {
          level = k;
        }
      }
      if (!level) {
        throw ValidationError("dim '" + dims_[i].name + "': '" + v +
                              "' is not a value of '" + p.name + "'");
      }
      c.active_levels.push_back(*level);
    }
  }

  static std::string format_level(double v) { return json(v).dump(); }

  static std::optional<double> parse_number(const std::string &s) {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used == s.size()) return v;
    } catch (const std::exception &) {
    }
    return std::nullopt;
  }

  std::vector<HyperparamDim> dims_;
  std::vector<ModelInfo> hub_;
};

// ---------------------------------------------------------------------------
// Sampling and encoding

inline Pipeline sample_pipeline(const SearchSpace &space, Rng &rng) {
  Pipeline p;
  p.model_index = uniform_index(rng, space.hub().size());
  p.values.assign(space.dims().size(), std::nullopt);
  for (std::size_t i = 0; i < space.dims().size(); ++i) {
    if (!space.is_active(p, i)) continue;
    const auto &d = space.dims()[i];
    switch (d.kind) {
    case DimKind::numeric:
      if (d.scale == Scale::log) {
        p.values[i] = std::exp(uniform(rng, std::log(d.lo), std::log(d.hi)));
        p.values[i] = std::clamp(*p.values[i], d.lo, d.hi);
      } else {
        p.values[i] = uniform(rng, d.lo, d.hi);
      }
      break;
    case DimKind::ordinal:
    case DimKind::categorical:
      p.values[i] = static_cast<double>(uniform_index(rng, d.level_count()));
      break;
    }
  }
  return p;
}

inline EncodedPipeline encode(const Pipeline &p, const SearchSpace &space) {
  space.validate(p);
  EncodedPipeline e;
  e.features.reserve(space.encoded_width());
  e.mask.reserve(space.encoded_width());
  for (std::size_t i = 0; i < space.dims().size(); ++i) {
    const auto &d = space.dims()[i];
    const auto &v = p.values[i];
    const unsigned char on = v.has_value() ? 1 : 0;
    switch (d.kind) {
    case DimKind::numeric: {
      double x = 0.0;
      if (v) {
        x = d.scale == Scale::log
                ? (std::log(*v) - std::log(d.lo)) / (std::log(d.hi) - std::log(d.lo))
                : (*v - d.lo) / (d.hi - d.lo);
      }
      e.features.push_back(x);
      e.mask.push_back(on);
      break;
    }
    case DimKind::ordinal: {
      const std::size_t n = d.levels.size();
      e.features.push_back(v && n > 1 ? *v / static_cast<double>(n - 1) : 0.0);
      e.mask.push_back(on);
      break;
    }
    case DimKind::categorical:
      for (std::size_t k = 0; k < d.choices.size(); ++k) {
        e.features.push_back(v && static_cast<std::size_t>(*v) == k ? 1.0 : 0.0);
        e.mask.push_back(on);
      }
      break;
    }
  }
  for (std::size_t m = 0; m < space.hub().size(); ++m) {
    e.features.push_back(m == p.model_index ? 1.0 : 0.0);
    e.mask.push_back(1);
  }
  return e;
}

// ---------------------------------------------------------------------------
// History

using PipelineId = std::size_t;

struct Observation {
  PipelineId pipeline_id = 0;
  int epoch = 1;
  double val_loss = 0.0;
  double cum_cost = 0.0;
};

/// Append-only record of evaluations. Per pipeline, epochs advance by a fixed
/// step and cumulative cost never decreases.
class History {
public:
  explicit History(int delta_t = 1) : delta_t_(delta_t) {
    if (delta_t < 1) throw ValidationError("epoch step must be >= 1");
  }

  int delta_t() const { return delta_t_; }
  bool empty() const { return obs_.empty(); }
  std::size_t size() const { return obs_.size(); }
  const std::vector<Observation> &observations() const { return obs_; }
  const Observation &operator[](std::size_t i) const { return obs_[i]; }

  void append(const Observation &o) {
    if (!(o.val_loss >= 0.0 && o.val_loss <= 1.0)) {
      throw ValidationError("validation loss outside [0, 1]");
    }
    if (!(o.cum_cost >= 0.0) || !std::isfinite(o.cum_cost)) {
      throw ValidationError("cumulative cost must be finite and >= 0");
    }
    auto &idx = index_[o.pipeline_id];
    const int expected = idx.empty() ? delta_t_ : obs_[idx.back()].epoch + delta_t_;
    if (o.epoch != expected) {
      throw ValidationError("pipeline " + std::to_string(o.pipeline_id) +
                            " expected epoch " + std::to_string(expected) +
                            ", got " + std::to_string(o.epoch));
    }
    if (!idx.empty() && o.cum_cost < obs_[idx.back()].cum_cost) {
      throw ValidationError("cumulative cost decreased for pipeline " +
                            std::to_string(o.pipeline_id));
    }
    idx.push_back(obs_.size());
    obs_.push_back(o);
  }

  bool observed(PipelineId id) const { return index_.count(id) != 0; }

  /// 0 when the pipeline has not been evaluated.
  int max_epoch(PipelineId id) const {
    const auto it = index_.find(id);
    return it == index_.end() ? 0 : obs_[it->second.back()].epoch;
  }

  /// Cumulative cost at the latest observed epoch, 0 when unobserved.
  double last_cost(PipelineId id) const {
    const auto it = index_.find(id);
    return it == index_.end() ? 0.0 : obs_[it->second.back()].cum_cost;
  }

  /// Observation indices of one pipeline, in epoch order.
  const std::vector<std::size_t> &of(PipelineId id) const {
    static const std::vector<std::size_t> none;
    const auto it = index_.find(id);
    return it == index_.end() ? none : it->second;
  }

  /// Pipelines in first-seen order.
  std::vector<PipelineId> pipelines() const {
    std::vector<std::pair<std::size_t, PipelineId>> first;
    for (const auto &[id, idx] : index_) first.emplace_back(idx.front(), id);
    std::sort(first.begin(), first.end());
    std::vector<PipelineId> out;
    for (const auto &f : first) out.push_back(f.second);
    return out;
  }

  /// Loss curve of a pipeline over epochs 1..n (zero where unobserved),
  /// restricted to epochs <= up_to.
  std::vector<double> curve(PipelineId id, int n, int up_to) const {
    std::vector<double> c(static_cast<std::size_t>(n), 0.0);
    for (std::size_t i : of(id)) {
      const auto &o = obs_[i];
      if (o.epoch <= up_to && o.epoch <= n) c[o.epoch - 1] = o.val_loss;
    }
    return c;
  }

private:
  int delta_t_;
  std::vector<Observation> obs_;
  std::map<PipelineId, std::vector<std::size_t>> index_;
};

/// Next query epoch of a pipeline: last observed epoch plus the step.
inline int tau(const History &h, PipelineId id, int delta_t) {
  if (delta_t < 1) throw ValidationError("epoch step must be >= 1");
  return h.max_epoch(id) + delta_t;
}

/// Best loss observed at exactly epoch `at`; falls back to the best loss at
/// any earlier epoch, then to the best loss overall.
inline double incumbent(const History &h, int at) {
  if (h.empty()) throw EmptyHistoryError("incumbent of an empty history");
  constexpr double inf = std::numeric_limits<double>::infinity();
  double exact = inf, earlier = inf, any = inf;
  for (const auto &o : h.observations()) {
    if (o.epoch == at) exact = std::min(exact, o.val_loss);
    if (o.epoch < at) earlier = std::min(earlier, o.val_loss);
    any = std::min(any, o.val_loss);
  }
  if (exact < inf) return exact;
  if (earlier < inf) return earlier;
  return any;
}

struct BestEntry {
  PipelineId pipeline_id = 0;
  int epoch = 0;
  double loss = 0.0;
};

inline BestEntry best_in_history(const History &h) {
  if (h.empty()) throw EmptyHistoryError("best of an empty history");
  const Observation *best = &h[0];
  for (const auto &o : h.observations()) {
    if (o.val_loss < best->val_loss) best = &o;
  }
  return {best->pipeline_id, best->epoch, best->val_loss};
}

// ---------------------------------------------------------------------------
// Schema (de)serialization

namespace detail {

inline void reject_unknown(const json &j, std::initializer_list<const char *> allowed,
                           const std::string &where) {
  if (!j.is_object()) throw ValidationError(where + ": expected an object");
  for (const auto &[key, _] : j.items()) {
    bool ok = false;
    for (const char *a : allowed) ok = ok || key == a;
    if (!ok) throw ValidationError(where + ": unknown field '" + key + "'");
  }
}

template <class T> T require(const json &j, const char *key, const std::string &where) {
  if (!j.contains(key)) throw ValidationError(where + ": missing '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception &e) {
    throw ValidationError(where + ": bad '" + key + "': " + e.what());
  }
}

inline std::string value_to_string(const json &v) {
  return v.is_string() ? v.get<std::string>() : v.dump();
}

} // namespace detail

inline HyperparamDim dim_from_json(const json &j) {
  detail::reject_unknown(j, {"name", "kind", "lo", "hi", "scale", "choices", "condition"},
                         "dim");
  HyperparamDim d;
  d.name = detail::require<std::string>(j, "name", "dim");
  const std::string where = "dim '" + d.name + "'";
  const auto kind = detail::require<std::string>(j, "kind", where);
  if (kind == "numeric") {
    d.kind = DimKind::numeric;
    d.lo = detail::require<double>(j, "lo", where);
    d.hi = detail::require<double>(j, "hi", where);
    const auto scale = j.value("scale", std::string("linear"));
    if (scale == "log") d.scale = Scale::log;
    else if (scale != "linear") throw ValidationError(where + ": unknown scale '" + scale + "'");
  } else if (kind == "ordinal") {
    d.kind = DimKind::ordinal;
    d.levels = detail::require<std::vector<double>>(j, "choices", where);
  } else if (kind == "categorical") {
    d.kind = DimKind::categorical;
    if (!j.contains("choices") || !j["choices"].is_array()) {
      throw ValidationError(where + ": missing 'choices'");
    }
    for (const auto &c : j["choices"]) d.choices.push_back(detail::value_to_string(c));
  } else {
    throw ValidationError(where + ": unknown kind '" + kind + "'");
  }
  if (j.contains("condition") && !j["condition"].is_null()) {
    const auto &c = j["condition"];
    detail::reject_unknown(c, {"parent", "values"}, where + " condition");
    Condition cond;
    cond.parent = detail::require<std::string>(c, "parent", where);
    if (!c.contains("values") || !c["values"].is_array()) {
      throw ValidationError(where + ": condition needs 'values'");
    }
    for (const auto &v : c["values"]) cond.values.push_back(detail::value_to_string(v));
    d.condition = std::move(cond);
  }
  return d;
}

inline json dim_to_json(const HyperparamDim &d) {
  json j{{"name", d.name}};
  switch (d.kind) {
  case DimKind::numeric:
    j["kind"] = "numeric";
    j["lo"] = d.lo;
    j["hi"] = d.hi;
    j["scale"] = d.scale == Scale::log ? "log" : "linear";
    break;
  case DimKind::ordinal:
    j["kind"] = "ordinal";
    j["choices"] = d.levels;
    break;
  case DimKind::categorical:
    j["kind"] = "categorical";
    j["choices"] = d.choices;
    break;
  }
  if (d.condition) j["condition"] = {{"parent", d.condition->parent}, {"values", d.condition->values}};
  return j;
}

inline ModelInfo model_from_json(const json &j) {
  detail::reject_unknown(j, {"name", "param_count", "upstream_accuracy"}, "model");
  ModelInfo m;
  m.name = detail::require<std::string>(j, "name", "model");
  m.param_count = detail::require<double>(j, "param_count", "model '" + m.name + "'");
  m.upstream_accuracy = detail::require<double>(j, "upstream_accuracy", "model '" + m.name + "'");
  return m;
}

inline json model_to_json(const ModelInfo &m) {
  return {{"name", m.name}, {"param_count", m.param_count},
          {"upstream_accuracy", m.upstream_accuracy}};
}

inline SearchSpace space_from_json(const json &j) {
  detail::reject_unknown(j, {"dims", "hub"}, "search space");
  std::vector<HyperparamDim> dims;
  std::vector<ModelInfo> hub;
  if (!j.contains("dims") || !j["dims"].is_array()) throw ValidationError("search space: missing 'dims'");
  if (!j.contains("hub") || !j["hub"].is_array()) throw ValidationError("search space: missing 'hub'");
  for (const auto &d : j["dims"]) dims.push_back(dim_from_json(d));
  for (const auto &m : j["hub"]) hub.push_back(model_from_json(m));
  return SearchSpace(std::move(dims), std::move(hub));
}

inline json space_to_json(const SearchSpace &s) {
  json dims = json::array(), hub = json::array();
  for (const auto &d : s.dims()) dims.push_back(dim_to_json(d));
  for (const auto &m : s.hub()) hub.push_back(model_to_json(m));
  return {{"dims", dims}, {"hub", hub}};
}

/// Human-readable hyperparameter map; inactive dims are omitted.
inline json hparams_to_json(const Pipeline &p, const SearchSpace &space) {
  json j = json::object();
  for (std::size_t i = 0; i < space.dims().size(); ++i) {
    const auto &v = p.values[i];
    if (!v) continue;
    const auto &d = space.dims()[i];
    const auto k = static_cast<std::size_t>(*v);
    switch (d.kind) {
    case DimKind::numeric: j[d.name] = *v; break;
    case DimKind::ordinal: j[d.name] = d.levels[k]; break;
    case DimKind::categorical: j[d.name] = d.choices[k]; break;
    }
  }
  return j;
}

inline Pipeline hparams_from_json(const json &j, std::size_t model_index,
                                  const SearchSpace &space) {
  if (!j.is_object()) throw ValidationError("hparams must be an object");
  Pipeline p;
  p.model_index = model_index;
  p.values.assign(space.dims().size(), std::nullopt);
  for (const auto &[key, val] : j.items()) {
    const auto i = space.dim_index(key);
    if (!i) throw ValidationError("unknown hyperparameter '" + key + "'");
    const auto &d = space.dims()[*i];
    switch (d.kind) {
    case DimKind::numeric:
      if (!val.is_number()) throw ValidationError("'" + key + "' must be numeric");
      p.values[*i] = val.get<double>();
      break;
    case DimKind::ordinal: {
      if (!val.is_number()) throw ValidationError("'" + key + "' must be numeric");
      const auto it = std::find(d.levels.begin(), d.levels.end(), val.get<double>());
      if (it == d.levels.end()) throw ValidationError("'" + key + "' is not a declared level");
      p.values[*i] = static_cast<double>(it - d.levels.begin());
      break;
    }
    case DimKind::categorical: {
      const auto s = detail::value_to_string(val);
      const auto it = std::find(d.choices.begin(), d.choices.end(), s);
      if (it == d.choices.end()) throw ValidationError("'" + key + "' is not a declared choice");
      p.values[*i] = static_cast<double>(it - d.choices.begin());
      break;
    }
    }
  }
  space.validate(p);
  return p;
}

} // namespace quicktune
