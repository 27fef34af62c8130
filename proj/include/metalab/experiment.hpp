#pragma once

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "metalab/bounds.hpp"
#include "metalab/cluster.hpp"
#include "metalab/entropy.hpp"
#include "metalab/metalearn.hpp"
#include "metalab/model.hpp"
#include "metalab/rng.hpp"
#include "metalab/stability.hpp"
#include "metalab/synthetic.hpp"
#include "metalab/tasks.hpp"

namespace metalab::harness
{
using json = nlohmann::json;

/// Raised for any malformed or out-of-range experiment configuration.
class ConfigError : public std::invalid_argument
{
public:
  using std::invalid_argument::invalid_argument;
};

enum class ExperimentKind
{
  entropy_curve,
  noise_table,
  heterogeneous,
  ablation,
  sensitivity_sweep,
  bounds_sweep,
};

inline const char* to_string(ExperimentKind k)
{
  switch (k)
  {
    case ExperimentKind::entropy_curve: return "entropy_curve";
    case ExperimentKind::noise_table: return "noise_table";
    case ExperimentKind::heterogeneous: return "heterogeneous";
    case ExperimentKind::ablation: return "ablation";
    case ExperimentKind::sensitivity_sweep: return "sensitivity_sweep";
    case ExperimentKind::bounds_sweep: return "bounds_sweep";
  }
  return "?";
}

inline ExperimentKind experiment_kind_from_string(const std::string& s)
{
  for (const auto k : {ExperimentKind::entropy_curve, ExperimentKind::noise_table,
                       ExperimentKind::heterogeneous, ExperimentKind::ablation,
                       ExperimentKind::sensitivity_sweep, ExperimentKind::bounds_sweep})
  {
    if (s == to_string(k))
    {
      return k;
    }
  }
  throw ConfigError("unknown experiment kind '" + s + "'");
}

/// Unsupervised kinds build tasks by clustering; the rest sample labelled
/// episodes from the corrupted training labels.
inline bool is_unsupervised(ExperimentKind k)
{
  return k == ExperimentKind::ablation || k == ExperimentKind::sensitivity_sweep;
}

struct ModelSpec
{
  std::vector<std::size_t> hidden{32, 32};
  std::size_t num_groups = 1;
  std::size_t c_max = 5;
};

/// Shape of labelled training tasks.
struct TaskSpec
{
  std::size_t way = 5;
  /// When non-zero each task draws its way uniformly from [min_way, way].
  std::size_t min_way = 0;
  std::size_t shot = 1;
  std::size_t query = 5;
};

/// Held-out evaluation episodes, drawn from test classes with true labels.
struct EpisodeSpec
{
  std::size_t count = 200;
  std::size_t way = 5;
  std::size_t shot = 1;
  std::size_t query = 15;
};

struct ProbeSpec
{
  double lr = 0.1;
  std::size_t steps = 100;
};

struct UnsupervisedSpec
{
  /// "input" clusters raw inputs; "body" clusters the current model's
  /// head-input features.
  std::string embedding = "input";
  std::size_t samples_per_task = 400;
  std::size_t max_way = 5;
  std::size_t shot = 5;
  std::size_t query = 5;
  std::size_t max_retries = 100;
  std::size_t kmeans_k = 10;
  /// Unlabelled background points added to the pool, as a fraction of it.
  double background_fraction = 0.3;
  /// Background spread in units of the class separation.
  double background_scale = 1.5;
};

struct TraceSpec
{
  bool enabled = false;
  /// Record rs every `every` training steps against the previous step.
  std::size_t every = 1;
  std::size_t probe_size = 200;
};

struct BoundsSpec
{
  double m = 10000.0;
  double c1 = 10.0;
  double c2 = 5.0;
  double k = 1.0;
  std::optional<double> n;
  double stability_constant = 0.1;
  double loss_bound = 1.0;
  double delta = 0.01;
};

inline TrainConfig desk_trainer()
{
  TrainConfig t;
  t.alpha = 0.3;
  t.eta = 0.02;
  t.inner_steps = 5;
  t.meta_batch = 4;
  t.epochs = 600;
  return t;
}

inline std::vector<double> uniform_grid(std::size_t points)
{
  std::vector<double> g;
  for (std::size_t i = 0; i < points; ++i)
  {
    g.push_back(points == 1 ? 1.0 : static_cast<double>(i) / static_cast<double>(points - 1));
  }
  return g;
}

struct ExperimentConfig
{
  ExperimentKind kind = ExperimentKind::noise_table;
  /// The generator seed is replaced by each run seed.
  SyntheticSpec dataset{40, 16, 30, 3.0, 6, 1.5, 0};
  double train_fraction = 0.6;
  double val_fraction = 0.2;
  ModelSpec model;
  TrainConfig trainer = desk_trainer();
  WctConfig wct{0.1, 150, 32, 0};
  ProbeSpec probe;
  TaskSpec tasks;
  EpisodeSpec episodes;
  cluster::DbscanParams dbscan{4.0, 4};
  UnsupervisedSpec unsupervised;
  std::vector<std::string> methods{"meta", "wct"};
  std::vector<double> noise_levels{0.0};
  /// Fractions of m ln C.
  std::vector<double> entropy_grid = uniform_grid(8);
  std::vector<std::uint64_t> seeds{1};
  TraceSpec trace;
  BoundsSpec bounds;
  std::string output = "results.csv";

  const std::vector<double>& grid() const
  {
    return kind == ExperimentKind::entropy_curve || kind == ExperimentKind::bounds_sweep
               ? entropy_grid
               : noise_levels;
  }

  std::string grid_key() const
  {
    return kind == ExperimentKind::entropy_curve || kind == ExperimentKind::bounds_sweep
               ? "entropy_fraction"
               : "noise";
  }

  static const std::vector<std::string>& known_methods(ExperimentKind kind)
  {
    static const std::vector<std::string> supervised{"meta", "maml", "wct", "multitask"};
    static const std::vector<std::string> unsupervised{"full", "kmeans", "wct", "no_scaler"};
    static const std::vector<std::string> none{};
    if (kind == ExperimentKind::bounds_sweep)
    {
      return none;
    }
    return is_unsupervised(kind) ? unsupervised : supervised;
  }

  void validate() const
  {
    const auto fail = [](const std::string& what) { throw ConfigError(what); };
    if (seeds.empty()) fail("seeds: at least one seed is required");
    if (grid().empty()) fail(grid_key() + " grid is empty");
    if (kind == ExperimentKind::bounds_sweep)
    {
      for (const double f : entropy_grid)
      {
        if (!(f >= 0.0 && f <= 1.0)) fail("entropy_grid values must lie in [0, 1]");
      }
      const bounds::BoundInputs in{bounds.m, bounds.c1, bounds.c2, bounds.k, bounds.n, 0.0};
      try
      {
        in.validate();
      }
      catch (const std::exception& e)
      {
        fail(std::string("bounds: ") + e.what());
      }
      return;
    }
    try
    {
      dataset.validate();
      trainer.validate();
      wct.validate();
      dbscan.validate();
    }
    catch (const ConfigError&)
    {
      throw;
    }
    catch (const std::exception& e)
    {
      fail(e.what());
    }
    if (methods.empty()) fail("methods: at least one method is required");
    const auto& known = known_methods(kind);
    for (const auto& m : methods)
    {
      if (std::find(known.begin(), known.end(), m) == known.end())
      {
        fail("method '" + m + "' is not available for kind " + to_string(kind));
      }
    }
    if (!(train_fraction > 0.0 && val_fraction >= 0.0 && train_fraction + val_fraction < 1.0))
    {
      fail("split fractions must leave room for test classes");
    }
    if (model.hidden.empty()) fail("model.hidden must list at least one layer width");
    if (model.num_groups < 1 || model.c_max < 2) fail("model needs num_groups >= 1, c_max >= 2");
    if (episodes.count == 0 || episodes.way < 2 || episodes.shot == 0 || episodes.query == 0)
    {
      fail("episodes need count >= 1, way >= 2, shot >= 1, query >= 1");
    }
    if (episodes.way > model.c_max) fail("episodes.way exceeds model.c_max");
    if (tasks.way < 2 || tasks.shot == 0 || tasks.query == 0)
    {
      fail("tasks need way >= 2, shot >= 1, query >= 1");
    }
    if (tasks.way > model.c_max) fail("tasks.way exceeds model.c_max");
    if (tasks.min_way != 0 && (tasks.min_way < 2 || tasks.min_way > tasks.way))
    {
      fail("tasks.min_way must lie in [2, tasks.way]");
    }
    if (unsupervised.embedding != "input" && unsupervised.embedding != "body")
    {
      fail("unsupervised.embedding must be 'input' or 'body'");
    }
    if (unsupervised.max_way < 2 || unsupervised.max_way > model.c_max)
    {
      fail("unsupervised.max_way must lie in [2, model.c_max]");
    }
    if (unsupervised.kmeans_k < 2) fail("unsupervised.kmeans_k must be >= 2");
    if (probe.steps == 0 || !(probe.lr > 0.0)) fail("probe needs lr > 0 and steps >= 1");
    if (trace.enabled && (trace.every == 0 || trace.probe_size < 2))
    {
      fail("trace needs every >= 1 and probe_size >= 2");
    }
    for (const double v : grid())
    {
      if (kind == ExperimentKind::entropy_curve && !(v >= 0.0 && v <= 1.0))
      {
        fail("entropy_grid values must lie in [0, 1]");
      }
      if (kind != ExperimentKind::entropy_curve && !(v >= 0.0 && v < 1.0))
      {
        fail("noise_levels must lie in [0, 1)");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// JSON

namespace detail
{
/// Reads fields from one JSON object and rejects keys nobody asked for.
class ObjectReader
{
public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path))
  {
    if (!j_.is_object())
    {
      throw ConfigError(where("") + "expected an object");
    }
  }

  template <class T>
  void get(const char* key, T& out)
  {
    seen_.emplace_back(key);
    if (!j_.contains(key))
    {
      return;
    }
    try
    {
      out = j_.at(key).template get<T>();
    }
    catch (const json::exception& e)
    {
      throw ConfigError(where(key) + e.what());
    }
  }

  template <class T>
  void get(const char* key, std::optional<T>& out)
  {
    seen_.emplace_back(key);
    if (!j_.contains(key) || j_.at(key).is_null())
    {
      return;
    }
    T v{};
    get_value(key, v);
    out = v;
  }

  void sub(const char* key, const std::function<void(ObjectReader&)>& body)
  {
    seen_.emplace_back(key);
    if (j_.contains(key))
    {
      ObjectReader r(j_.at(key), path_ + key + ".");
      body(r);
      r.finish();
    }
  }

  template <class E>
  void get_enum(const char* key, E& out, E (*parse)(const std::string&))
  {
    std::string s;
    get(key, s);
    if (!s.empty())
    {
      try
      {
        out = parse(s);
      }
      catch (const std::exception& e)
      {
        throw ConfigError(where(key) + e.what());
      }
    }
  }

  void finish() const
  {
    for (const auto& [key, value] : j_.items())
    {
      if (std::find(seen_.begin(), seen_.end(), key) == seen_.end())
      {
        throw ConfigError("unknown config key '" + path_ + key + "'");
      }
    }
  }

private:
  template <class T>
  void get_value(const char* key, T& out)
  {
    try
    {
      out = j_.at(key).template get<T>();
    }
    catch (const json::exception& e)
    {
      throw ConfigError(where(key) + e.what());
    }
  }

  std::string where(const std::string& key) const { return "config '" + path_ + key + "': "; }

  const json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};
}  // namespace detail

inline ExperimentConfig config_from_json(const json& j)
{
  ExperimentConfig c;
  detail::ObjectReader r(j, "");
  std::string kind;
  r.get("kind", kind);
  if (kind.empty())
  {
    throw ConfigError("config 'kind' is required");
  }
  c.kind = experiment_kind_from_string(kind);
  if (c.kind == ExperimentKind::ablation)
  {
    c.methods = {"full", "kmeans", "wct", "no_scaler"};
  }
  else if (c.kind == ExperimentKind::sensitivity_sweep)
  {
    c.methods = {"full"};
  }
  if (is_unsupervised(c.kind))
  {
    c.dataset.separation = 5.0;
    c.noise_levels = {0.3};
  }
  r.sub("dataset", [&](detail::ObjectReader& d) {
    d.get("num_classes", c.dataset.num_classes);
    d.get("dim", c.dataset.dim);
    d.get("per_class", c.dataset.per_class);
    d.get("separation", c.dataset.separation);
    d.get("informative_dim", c.dataset.informative_dim);
    d.get("radius", c.dataset.radius);
  });
  r.sub("split", [&](detail::ObjectReader& d) {
    d.get("train", c.train_fraction);
    d.get("val", c.val_fraction);
  });
  r.sub("model", [&](detail::ObjectReader& d) {
    d.get("hidden", c.model.hidden);
    d.get("num_groups", c.model.num_groups);
    d.get("c_max", c.model.c_max);
  });
  r.sub("trainer", [&](detail::ObjectReader& d) {
    d.get("alpha", c.trainer.alpha);
    d.get("eta", c.trainer.eta);
    d.get("inner_steps", c.trainer.inner_steps);
    d.get("meta_batch", c.trainer.meta_batch);
    d.get("epochs", c.trainer.epochs);
    d.get_enum("mode", c.trainer.mode, &adapt_mode_from_string);
    d.get("scaler_enabled", c.trainer.scaler_enabled);
    d.get_enum("scaler_reference", c.trainer.scaler_reference, &scaler_reference_from_string);
    d.get_enum("scaler_representation", c.trainer.scaler_representation,
               &scaler_representation_from_string);
    d.get("variance_threshold", c.trainer.variance_threshold);
    d.get("random_groups", c.trainer.random_groups);
    d.get("permute_labels", c.trainer.permute_labels);
  });
  r.sub("wct", [&](detail::ObjectReader& d) {
    d.get("lr", c.wct.lr);
    d.get("epochs", c.wct.epochs);
    d.get("batch_size", c.wct.batch_size);
  });
  r.sub("probe", [&](detail::ObjectReader& d) {
    d.get("lr", c.probe.lr);
    d.get("steps", c.probe.steps);
  });
  r.sub("tasks", [&](detail::ObjectReader& d) {
    d.get("way", c.tasks.way);
    d.get("min_way", c.tasks.min_way);
    d.get("shot", c.tasks.shot);
    d.get("query", c.tasks.query);
  });
  r.sub("episodes", [&](detail::ObjectReader& d) {
    d.get("count", c.episodes.count);
    d.get("way", c.episodes.way);
    d.get("shot", c.episodes.shot);
    d.get("query", c.episodes.query);
  });
  r.sub("dbscan", [&](detail::ObjectReader& d) {
    d.get("eps", c.dbscan.eps);
    d.get("min_samples", c.dbscan.min_samples);
  });
  r.sub("unsupervised", [&](detail::ObjectReader& d) {
    auto& u = c.unsupervised;
    d.get("embedding", u.embedding);
    d.get("samples_per_task", u.samples_per_task);
    d.get("max_way", u.max_way);
    d.get("shot", u.shot);
    d.get("query", u.query);
    d.get("max_retries", u.max_retries);
    d.get("kmeans_k", u.kmeans_k);
    d.get("background_fraction", u.background_fraction);
    d.get("background_scale", u.background_scale);
  });
  r.get("methods", c.methods);
  r.get("noise_levels", c.noise_levels);
  r.get("entropy_grid", c.entropy_grid);
  r.get("seeds", c.seeds);
  r.sub("trace", [&](detail::ObjectReader& d) {
    d.get("enabled", c.trace.enabled);
    d.get("every", c.trace.every);
    d.get("probe_size", c.trace.probe_size);
  });
  r.sub("bounds", [&](detail::ObjectReader& d) {
    auto& b = c.bounds;
    d.get("m", b.m);
    d.get("c1", b.c1);
    d.get("c2", b.c2);
    d.get("k", b.k);
    d.get("n", b.n);
    d.get("stability_constant", b.stability_constant);
    d.get("loss_bound", b.loss_bound);
    d.get("delta", b.delta);
  });
  r.get("output", c.output);
  r.finish();
  c.validate();
  return c;
}

/// Fully resolved configuration, every field present.
inline json to_json(const ExperimentConfig& c)
{
  const auto& t = c.trainer;
  const auto& u = c.unsupervised;
  json b = {{"m", c.bounds.m},
            {"c1", c.bounds.c1},
            {"c2", c.bounds.c2},
            {"k", c.bounds.k},
            {"n", c.bounds.n ? json(*c.bounds.n) : json(nullptr)},
            {"stability_constant", c.bounds.stability_constant},
            {"loss_bound", c.bounds.loss_bound},
            {"delta", c.bounds.delta}};
  return {
      {"kind", to_string(c.kind)},
      {"dataset",
       {{"num_classes", c.dataset.num_classes},
        {"dim", c.dataset.dim},
        {"per_class", c.dataset.per_class},
        {"separation", c.dataset.separation},
        {"informative_dim", c.dataset.informative_dim},
        {"radius", c.dataset.radius}}},
      {"split", {{"train", c.train_fraction}, {"val", c.val_fraction}}},
      {"model",
       {{"hidden", c.model.hidden}, {"num_groups", c.model.num_groups}, {"c_max", c.model.c_max}}},
      {"trainer",
       {{"alpha", t.alpha},
        {"eta", t.eta},
        {"inner_steps", t.inner_steps},
        {"meta_batch", t.meta_batch},
        {"epochs", t.epochs},
        {"mode", to_string(t.mode)},
        {"scaler_enabled", t.scaler_enabled},
        {"scaler_reference", to_string(t.scaler_reference)},
        {"scaler_representation", to_string(t.scaler_representation)},
        {"variance_threshold", t.variance_threshold},
        {"random_groups", t.random_groups},
        {"permute_labels", t.permute_labels}}},
      {"wct", {{"lr", c.wct.lr}, {"epochs", c.wct.epochs}, {"batch_size", c.wct.batch_size}}},
      {"probe", {{"lr", c.probe.lr}, {"steps", c.probe.steps}}},
      {"tasks",
       {{"way", c.tasks.way},
        {"min_way", c.tasks.min_way},
        {"shot", c.tasks.shot},
        {"query", c.tasks.query}}},
      {"episodes",
       {{"count", c.episodes.count},
        {"way", c.episodes.way},
        {"shot", c.episodes.shot},
        {"query", c.episodes.query}}},
      {"dbscan", {{"eps", c.dbscan.eps}, {"min_samples", c.dbscan.min_samples}}},
      {"unsupervised",
       {{"embedding", u.embedding},
        {"samples_per_task", u.samples_per_task},
        {"max_way", u.max_way},
        {"shot", u.shot},
        {"query", u.query},
        {"max_retries", u.max_retries},
        {"kmeans_k", u.kmeans_k},
        {"background_fraction", u.background_fraction},
        {"background_scale", u.background_scale}}},
      {"methods", c.methods},
      {"noise_levels", c.noise_levels},
      {"entropy_grid", c.entropy_grid},
      {"seeds", c.seeds},
      {"trace",
       {{"enabled", c.trace.enabled},
        {"every", c.trace.every},
        {"probe_size", c.trace.probe_size}}},
      {"bounds", b},
      {"output", c.output},
  };
}

/// FNV-1a over the canonical dump of the resolved config, as 16 hex digits.
inline std::string config_hash(const ExperimentConfig& c)
{
  const std::string text = to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char ch : text)
  {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string resolve_alias(const std::string& path)
{
  static const std::map<std::string, std::string> aliases{{"eps", "dbscan.eps"},
                                                         {"min_samples", "dbscan.min_samples"},
                                                         {"C2", "tasks.way"},
                                                         {"k", "tasks.shot"}};
  const auto it = aliases.find(path);
  return it == aliases.end() ? path : it->second;
}

/// Set the field at a dotted path. Intermediate objects are created as
/// needed; unknown leaves are caught when the result is parsed.
inline void set_path(json& j, const std::string& dotted, const json& value)
{
  const std::string path = resolve_alias(dotted);
  if (path.empty())
  {
    throw ConfigError("override: empty path");
  }
  json* node = &j;
  std::size_t start = 0;
  while (true)
  {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty())
    {
      throw ConfigError("override: malformed path '" + dotted + "'");
    }
    if (!node->is_object())
    {
      if (!node->is_null())
      {
        throw ConfigError("override: '" + dotted + "' descends into a non-object");
      }
      *node = json::object();
    }
    if (dot == std::string::npos)
    {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

/// Parse "path=value"; the value is read as JSON when it parses, otherwise
/// as a bare string.
inline void apply_override(json& j, const std::string& assignment)
{
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
  {
    throw ConfigError("override '" + assignment + "' must look like path=value");
  }
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded())
  {
    value = text;
  }
  set_path(j, assignment.substr(0, eq), value);
}

// ---------------------------------------------------------------------------
// Results

struct ResultRow
{
  std::string kind;
  std::string method;
  std::uint64_t seed = 0;
  std::string grid_key;
  double grid_value = 0.0;
  /// Sweep cell overrides, "path=value;..." (empty outside sweeps).
  std::string cell;
  std::string metric;
  double value = 0.0;
  double ci95 = 0.0;
  std::size_t samples = 0;
  double wall_seconds = 0.0;
  std::string config_hash;
  std::string status = "ok";
  std::string message;
};

struct TraceRow
{
  std::string method;
  std::uint64_t seed = 0;
  double grid_value = 0.0;
  std::string cell;
  std::size_t layer = 0;
  std::size_t epoch = 0;
  double rs = 0.0;
};

namespace detail
{
inline std::string fmt(double v)
{
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_field(const std::string& s)
{
  if (s.find_first_of(",\"\n") == std::string::npos)
  {
    return s;
  }
  std::string out = "\"";
  for (const char ch : s)
  {
    out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  }
  return out + "\"";
}
}  // namespace detail

inline const char* result_header()
{
  return "kind,method,seed,grid_key,grid_value,cell,metric,value,ci95,samples,wall_seconds,"
         "config_hash,status,message";
}

inline std::string to_csv(const ResultRow& r)
{
  using detail::csv_field;
  using detail::fmt;
  return csv_field(r.kind) + "," + csv_field(r.method) + "," + std::to_string(r.seed) + "," +
         csv_field(r.grid_key) + "," + fmt(r.grid_value) + "," + csv_field(r.cell) + "," +
         csv_field(r.metric) + "," + fmt(r.value) + "," + fmt(r.ci95) + "," +
         std::to_string(r.samples) + "," + fmt(r.wall_seconds) + "," + r.config_hash + "," +
         r.status + "," + csv_field(r.message);
}

inline const char* trace_header() { return "method,seed,grid_value,cell,layer,epoch,rs"; }

inline std::string to_csv(const TraceRow& r)
{
  return detail::csv_field(r.method) + "," + std::to_string(r.seed) + "," +
         detail::fmt(r.grid_value) + "," + detail::csv_field(r.cell) + "," +
         std::to_string(r.layer) + "," + std::to_string(r.epoch) + "," + detail::fmt(r.rs);
}

// ---------------------------------------------------------------------------
// One (grid point, seed) run

/// Everything the methods of one run share, so they all see the same
/// corrupted labels and the same evaluation episodes.
struct RunData
{
  ClassSplit split;
  /// Training rows with corrupted labels (supervised kinds) or the
  /// unlabelled pool with background points (unsupervised kinds).
  Dataset train;
  std::size_t train_classes = 0;
  double entropy = 0.0;
  std::vector<Task> episodes;
  Tensor probe;
};

/// Corrupt every label of a pseudo task at rate `p_noise`, capped at the
/// maximum-entropy rate for its way.
inline Task corrupt_task(const Task& task, double p_noise, std::uint64_t seed)
{
  if (p_noise <= 0.0)
  {
    return task;
  }
  const std::size_t classes = std::max<std::size_t>(task.way, 2);
  const double cap = static_cast<double>(classes - 1) / static_cast<double>(classes);
  std::vector<int> all(task.support.labels);
  all.insert(all.end(), task.query.labels.begin(), task.query.labels.end());
  const double h = entropy::entropy_for_noise(std::min(p_noise, cap), all.size(), classes);
  const auto noisy = entropy::corrupt_labels(all, {all.size(), classes, h}, seed);
  Task out = task;
  const auto ns = static_cast<std::ptrdiff_t>(task.support.size());
  out.support.labels.assign(noisy.begin(), noisy.begin() + ns);
  out.query.labels.assign(noisy.begin() + ns, noisy.end());
  return out;
}

inline RunData prepare_run(const ExperimentConfig& cfg, double grid_value, std::uint64_t seed)
{
  RunData d;
  SyntheticSpec spec = cfg.dataset;
  spec.seed = seed;
  const Dataset data = gen_synthetic(spec);
  d.split = split_classes(data, cfg.train_fraction, cfg.val_fraction, seed);
  for (const int c : d.split.test_classes)
  {
    if (std::find(d.split.train_classes.begin(), d.split.train_classes.end(), c) !=
        d.split.train_classes.end())
    {
      throw std::logic_error("prepare_run: evaluation class also used for training");
    }
  }
  d.train = d.split.train;
  const auto compact = compact_labels(d.train.true_labels, &d.train_classes);
  d.train.labels = compact;
  d.train.true_labels = compact;
  d.train.num_classes = d.train_classes;

  const std::size_t m = d.train.size();
  if (cfg.kind == ExperimentKind::entropy_curve)
  {
    d.entropy = grid_value * static_cast<double>(m) * std::log(static_cast<double>(d.train_classes));
  }
  else if (!is_unsupervised(cfg.kind))
  {
    d.entropy = entropy::entropy_for_noise(grid_value, m, d.train_classes);
  }
  if (!is_unsupervised(cfg.kind))
  {
    d.train.labels = entropy::corrupt_labels(compact, {m, d.train_classes, d.entropy},
                                             derive_seed(seed, 77));
  }
  else
  {
    d.train = add_background(d.train, cfg.unsupervised.background_fraction,
                             cfg.unsupervised.background_scale * spec.separation,
                             spec.signal_dim(), derive_seed(seed, 99));
  }

  EpisodeSampler sampler(d.split.test, true);
  Rng erng(derive_seed(seed, 5));
  for (std::size_t i = 0; i < cfg.episodes.count; ++i)
  {
    d.episodes.push_back(
        sampler.sample(cfg.episodes.way, cfg.episodes.shot, cfg.episodes.query, erng));
  }
  if (cfg.trace.enabled)
  {
    Rng prng(derive_seed(seed, 0x70726f));
    const std::size_t n = std::min(cfg.trace.probe_size, d.split.train.size());
    d.probe = gather_rows(d.split.train.inputs,
                          prng.sample_without_replacement(d.split.train.size(), n));
  }
  return d;
}

inline std::vector<std::size_t> layer_dims(const ExperimentConfig& cfg)
{
  std::vector<std::size_t> dims{cfg.dataset.dim};
  dims.insert(dims.end(), cfg.model.hidden.begin(), cfg.model.hidden.end());
  return dims;
}

/// Records rs per layer between consecutive training steps.
class TraceRecorder
{
public:
  TraceRecorder(const ExperimentConfig& cfg, const RunData& data, std::string method,
                std::uint64_t seed, double grid_value, std::vector<TraceRow>& out)
      : cfg_(cfg), data_(data), method_(std::move(method)), seed_(seed), grid_(grid_value),
        out_(out)
  {
  }

  void operator()(std::size_t epoch, const ModelParams& params)
  {
    if (!cfg_.trace.enabled)
    {
      return;
    }
    if (prev_ && (epoch + 1) % cfg_.trace.every == 0)
    {
      for (const auto& r : stability::trace_layers(params, *prev_, data_.probe, epoch,
                                                   cfg_.trainer.variance_threshold))
      {
        out_.push_back({method_, seed_, grid_, "", r.layer, r.epoch, r.rs});
      }
    }
    prev_ = params;
  }

private:
  const ExperimentConfig& cfg_;
  const RunData& data_;
  std::string method_;
  std::uint64_t seed_;
  double grid_;
  std::vector<TraceRow>& out_;
  std::optional<ModelParams> prev_;
};

struct MethodOutcome
{
  EvalResult eval;
  ModelParams model;
  std::vector<TraceRow> traces;
};

inline EvalConfig finetune_eval(const ExperimentConfig& cfg)
{
  EvalConfig e;
  e.mode = EvalMode::finetune;
  e.lr = cfg.trainer.alpha;
  e.steps = cfg.trainer.inner_steps;
  e.adapt = cfg.trainer.mode;
  return e;
}

inline EvalConfig probe_eval(const ExperimentConfig& cfg)
{
  EvalConfig e;
  e.mode = EvalMode::logistic_probe;
  e.lr = cfg.probe.lr;
  e.steps = cfg.probe.steps;
  return e;
}

inline ModelParams train_wct(const ExperimentConfig& cfg, const Dataset& labelled,
                             std::uint64_t seed, TraceRecorder& trace)
{
  std::size_t classes = 0;
  compact_labels(labelled.labels, &classes);
  WctConfig wc = cfg.wct;
  wc.seed = seed;
  return wct_train(init_model(layer_dims(cfg), 1, std::max<std::size_t>(classes, 2), seed),
                   labelled, wc,
                   [&](std::size_t epoch, const ModelParams& p, double) { trace(epoch, p); });
}

/// Labelled episodic training (entropy_curve, noise_table, heterogeneous).
inline MethodOutcome run_supervised_method(const ExperimentConfig& cfg, const RunData& data,
                                           const std::string& method, std::uint64_t seed,
                                           double grid_value)
{
  MethodOutcome out;
  TraceRecorder trace(cfg, data, method, seed, grid_value, out.traces);
  if (method == "wct")
  {
    out.model = train_wct(cfg, data.train, seed, trace);
    out.eval = evaluate_episodes(out.model, data.episodes, probe_eval(cfg));
    return out;
  }

  TrainConfig tc = cfg.trainer;
  tc.seed = seed;
  std::size_t groups = cfg.model.num_groups;
  if (method == "maml")
  {
    tc.scaler_enabled = false;
    tc.random_groups = false;
    groups = 1;
  }
  const EpisodeSampler sampler(data.train);
  const TaskSource source = [&](std::size_t, Rng& rng) {
    std::vector<Task> tasks;
    for (std::size_t i = 0; i < tc.meta_batch; ++i)
    {
      std::size_t way = cfg.tasks.way;
      if (cfg.tasks.min_way != 0 && method != "maml")
      {
        way = cfg.tasks.min_way + rng.index(cfg.tasks.way - cfg.tasks.min_way + 1);
      }
      tasks.push_back(sampler.sample(way, cfg.tasks.shot, cfg.tasks.query, rng));
    }
    return tasks;
  };
  const auto hook = [&](std::size_t epoch, const ModelParams& p, const MetaStepStats&) {
    trace(epoch, p);
  };
  const auto init = init_model(layer_dims(cfg), groups, cfg.model.c_max, seed);
  if (method == "multitask")
  {
    out.model = multitask_train(init, source, tc, hook);
    out.eval = evaluate_episodes(out.model, data.episodes, probe_eval(cfg));
    return out;
  }
  out.model = meta_train(init, source, tc, hook);
  out.eval = evaluate_episodes(out.model, data.episodes, finetune_eval(cfg));
  return out;
}

/// Clustering-based training on the unlabelled pool (ablation,
/// sensitivity_sweep). `grid_value` is the pseudo-label noise rate.
inline MethodOutcome run_unsupervised_method(const ExperimentConfig& cfg, const RunData& data,
                                             const std::string& method, std::uint64_t seed,
                                             double grid_value)
{
  MethodOutcome out;
  TraceRecorder trace(cfg, data, method, seed, grid_value, out.traces);
  const auto& u = cfg.unsupervised;
  const Tensor& pool = data.train.inputs;

  if (method == "wct")
  {
    // One clustering of the whole pool supplies the class labels.
    const auto assignment = cluster::dbscan(pool, cfg.dbscan);
    std::vector<std::size_t> rows;
    std::vector<int> labels;
    for (std::size_t i = 0; i < pool.rows(); ++i)
    {
      if (assignment.labels[i] >= 0)
      {
        rows.push_back(i);
        labels.push_back(assignment.labels[i]);
      }
    }
    Dataset labelled;
    labelled.labels = compact_labels(labels, &labelled.num_classes);
    if (labelled.num_classes < 2)
    {
      throw ClusteringError("wct: pool clustering found " +
                            std::to_string(labelled.num_classes) + " clusters");
    }
    labelled.inputs = gather_rows(pool, rows);
    for (const auto r : rows)
    {
      labelled.true_labels.push_back(data.train.true_labels[r]);
    }
    if (grid_value > 0.0)
    {
      const std::size_t c = labelled.num_classes;
      const double cap = static_cast<double>(c - 1) / static_cast<double>(c);
      const double h = entropy::entropy_for_noise(std::min(grid_value, cap), rows.size(), c);
      labelled.labels = entropy::corrupt_labels(labelled.labels, {rows.size(), c, h},
                                                derive_seed(seed, 77));
    }
    out.model = train_wct(cfg, labelled, seed, trace);
    out.eval = evaluate_episodes(out.model, data.episodes, probe_eval(cfg));
    return out;
  }

  TrainConfig tc = cfg.trainer;
  tc.seed = seed;
  if (method == "no_scaler")
  {
    tc.scaler_enabled = false;
  }
  PseudoTaskConfig pc;
  pc.samples_per_task = std::min(u.samples_per_task, pool.rows());
  pc.num_tasks = tc.meta_batch;
  pc.max_way = u.max_way;
  pc.max_retries = u.max_retries;
  pc.shot = u.shot;
  pc.query = u.query;

  ModelParams current = init_model(layer_dims(cfg), cfg.model.num_groups, cfg.model.c_max, seed);
  const Embedder embed = u.embedding == "body"
                             ? Embedder([&](const Tensor& x) { return features(current, x); })
                             : Embedder([](const Tensor& x) { return x; });
  const TaskSource source = [&](std::size_t, Rng& rng) {
    auto tasks = method == "kmeans"
                     ? construct_kmeans_tasks(pool, embed, pc, u.kmeans_k, rng.fork())
                     : construct_pseudo_tasks(pool, embed, pc, cfg.dbscan, rng.fork());
    for (auto& t : tasks)
    {
      t = corrupt_task(t, grid_value, rng.fork());
    }
    return tasks;
  };
  const auto hook = [&](std::size_t epoch, const ModelParams& p, const MetaStepStats&) {
    current = p;
    trace(epoch, p);
  };
  out.model = meta_train(current, source, tc, hook);
  out.eval = evaluate_episodes(out.model, data.episodes, finetune_eval(cfg));
  return out;
}

struct PointOutput
{
  std::vector<ResultRow> rows;
  std::vector<TraceRow> traces;
};

inline double seconds_since(std::chrono::steady_clock::time_point t0)
{
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline PointOutput bounds_point(const ExperimentConfig& cfg, double fraction,
                                const std::string& hash)
{
  const auto t0 = std::chrono::steady_clock::now();
  const auto& b = cfg.bounds;
  bounds::BoundInputs in{b.m, b.c1, b.c2, b.k, b.n, fraction * b.m * std::log(b.c1)};
  in.loss_bound = b.loss_bound;
  in.delta = b.delta;
  in = bounds::with_default_stability(in, b.stability_constant);
  const double wct = bounds::wct_bound(in);
  const double meta = bounds::meta_bound(in);
  PointOutput out;
  const double elapsed = seconds_since(t0);
  for (const auto& [metric, value] :
       std::vector<std::pair<std::string, double>>{{"entropy", in.entropy},
                                                    {"wct_bound", wct},
                                                    {"meta_bound", meta},
                                                    {"ratio", meta / wct}})
  {
    ResultRow r;
    r.kind = to_string(cfg.kind);
    r.method = "bounds";
    r.grid_key = cfg.grid_key();
    r.grid_value = fraction;
    r.metric = metric;
    r.value = value;
    r.samples = 1;
    r.wall_seconds = elapsed;
    r.config_hash = hash;
    out.rows.push_back(r);
  }
  return out;
}

inline MethodOutcome run_method(const ExperimentConfig& cfg, const RunData& data,
                                const std::string& method, std::uint64_t seed, double grid_value)
{
  return is_unsupervised(cfg.kind) ? run_unsupervised_method(cfg, data, method, seed, grid_value)
                                   : run_supervised_method(cfg, data, method, seed, grid_value);
}

/// All methods of one (grid point, seed). A failure in shared setup fails
/// every method's row; a failure inside one method fails only its row.
inline PointOutput run_point(const ExperimentConfig& cfg, double grid_value, std::uint64_t seed,
                             const std::string& hash)
{
  if (cfg.kind == ExperimentKind::bounds_sweep)
  {
    return bounds_point(cfg, grid_value, hash);
  }
  PointOutput out;
  const auto base_row = [&](const std::string& method) {
    ResultRow r;
    r.kind = to_string(cfg.kind);
    r.method = method;
    r.seed = seed;
    r.grid_key = cfg.grid_key();
    r.grid_value = grid_value;
    r.metric = "accuracy";
    r.config_hash = hash;
    return r;
  };
  const auto t0 = std::chrono::steady_clock::now();
  std::optional<RunData> data;
  try
  {
    data = prepare_run(cfg, grid_value, seed);
  }
  catch (const std::exception& e)
  {
    for (const auto& m : cfg.methods)
    {
      auto r = base_row(m);
      r.status = "failed";
      r.message = e.what();
      r.value = std::nan("");
      r.ci95 = std::nan("");
      r.wall_seconds = seconds_since(t0);
      out.rows.push_back(r);
    }
    return out;
  }
  for (const auto& m : cfg.methods)
  {
    const auto tm = std::chrono::steady_clock::now();
    auto r = base_row(m);
    try
    {
      const auto outcome = run_method(cfg, *data, m, seed, grid_value);
      r.value = outcome.eval.mean;
      r.ci95 = outcome.eval.ci95;
      r.samples = outcome.eval.per_episode.size();
      out.traces.insert(out.traces.end(), outcome.traces.begin(), outcome.traces.end());
    }
    catch (const std::exception& e)
    {
      r.status = "failed";
      r.message = e.what();
      r.value = std::nan("");
      r.ci95 = std::nan("");
    }
    r.wall_seconds = seconds_since(tm);
    out.rows.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grid execution

/// Worker count for the grid executor, from METALAB_THREADS (default 1).
inline std::size_t thread_count_from_env()
{
  const char* v = std::getenv("METALAB_THREADS");
  if (v == nullptr || *v == '\0')
  {
    return 1;
  }
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (end == v || *end != '\0' || n < 1)
  {
    throw ConfigError(std::string("METALAB_THREADS must be a positive integer, got '") + v + "'");
  }
  return static_cast<std::size_t>(n);
}

struct Cell
{
  ExperimentConfig config;
  std::string label;
};

struct RunOptions
{
  std::size_t threads = 1;
  std::ostream* results = nullptr;
  std::ostream* traces = nullptr;
  /// Called with each finished row, in output order.
  std::function<void(const ResultRow&)> on_row;
};

struct RunSummary
{
  std::vector<ResultRow> rows;
  std::vector<TraceRow> traces;
  std::size_t failed = 0;

  bool all_failed() const { return !rows.empty() && failed == rows.size(); }
  int exit_code() const { return failed == 0 ? 0 : 1; }
};

/// Run every (cell, grid point, seed) job. Jobs may run on several threads;
/// rows are emitted in job order through one serialized writer, so output
/// does not depend on the thread count.
inline RunSummary run_cells(const std::vector<Cell>& cells, const RunOptions& options = {})
{
  struct Job
  {
    std::size_t cell;
    double grid_value;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  std::vector<std::string> hashes;
  for (std::size_t c = 0; c < cells.size(); ++c)
  {
    cells[c].config.validate();
    hashes.push_back(config_hash(cells[c].config));
    const bool seedless = cells[c].config.kind == ExperimentKind::bounds_sweep;
    for (const double g : cells[c].config.grid())
    {
      for (const auto s : cells[c].config.seeds)
      {
        jobs.push_back({c, g, s});
        if (seedless)
        {
          break;
        }
      }
    }
  }

  if (options.results)
  {
    *options.results << result_header() << '\n';
  }
  if (options.traces)
  {
    *options.traces << trace_header() << '\n';
  }

  RunSummary summary;
  std::vector<std::optional<PointOutput>> done(jobs.size());
  std::size_t next_out = 0;
  std::mutex mu;
  std::atomic<std::size_t> next_job{0};

  const auto flush_ready = [&] {
    while (next_out < jobs.size() && done[next_out])
    {
      auto& po = *done[next_out];
      for (auto& r : po.rows)
      {
        r.cell = cells[jobs[next_out].cell].label;
        summary.failed += r.status == "ok" ? 0 : 1;
        if (options.results)
        {
          *options.results << to_csv(r) << '\n';
        }
        if (options.on_row)
        {
          options.on_row(r);
        }
        summary.rows.push_back(r);
      }
      for (auto& t : po.traces)
      {
        t.cell = cells[jobs[next_out].cell].label;
        if (options.traces)
        {
          *options.traces << to_csv(t) << '\n';
        }
        summary.traces.push_back(t);
      }
      if (options.results)
      {
        options.results->flush();
      }
      done[next_out].reset();
      ++next_out;
    }
  };

  const auto worker = [&] {
    while (true)
    {
      const std::size_t i = next_job.fetch_add(1);
      if (i >= jobs.size())
      {
        return;
      }
      const auto& job = jobs[i];
      PointOutput po = run_point(cells[job.cell].config, job.grid_value, job.seed,
                                 hashes[job.cell]);
      std::lock_guard lock(mu);
      done[i] = std::move(po);
      flush_ready();
    }
  };

  const std::size_t threads = std::clamp<std::size_t>(options.threads, 1, std::max<std::size_t>(jobs.size(), 1));
  if (threads == 1)
  {
    worker();
  }
  else
  {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
    {
      pool.emplace_back(worker);
    }
    for (auto& t : pool)
    {
      t.join();
    }
  }
  return summary;
}

inline RunSummary run_experiment(const ExperimentConfig& cfg, const RunOptions& options = {})
{
  return run_cells({{cfg, ""}}, options);
}

/// Cross product of override values applied to a base config. Each cell is
/// labelled "path=value;path=value" with aliases resolved.
inline std::vector<Cell> sweep_cells(const json& base,
                                     const std::vector<std::pair<std::string, std::vector<json>>>& grid)
{
  if (grid.empty())
  {
    throw ConfigError("sweep: parameter grid is empty");
  }
  for (const auto& [path, values] : grid)
  {
    if (values.empty())
    {
      throw ConfigError("sweep: no values for '" + path + "'");
    }
  }
  std::vector<Cell> cells;
  std::vector<std::size_t> index(grid.size(), 0);
  while (true)
  {
    json j = base;
    std::string label;
    for (std::size_t p = 0; p < grid.size(); ++p)
    {
      const auto& value = grid[p].second[index[p]];
      set_path(j, grid[p].first, value);
      label += (p ? ";" : "") + resolve_alias(grid[p].first) + "=" + value.dump();
    }
    cells.push_back({config_from_json(j), label});
    std::size_t p = grid.size();
    while (p > 0)
    {
      --p;
      if (++index[p] < grid[p].second.size())
      {
        break;
      }
      index[p] = 0;
      if (p == 0)
      {
        return cells;
      }
    }
  }
}

/// Parse "a=1,2,3" into a path and its list of values.
inline std::pair<std::string, std::vector<json>> parse_sweep_axis(const std::string& spec)
{
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size())
  {
    throw ConfigError("sweep axis '" + spec + "' must look like path=v1,v2,...");
  }
  std::vector<json> values;
  std::stringstream ss(spec.substr(eq + 1));
  std::string item;
  while (std::getline(ss, item, ','))
  {
    json v = json::parse(item, nullptr, false);
    values.push_back(v.is_discarded() ? json(item) : v);
  }
  return {spec.substr(0, eq), values};
}

/// Mean of `metric` per method and grid value over ok rows.
inline std::map<std::pair<std::string, double>, double> method_means(
    const std::vector<ResultRow>& rows, const std::string& metric = "accuracy")
{
  std::map<std::pair<std::string, double>, std::pair<double, std::size_t>> acc;
  for (const auto& r : rows)
  {
    if (r.status == "ok" && r.metric == metric)
    {
      auto& a = acc[{r.method, r.grid_value}];
      a.first += r.value;
      ++a.second;
    }
  }
  std::map<std::pair<std::string, double>, double> out;
  for (const auto& [k, v] : acc)
  {
    out[k] = v.first / static_cast<double>(v.second);
  }
  return out;
}

}  // namespace metalab::harness
