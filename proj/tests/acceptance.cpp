// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--out DIR] [N ...]
//
// With no numbers every criterion runs. --out writes the experiment CSVs of
// criteria 7-10 into DIR. Exit status is 0 only when every selected criterion
// passes.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "maml_reference.hpp"
#include "metalab/bounds.hpp"
#include "metalab/cluster.hpp"
#include "metalab/entropy.hpp"
#include "metalab/experiment.hpp"
#include "metalab/metalearn.hpp"
#include "metalab/stability.hpp"

using namespace metalab;
namespace fs = std::filesystem;
using harness::json;

namespace
{
struct Verdict
{
  bool pass = false;
  std::string detail;
};

struct Criterion
{
  int id;
  std::string name;
  double limit_seconds;  // 0: no runtime limit
  std::function<Verdict()> run;
};

std::optional<fs::path> out_dir;

std::string format(const char* fmt, auto... args)
{
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

Tensor gaussian(std::size_t rows, std::size_t cols, Rng& rng)
{
  std::vector<double> v(rows * cols);
  for (auto& x : v)
  {
    x = rng.normal();
  }
  return Tensor::matrix(rows, cols, std::move(v));
}

Tensor times(const Tensor& a, const Tensor& b)
{
  ad::NoGradGuard guard;
  return ad::matmul(ad::constant(a), ad::constant(b)).value();
}

Task random_task(std::size_t dim, std::size_t way, std::size_t shot, std::size_t query, Rng& rng)
{
  Task t;
  t.way = way;
  t.support.inputs = gaussian(way * shot, dim, rng);
  t.query.inputs = gaussian(way * query, dim, rng);
  for (std::size_t c = 0; c < way; ++c)
  {
    t.support.labels.insert(t.support.labels.end(), shot, static_cast<int>(c));
    t.query.labels.insert(t.query.labels.end(), query, static_cast<int>(c));
  }
  return t;
}

// ---------------------------------------------------------------------------
// 1. Label corruption against the expected-correct count

Verdict label_budget()
{
  const std::size_t m = 10000;
  const std::size_t c = 10;
  std::vector<int> labels(m);
  for (std::size_t i = 0; i < m; ++i)
  {
    labels[i] = static_cast<int>(i % c);
  }
  const double full = static_cast<double>(m) * std::log(static_cast<double>(c));
  bool pass = true;
  std::string per_seed;
  double worst_z = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed)
  {
    int inside = 0;
    for (const double q : {0.0, 0.25, 0.5, 0.75, 1.0})
    {
      const entropy::EntropyBudget budget{m, c, q * full};
      const double expected = entropy::expected_correct(budget);
      // Closed form m e^{H/m} / C, computed here without the library.
      const double oracle = std::min(static_cast<double>(m),
                                     static_cast<double>(m) * std::exp(q * full / m) / c);
      if (std::abs(expected - oracle) > 1e-9 * static_cast<double>(m))
      {
        return {false, format("expected_correct %.6f disagrees with closed form %.6f at H=%.2f mlnC",
                              expected, oracle, q)};
      }
      const auto noisy = entropy::corrupt_labels(labels, budget, seed * 1000 + 17);
      std::size_t correct = 0;
      for (std::size_t i = 0; i < m; ++i)
      {
        correct += noisy[i] == labels[i];
      }
      const double p = expected / static_cast<double>(m);
      const double sigma = std::sqrt(static_cast<double>(m) * p * (1.0 - p));
      const double diff = std::abs(static_cast<double>(correct) - expected);
      if (diff <= 3.0 * sigma)
      {
        ++inside;
      }
      if (sigma > 0.0)
      {
        worst_z = std::max(worst_z, diff / sigma);
      }
    }
    per_seed += std::to_string(inside);
    pass = pass && inside >= 4;
  }
  return {pass, "within-3sigma per seed " + per_seed + "/5 each, worst |z| " +
                    format("%.2f", worst_z)};
}

// ---------------------------------------------------------------------------
// 2. Corollary regime

Verdict corollary_regime()
{
  const auto worked = bounds::corollary_check(1628, 5, 2);
  if (!worked.holds || worked.lhs != 50)
  {
    return {false, format("corollary_check(1628,5,2): holds=%d lhs=%lld", worked.holds, worked.lhs)};
  }
  Rng rng(2024);
  int agree = 0;
  int held = 0;
  for (int i = 0; i < 1000; ++i)
  {
    const long long c2 = 1 + static_cast<long long>(rng.index(40));
    const long long k = 1 + static_cast<long long>(rng.index(20));
    // Half the triples straddle the boundary C1 = C2^2 k.
    const long long c1 = i % 2 == 0
                             ? std::max(1LL, c2 * c2 * k + static_cast<long long>(rng.index(5)) - 2)
                             : 1 + static_cast<long long>(rng.index(20000));
    const bool holds = bounds::corollary_check(c1, c2, k).holds;
    const bool tighter = bounds::dominant_term_ratio(c1, c2, k) < 1.0;
    agree += holds == tighter;
    held += holds;
  }
  return {agree == 1000, format("worked example lhs=50 holds; agreement %d/1000 (%d in regime)",
                                agree, held)};
}

// ---------------------------------------------------------------------------
// 3. Bounds at full supervision

Verdict bound_reduction()
{
  const std::vector<double> ms{500, 2000, 10000, 60000, 250000};
  const std::vector<std::array<double, 3>> shapes{{10, 5, 1},  {40, 5, 2},  {100, 2, 1},
                                                  {1628, 5, 2}, {64, 8, 3}, {25, 5, 1},
                                                  {200, 10, 5}, {12, 3, 4}, {500, 20, 1},
                                                  {3, 2, 10}};
  double worst = 0.0;
  int points = 0;
  for (std::size_t i = 0; i < ms.size(); ++i)
  {
    for (std::size_t j = 0; j < shapes.size(); ++j)
    {
      bounds::BoundInputs in;
      in.m = ms[i];
      in.c1 = shapes[j][0];
      in.c2 = shapes[j][1];
      in.k = shapes[j][2];
      in.delta = 0.001 + 0.02 * static_cast<double>((i + j) % 5);
      in.loss_bound = 0.5 + static_cast<double>(j % 3);
      in = bounds::with_default_stability(in, 0.05 + 0.05 * static_cast<double>(i));
      const double log_term = std::log(1.0 / in.delta);
      const double n = in.m / (in.k * in.c2);

      bounds::BoundInputs w = in;
      w.entropy = in.m * std::log(in.c1);
      const double wct_conv = 2.0 * in.beta + (4.0 * in.m * in.beta + in.loss_bound) *
                                                  std::sqrt(log_term / (2.0 * in.m));
      worst = std::max(worst, std::abs(bounds::wct_bound(w) - wct_conv));

      bounds::BoundInputs t = in;
      t.entropy = in.m * std::log(in.c2);
      const double meta_conv = 2.0 * in.beta + 2.0 * in.beta_tilde +
                               (4.0 * n * in.beta_tilde + in.loss_bound) *
                                   std::sqrt(log_term / (2.0 * n));
      worst = std::max(worst, std::abs(bounds::meta_bound(t) - meta_conv));
      ++points;
    }
  }
  return {worst <= 1e-12 && points == 50, format("%d points, worst |diff| %.3g", points, worst)};
}

// ---------------------------------------------------------------------------
// 4. Outer gradient against central finite differences

std::vector<Tensor> outer_grad(const ModelParams& p, const Task& task, const HeadView& view,
                               const TrainConfig& config, std::size_t steps)
{
  const auto leaves = as_parameters(p);
  const auto loss = meta_objective(p.arch, leaves, task, view, config, steps);
  std::vector<Tensor> out;
  for (const auto& g : ad::grad(loss, leaves))
  {
    out.push_back(g.value());
  }
  return out;
}

double objective_value(const ModelParams& p, const Task& task, const HeadView& view,
                       const TrainConfig& config, std::size_t steps)
{
  return meta_objective(p.arch, as_parameters(p), task, view, config, steps).value().item();
}

Verdict gradient_check()
{
  Rng rng(404);
  double worst = 0.0;
  std::size_t largest = 0;
  bool zero_step_equal = true;
  int models = 0;
  while (models < 20)
  {
    const std::size_t dim = 2 + rng.index(5);
    std::vector<std::size_t> dims{dim, 3 + rng.index(8)};
    if (rng.uniform() < 0.4)
    {
      dims.push_back(3 + rng.index(6));
    }
    const std::size_t groups = 1 + rng.index(2);
    const std::size_t c_max = 2 + rng.index(3);
    auto p = init_model(dims, groups, c_max, 500 + static_cast<std::uint64_t>(models));
    // Zero biases put ReLU pre-activations exactly on the kink, where central
    // differences are not derivatives.
    for (std::size_t l = 0; l < p.arch.num_layers(); ++l)
    {
      for (auto& v : p.bias(l).data())
      {
        v = rng.normal(0.0, 0.1);
      }
    }
    std::size_t count = 0;
    for (const auto& t : p.tensors)
    {
      count += t.size();
    }
    if (count > 300)
    {
      continue;
    }
    largest = std::max(largest, count);
    const std::size_t way = 2 + rng.index(c_max - 1);
    const Task task = random_task(dim, way, 2, 3, rng);
    const HeadView view{rng.index(groups), way};
    TrainConfig config;
    config.alpha = rng.uniform(0.1, 0.5);
    const std::size_t steps = 1 + rng.index(3);

    const auto analytic = outer_grad(p, task, view, config, steps);
    const double h = 1e-5;
    auto probe = p;
    for (std::size_t j = 0; j < p.tensors.size(); ++j)
    {
      for (std::size_t e = 0; e < p.tensors[j].size(); ++e)
      {
        const double original = p.tensors[j][e];
        probe.tensors[j][e] = original + h;
        const double up = objective_value(probe, task, view, config, steps);
        probe.tensors[j][e] = original - h;
        const double down = objective_value(probe, task, view, config, steps);
        probe.tensors[j][e] = original;
        const double fd = (up - down) / (2.0 * h);
        const double a = analytic[j][e];
        worst = std::max(worst, std::abs(a - fd) / (std::max(std::abs(a), std::abs(fd)) + 1e-12));
      }
    }

    TrainConfig first = config;
    first.mode = AdaptMode::first_order;
    const auto so = outer_grad(p, task, view, config, 0);
    const auto fo = outer_grad(p, task, view, first, 0);
    for (std::size_t j = 0; j < so.size(); ++j)
    {
      zero_step_equal = zero_step_equal && so[j] == fo[j];
    }
    ++models;
  }
  return {worst < 1e-4 && zero_step_equal,
          format("20 models (max %zu params), worst rel err %.3g; FO==SO at 0 steps: %s", largest,
                 worst, zero_step_equal ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 5. DBSCAN against a cubic density-reachability oracle

Verdict dbscan_oracle()
{
  Rng rng(55);
  int matched = 0;
  std::string first_miss;
  for (int trial = 0; trial < 100; ++trial)
  {
    const std::size_t n = 1 + rng.index(64);
    const std::size_t dim = 1 + rng.index(3);
    std::vector<double> v(n * dim);
    for (auto& x : v)
    {
      x = rng.uniform(0.0, 4.0);
    }
    const Tensor pts = Tensor::matrix(n, dim, std::move(v));
    const cluster::DbscanParams params{rng.uniform(0.3, 1.5), 1 + rng.index(6)};
    const auto got = cluster::dbscan(pts, params);

    std::vector<std::vector<bool>> adj(n, std::vector<bool>(n));
    for (std::size_t i = 0; i < n; ++i)
    {
      for (std::size_t j = 0; j < n; ++j)
      {
        double d2 = 0.0;
        for (std::size_t k = 0; k < dim; ++k)
        {
          const double d = pts.at(i, k) - pts.at(j, k);
          d2 += d * d;
        }
        adj[i][j] = d2 <= params.eps * params.eps;
      }
    }
    std::vector<bool> core(n);
    for (std::size_t i = 0; i < n; ++i)
    {
      core[i] = static_cast<std::size_t>(std::count(adj[i].begin(), adj[i].end(), true)) >=
                params.min_samples;
    }
    auto reach = adj;
    for (std::size_t i = 0; i < n; ++i)
    {
      for (std::size_t j = 0; j < n; ++j)
      {
        reach[i][j] = core[i] && core[j] && adj[i][j];
      }
    }
    for (std::size_t k = 0; k < n; ++k)
    {
      for (std::size_t i = 0; i < n; ++i)
      {
        for (std::size_t j = 0; j < n; ++j)
        {
          reach[i][j] = reach[i][j] || (reach[i][k] && reach[k][j]);
        }
      }
    }

    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i)
    {
      bool near_core = false;
      bool label_from_neighbour = false;
      for (std::size_t j = 0; j < n; ++j)
      {
        if (core[j] && adj[i][j])
        {
          near_core = true;
          label_from_neighbour = label_from_neighbour || got.labels[i] == got.labels[j];
        }
        if (core[i] && core[j] && (got.labels[i] == got.labels[j]) != reach[i][j])
        {
          ok = false;
        }
      }
      ok = ok && got.core_mask[i] == core[i];
      ok = ok && (got.labels[i] == cluster::kNoise) == !near_core;
      ok = ok && (!near_core || label_from_neighbour);
    }
    if (ok)
    {
      ++matched;
    }
    else if (first_miss.empty())
    {
      first_miss = ", first mismatch at trial " + std::to_string(trial);
    }
  }
  return {matched == 100, format("%d/100 instances match", matched) + first_miss};
}

// ---------------------------------------------------------------------------
// 6. SVCCA properties

Verdict svcca_suite()
{
  Rng rng(66);
  bool self_ok = true;
  for (int trial = 0; trial < 5; ++trial)
  {
    const Tensor x = gaussian(200, 3 + rng.index(8), rng);
    self_ok = self_ok && stability::svcca(x, x, 1.0) == 1.0 && stability::svcca(x, x, 0.99) == 1.0;
  }
  double invariance = 0.0;
  for (int trial = 0; trial < 10; ++trial)
  {
    const std::size_t d = 2 + rng.index(8);
    const Tensor x = gaussian(300, d, rng);
    const Tensor a = gaussian(d, d, rng);
    invariance = std::max(invariance, std::abs(stability::svcca(x, times(x, a), 1.0) - 1.0));
  }
  double asymmetry = 0.0;
  for (int trial = 0; trial < 20; ++trial)
  {
    const Tensor x = gaussian(150, 5, rng);
    Tensor y = gaussian(150, 7, rng);
    for (std::size_t i = 0; i < y.size(); ++i)
    {
      y[i] += 0.5 * x[i % x.size()];
    }
    asymmetry = std::max(asymmetry, std::abs(stability::svcca(x, y) - stability::svcca(y, x)));
  }
  std::vector<double> null;
  for (int trial = 0; trial < 50; ++trial)
  {
    null.push_back(stability::svcca(gaussian(1000, 10, rng), gaussian(1000, 10, rng)));
  }
  double mean = 0.0;
  for (const double v : null)
  {
    mean += v / static_cast<double>(null.size());
  }
  double var = 0.0;
  for (const double v : null)
  {
    var += (v - mean) * (v - mean) / static_cast<double>(null.size() - 1);
  }
  const double upper = mean + 3.0 * std::sqrt(var);
  const double peak = *std::max_element(null.begin(), null.end());
  const bool pass = self_ok && invariance <= 1e-9 && asymmetry <= 1e-9 && upper < 0.25;
  return {pass, format("self=1: %s; invariance %.2g; asymmetry %.2g; null mean+3sd %.4f (max %.4f)",
                       self_ok ? "yes" : "no", invariance, asymmetry, upper, peak)};
}

// ---------------------------------------------------------------------------
// Experiments

harness::RunSummary run(const std::string& name, const json& spec, std::size_t threads)
{
  const auto cfg = harness::config_from_json(spec);
  harness::RunOptions options;
  options.threads = threads;
  std::ofstream results;
  std::ofstream traces;
  if (out_dir)
  {
    fs::create_directories(*out_dir);
    results.open(*out_dir / (name + ".csv"));
    options.results = &results;
    if (cfg.trace.enabled)
    {
      traces.open(*out_dir / (name + ".trace.csv"));
      options.traces = &traces;
    }
  }
  return harness::run_experiment(cfg, options);
}

std::size_t threads_from_env() { return harness::thread_count_from_env(); }

std::string failures(const harness::RunSummary& s)
{
  for (const auto& r : s.rows)
  {
    if (r.status != "ok")
    {
      return format("%zu failed rows, first: %s seed %llu: %s", s.failed, r.method.c_str(),
                    static_cast<unsigned long long>(r.seed), r.message.c_str());
    }
  }
  return {};
}

double mean_of(const harness::RunSummary& s, const std::string& method, double grid)
{
  const auto means = harness::method_means(s.rows);
  const auto it = means.find({method, grid});
  return it == means.end() ? std::nan("") : it->second;
}

// 7. Noise robustness

const json noise_spec = {{"kind", "noise_table"},
                         {"noise_levels", {0.0, 0.3}},
                         {"seeds", {1, 2, 3, 4, 5}},
                         {"methods", {"meta", "wct"}}};

Verdict noise_robustness()
{
  const auto s = run("noise_robustness", noise_spec, threads_from_env());
  if (s.failed > 0)
  {
    return {false, failures(s)};
  }
  const double clean = mean_of(s, "meta", 0.0) - mean_of(s, "wct", 0.0);
  const double noisy = mean_of(s, "meta", 0.3) - mean_of(s, "wct", 0.3);
  return {noisy >= 0.05 && std::abs(clean) <= 0.03,
          format("gap at 30%% noise %+.2f pts (need >= +5), at 0%% %+.2f pts (need within 3)",
                 100.0 * noisy, 100.0 * clean)};
}

// 8. Accuracy across the entropy grid

const json entropy_spec = {{"kind", "entropy_curve"},
                           {"dataset", {{"num_classes", 80}}},
                           {"seeds", {1, 2, 3, 4, 5}},
                           {"methods", {"meta", "wct"}}};

Verdict entropy_efficiency()
{
  const auto s = run("entropy_efficiency", entropy_spec, threads_from_env());
  std::map<std::pair<double, std::uint64_t>, std::map<std::string, double>> acc;
  for (const auto& r : s.rows)
  {
    acc[{r.grid_value, r.seed}][r.method] = r.status == "ok" ? r.value : std::nan("");
  }
  std::map<double, int> wins;
  for (const auto& [key, m] : acc)
  {
    if (key.first < 1.0)
    {
      wins[key.first] += m.at("meta") >= m.at("wct");
    }
  }
  bool pass = !wins.empty();
  std::string tally;
  for (const auto& [grid, w] : wins)
  {
    tally += format(" %.3f:%d", grid, w);
    pass = pass && w >= 3;
  }
  std::string detail = "seeds with meta >= wct per H fraction" + tally;
  if (s.failed > 0)
  {
    detail += "; " + failures(s);
  }
  return {pass, detail};
}

// 9. Per-layer stability traces

const json trace_spec = {{"kind", "noise_table"},
                         {"noise_levels", {0.0, 0.15}},
                         {"seeds", {1, 2, 3, 4, 5}},
                         {"methods", {"meta", "wct"}},
                         {"trace", {{"enabled", true}, {"every", 5}}}};

struct CachedRun
{
  harness::RunSummary summary;
  std::size_t threads;
};
std::optional<CachedRun> trace_run;

Verdict stability_traces()
{
  const std::size_t threads = threads_from_env();
  trace_run = CachedRun{run("stability_traces", trace_spec, threads), threads};
  const auto& s = trace_run->summary;
  if (s.failed > 0)
  {
    return {false, failures(s)};
  }
  const auto cfg = harness::config_from_json(trace_spec);
  // method, seed, noise, layer -> (sum, count)
  std::map<std::tuple<std::string, std::uint64_t, double, std::size_t>, std::pair<double, int>> acc;
  std::size_t head = 0;
  for (const auto& t : s.traces)
  {
    const std::size_t total = t.method == "wct" ? cfg.wct.epochs : cfg.trainer.epochs;
    if (2 * t.epoch < total)
    {
      continue;
    }
    auto& a = acc[{t.method, t.seed, t.grid_value, t.layer}];
    a.first += t.rs;
    ++a.second;
    head = std::max(head, t.layer);
  }
  const auto mean = [&](const std::string& m, std::uint64_t seed, double noise, std::size_t layer) {
    const auto it = acc.find({m, seed, noise, layer});
    return it == acc.end() ? std::nan("") : it->second.first / it->second.second;
  };
  int good = 0;
  std::string per_seed;
  for (const auto seed : cfg.seeds)
  {
    bool ok = head > 0;
    for (std::size_t l = 0; l < head; ++l)
    {
      ok = ok && mean("meta", seed, 0.15, head) < mean("meta", seed, 0.15, l);
    }
    for (std::size_t l = 0; l <= head; ++l)
    {
      ok = ok && mean("wct", seed, 0.15, l) < mean("wct", seed, 0.0, l);
    }
    good += ok;
    per_seed += ok ? "+" : "-";
  }
  return {good >= 4, format("%d/5 seeds show both orderings (%s)", good, per_seed.c_str())};
}

// 10. Unsupervised ablation

Verdict ablation_direction()
{
  const json spec = {{"kind", "ablation"}, {"seeds", {1, 2, 3, 4, 5}}};
  const auto s = run("ablation", spec, threads_from_env());
  const double noise = harness::config_from_json(spec).noise_levels.front();
  const double full = mean_of(s, "full", noise);
  int at_least = 0;
  int strictly = 0;
  std::string detail = format("full %.4f", full);
  for (const auto* m : {"kmeans", "wct", "no_scaler"})
  {
    const double v = mean_of(s, m, noise);
    at_least += full >= v;
    strictly += full > v;
    detail += format(", %s %.4f", m, v);
  }
  if (s.failed > 0)
  {
    detail += "; " + failures(s);
  }
  return {s.failed == 0 && at_least == 3 && strictly >= 2, detail};
}

// ---------------------------------------------------------------------------
// 11. Hand-written MAML gradient

maml_ref::Mat to_eigen(const Tensor& t)
{
  maml_ref::Mat m(t.rows(), t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r)
  {
    for (std::size_t c = 0; c < t.cols(); ++c)
    {
      m(r, c) = t.at(r, c);
    }
  }
  return m;
}

Verdict maml_equivalence()
{
  Rng rng(111);
  const std::size_t dim = 4;
  const std::size_t way = 3;
  double worst = 0.0;
  for (int steps = 1; steps <= 3; ++steps)
  {
    auto p = init_model({dim}, 1, way, 70 + static_cast<std::uint64_t>(steps));
    for (auto& v : p.bias(0).data())
    {
      v = rng.normal(0.0, 0.1);
    }
    const Task t = random_task(dim, way, 2, 3, rng);
    TrainConfig c;
    c.alpha = 0.4;
    c.inner_steps = static_cast<std::size_t>(steps);
    c.scaler_enabled = false;
    c.random_groups = false;
    c.permute_labels = false;
    const auto ours = outer_gradient(p, std::vector<Task>{t}, std::vector<HeadView>{{0, way}}, c);
    const auto ref = maml_ref::maml_gradient({to_eigen(p.weight(0)), to_eigen(p.bias(0))},
                                             to_eigen(t.support.inputs), t.support.labels,
                                             to_eigen(t.query.inputs), t.query.labels, c.alpha,
                                             steps);
    worst = std::max(worst, (to_eigen(ours[0]) - ref.w).cwiseAbs().maxCoeff());
    worst = std::max(worst, (to_eigen(ours[1]) - ref.b).cwiseAbs().maxCoeff());
  }
  return {worst <= 1e-10, format("1-3 inner steps, worst |diff| %.3g", worst)};
}

// ---------------------------------------------------------------------------
// 12. Bitwise reproducibility

Verdict determinism()
{
  json spec = trace_spec;
  spec["seeds"] = {1};
  const auto first_seed = [](const harness::RunSummary& s) {
    harness::RunSummary out;
    for (const auto& r : s.rows)
    {
      if (r.seed == 1) out.rows.push_back(r);
    }
    for (const auto& t : s.traces)
    {
      if (t.seed == 1) out.traces.push_back(t);
    }
    return out;
  };
  const auto reference = trace_run && trace_run->threads == 1
                             ? first_seed(trace_run->summary)
                             : run("determinism_a", spec, 1);
  const auto again = run("determinism_b", spec, 1);
  const auto same = [](double a, double b) {
    return std::memcmp(&a, &b, sizeof a) == 0;
  };
  bool equal = reference.rows.size() == again.rows.size() &&
               reference.traces.size() == again.traces.size() && !again.rows.empty();
  for (std::size_t i = 0; equal && i < again.rows.size(); ++i)
  {
    const auto& a = reference.rows[i];
    const auto& b = again.rows[i];
    equal = a.method == b.method && a.grid_value == b.grid_value && a.metric == b.metric &&
            same(a.value, b.value) && same(a.ci95, b.ci95) && a.samples == b.samples &&
            a.status == b.status;
  }
  for (std::size_t i = 0; equal && i < again.traces.size(); ++i)
  {
    const auto& a = reference.traces[i];
    const auto& b = again.traces[i];
    equal = a.layer == b.layer && a.epoch == b.epoch && same(a.rs, b.rs);
  }
  return {equal, format("%zu metric rows and %zu trace rows re-run single-threaded: %s",
                        again.rows.size(), again.traces.size(), equal ? "identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv)
{
  std::set<int> selected;
  for (int i = 1; i < argc; ++i)
  {
    const std::string arg = argv[i];
    if (arg == "--out" && i + 1 < argc)
    {
      out_dir = argv[++i];
    }
    else
    {
      try
      {
        selected.insert(std::stoi(arg));
      }
      catch (const std::exception&)
      {
        std::fprintf(stderr, "usage: acceptance [--out DIR] [criterion ...]\n");
        return 2;
      }
    }
  }

  const std::vector<Criterion> criteria{
      {1, "label-budget Monte Carlo", 5, label_budget},
      {2, "corollary regime", 1, corollary_regime},
      {3, "bound reduction", 1, bound_reduction},
      {4, "second-order gradient", 30, gradient_check},
      {5, "DBSCAN oracle", 10, dbscan_oracle},
      {6, "SVCCA invariances", 30, svcca_suite},
      {7, "noise robustness", 600, noise_robustness},
      {8, "entropy efficiency", 900, entropy_efficiency},
      {9, "stability traces", 600, stability_traces},
      {10, "ablation direction", 1200, ablation_direction},
      {11, "MAML equivalence", 5, maml_equivalence},
      {12, "determinism", 0, determinism},
  };

  int failed = 0;
  for (const auto& c : criteria)
  {
    if (!selected.empty() && !selected.count(c.id))
    {
      continue;
    }
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try
    {
      v = c.run();
    }
    catch (const std::exception& e)
    {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::string timing = format("%.1fs", seconds);
    if (c.limit_seconds > 0.0)
    {
      timing += format(" < %.0fs", c.limit_seconds);
      if (seconds >= c.limit_seconds)
      {
        v.pass = false;
        timing += " EXCEEDED";
      }
    }
    failed += !v.pass;
    std::printf("%s %2d %-26s %s [%s]\n", v.pass ? "PASS" : "FAIL", c.id, c.name.c_str(),
                v.detail.c_str(), timing.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
