#include <gtest/gtest.h>

#include <cstdlib>
#include <numeric>
#include <set>
#include <sstream>

#include "metalab/experiment.hpp"

using namespace metalab;
using namespace metalab::harness;

namespace
{
/// A few seconds per run: short training, few episodes.
json tiny(const std::string& kind)
{
  return {{"kind", kind},
          {"seeds", {1, 2}},
          {"trainer", {{"epochs", 6}}},
          {"wct", {{"epochs", 3}}},
          {"episodes", {{"count", 10}}},
          {"dataset", {{"per_class", 20}}}};
}

std::vector<double> values(const RunSummary& s)
{
  std::vector<double> v;
  for (const auto& r : s.rows)
  {
    v.push_back(r.value);
    v.push_back(r.ci95);
  }
  return v;
}
}  // namespace

TEST(Config, DefaultsAndKindSpecificMethods)
{
  const auto c = config_from_json({{"kind", "noise_table"}});
  EXPECT_EQ(c.methods, (std::vector<std::string>{"meta", "wct"}));
  EXPECT_EQ(c.trainer.mode, AdaptMode::second_order);
  const auto a = config_from_json({{"kind", "ablation"}});
  EXPECT_EQ(a.methods, (std::vector<std::string>{"full", "kmeans", "wct", "no_scaler"}));
  const auto e = config_from_json({{"kind", "entropy_curve"}});
  EXPECT_EQ(e.grid().size(), 8u);
  EXPECT_EQ(e.grid().front(), 0.0);
  EXPECT_EQ(e.grid().back(), 1.0);
  EXPECT_EQ(e.grid_key(), "entropy_fraction");
}

TEST(Config, RejectsInvalidInput)
{
  EXPECT_THROW(config_from_json(json::object()), ConfigError);
  EXPECT_THROW(config_from_json({{"kind", "nope"}}), ConfigError);
  EXPECT_THROW(config_from_json({{"kind", "noise_table"}, {"extra", 1}}), ConfigError);
  EXPECT_THROW(config_from_json({{"kind", "noise_table"}, {"trainer", {{"alhpa", 1}}}}),
               ConfigError);
  EXPECT_THROW(config_from_json({{"kind", "noise_table"}, {"seeds", json::array()}}), ConfigError);
  EXPECT_THROW(config_from_json({{"kind", "noise_table"}, {"noise_levels", json::array()}}),
               ConfigError);
  EXPECT_THROW(config_from_json({{"kind", "noise_table"}, {"methods", {"full"}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"kind", "noise_table"}, {"trainer", {{"alpha", "x"}}}}),
               ConfigError);
  EXPECT_THROW(config_from_json({{"kind", "noise_table"}, {"trainer", {{"mode", "third"}}}}),
               ConfigError);
  EXPECT_THROW(config_from_json({{"kind", "noise_table"}, {"trainer", {{"inner_steps", 0}}}}),
               ConfigError);
  EXPECT_THROW(config_from_json({{"kind", "noise_table"}, {"episodes", {{"way", 9}}}}),
               ConfigError);
  EXPECT_THROW(config_from_json({{"kind", "ablation"}, {"dbscan", {{"eps", 0}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"kind", "bounds_sweep"}, {"bounds", {{"c2", 0}}}}), ConfigError);
}

TEST(Config, JsonRoundTripPreservesHash)
{
  auto c = config_from_json({{"kind", "heterogeneous"},
                             {"trainer", {{"mode", "head_only"}, {"alpha", 0.125}}},
                             {"tasks", {{"min_way", 2}}},
                             {"bounds", {{"n", 40}}}});
  const auto again = config_from_json(to_json(c));
  EXPECT_EQ(config_hash(c), config_hash(again));
  EXPECT_EQ(to_json(c), to_json(again));
  c.trainer.alpha = 0.25;
  EXPECT_NE(config_hash(c), config_hash(again));
  EXPECT_EQ(config_hash(again).size(), 16u);
}

TEST(Overrides, DottedPathsAndAliases)
{
  json j = {{"kind", "ablation"}};
  apply_override(j, "trainer.alpha=0.5");
  apply_override(j, "eps=2.5");
  apply_override(j, "min_samples=7");
  apply_override(j, "C2=3");
  apply_override(j, "k=2");
  apply_override(j, "unsupervised.embedding=body");
  apply_override(j, "methods=[\"full\"]");
  const auto c = config_from_json(j);
  EXPECT_EQ(c.trainer.alpha, 0.5);
  EXPECT_EQ(c.dbscan.eps, 2.5);
  EXPECT_EQ(c.dbscan.min_samples, 7u);
  EXPECT_EQ(c.tasks.way, 3u);
  EXPECT_EQ(c.tasks.shot, 2u);
  EXPECT_EQ(c.unsupervised.embedding, "body");
  EXPECT_EQ(c.methods, std::vector<std::string>{"full"});

  EXPECT_THROW(apply_override(j, "noequals"), ConfigError);
  EXPECT_THROW(apply_override(j, "=3"), ConfigError);
  EXPECT_THROW(apply_override(j, "trainer..alpha=1"), ConfigError);
  EXPECT_THROW(apply_override(j, "trainer.alpha.x=1"), ConfigError);
  apply_override(j, "trainer.nonsense=1");
  EXPECT_THROW(config_from_json(j), ConfigError);
}

TEST(Overrides, SweepAxisParsing)
{
  const auto [path, vals] = parse_sweep_axis("eps=0.5,1,abc");
  EXPECT_EQ(path, "eps");
  ASSERT_EQ(vals.size(), 3u);
  EXPECT_EQ(vals[0], json(0.5));
  EXPECT_EQ(vals[2], json("abc"));
  EXPECT_THROW(parse_sweep_axis("eps="), ConfigError);
  EXPECT_THROW(parse_sweep_axis("eps"), ConfigError);
}

TEST(Sweep, CrossProductLabels)
{
  const auto cells = sweep_cells({{"kind", "ablation"}},
                                 {{"eps", {1.0, 2.0, 3.0}}, {"min_samples", {3, 5}}});
  ASSERT_EQ(cells.size(), 6u);
  EXPECT_EQ(cells[0].label, "dbscan.eps=1.0;dbscan.min_samples=3");
  EXPECT_EQ(cells[5].label, "dbscan.eps=3.0;dbscan.min_samples=5");
  EXPECT_EQ(cells[3].config.dbscan.eps, 2.0);
  EXPECT_EQ(cells[3].config.dbscan.min_samples, 5u);
  EXPECT_THROW(sweep_cells({{"kind", "ablation"}}, {}), ConfigError);
  EXPECT_THROW(sweep_cells({{"kind", "ablation"}}, {{"eps", {}}}), ConfigError);
}

TEST(Sweep, SingleCellMatchesPlainRun)
{
  json base = tiny("noise_table");
  base["seeds"] = {3};
  const auto plain = run_experiment(config_from_json(base));
  const auto cells = sweep_cells(base, {{"trainer.alpha", {0.3}}});
  const auto swept = run_cells(cells);
  ASSERT_EQ(plain.rows.size(), swept.rows.size());
  EXPECT_EQ(values(plain), values(swept));
  EXPECT_EQ(plain.rows[0].config_hash, swept.rows[0].config_hash);
}

TEST(RunExperiment, RowLayoutAndDeterminism)
{
  json j = tiny("noise_table");
  j["noise_levels"] = {0.0, 0.15, 0.3};
  j["methods"] = {"wct", "maml"};
  const auto cfg = config_from_json(j);
  std::ostringstream csv1, csv2;
  const auto a = run_experiment(cfg, {1, &csv1, nullptr, {}});
  ASSERT_EQ(a.rows.size(), 6u * cfg.seeds.size());
  EXPECT_EQ(a.failed, 0u);
  EXPECT_EQ(a.exit_code(), 0);
  std::set<std::string> methods;
  for (const auto& r : a.rows)
  {
    EXPECT_EQ(r.status, "ok");
    EXPECT_EQ(r.samples, 10u);
    EXPECT_EQ(r.config_hash, config_hash(cfg));
    EXPECT_GE(r.value, 0.0);
    EXPECT_LE(r.value, 1.0);
    methods.insert(r.method);
  }
  EXPECT_EQ(methods, (std::set<std::string>{"wct", "maml"}));

  const auto b = run_experiment(cfg, {3, &csv2, nullptr, {}});
  EXPECT_EQ(values(a), values(b));
  // Identical apart from wall-clock time.
  const auto strip = [](const std::string& text) {
    std::istringstream in(text);
    std::string line, out;
    while (std::getline(in, line))
    {
      std::vector<std::string> f;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ','))
      {
        f.push_back(cell);
      }
      f[10] = "";
      for (const auto& x : f)
      {
        out += x + ",";
      }
      out += "\n";
    }
    return out;
  };
  EXPECT_EQ(strip(csv1.str()), strip(csv2.str()));
  EXPECT_EQ(csv1.str().substr(0, csv1.str().find('\n')), result_header());
}

TEST(RunExperiment, FullEntropyMatchesCleanLabels)
{
  json e = tiny("entropy_curve");
  e["entropy_grid"] = {1.0};
  json n = tiny("noise_table");
  n["noise_levels"] = {0.0};
  EXPECT_EQ(values(run_experiment(config_from_json(e))),
            values(run_experiment(config_from_json(n))));
}

TEST(RunExperiment, EveryKindRuns)
{
  for (const std::string kind : {"heterogeneous", "ablation", "sensitivity_sweep"})
  {
    json j = tiny(kind);
    j["seeds"] = {1};
    if (kind == "heterogeneous")
    {
      j["tasks"] = {{"min_way", 2}};
      j["model"] = {{"num_groups", 3}};
      j["methods"] = {"meta", "maml", "multitask", "wct"};
    }
    const auto s = run_experiment(config_from_json(j));
    EXPECT_EQ(s.failed, 0u) << kind << ": " << (s.rows.empty() ? "" : s.rows[0].message);
    EXPECT_FALSE(s.rows.empty());
  }
}

TEST(RunExperiment, BodyEmbeddingRuns)
{
  json j = tiny("sensitivity_sweep");
  j["seeds"] = {1};
  j["unsupervised"] = {{"embedding", "body"}};
  j["dbscan"] = {{"eps", 0.6}, {"min_samples", 3}};
  const auto s = run_experiment(config_from_json(j));
  ASSERT_EQ(s.rows.size(), 1u);
  EXPECT_EQ(s.rows[0].status, "ok") << s.rows[0].message;
}

TEST(RunExperiment, EpsSweepExtremesFailMiddleSucceeds)
{
  json base = tiny("sensitivity_sweep");
  base["seeds"] = {1};
  base["unsupervised"] = {{"max_retries", 10}};
  const auto s = run_cells(sweep_cells(base, {{"eps", {0.04, 4.0, 400.0}}}));
  ASSERT_EQ(s.rows.size(), 3u);
  EXPECT_EQ(s.rows[0].status, "failed");
  EXPECT_NE(s.rows[0].message.find("clusters"), std::string::npos);
  EXPECT_EQ(s.rows[1].status, "ok");
  EXPECT_EQ(s.rows[2].status, "failed");
  EXPECT_TRUE(std::isnan(s.rows[0].value));
  EXPECT_EQ(s.exit_code(), 1);
  EXPECT_FALSE(s.all_failed());
}

TEST(RunExperiment, SetupFailureFailsEveryMethod)
{
  json j = tiny("noise_table");
  j["seeds"] = {1};
  // 40 classes cannot be packed 50 apart in a small ball in 2 dimensions.
  j["dataset"] = {{"dim", 2}, {"informative_dim", 0}, {"separation", 50.0}, {"radius", 0.6}};
  j["model"] = {{"hidden", {8}}};
  const auto s = run_experiment(config_from_json(j));
  ASSERT_EQ(s.rows.size(), 2u);
  EXPECT_TRUE(s.all_failed());
  EXPECT_NE(s.rows[0].message.find("centroids"), std::string::npos);
}

TEST(RunExperiment, TracesCoverEveryLayer)
{
  json j = tiny("noise_table");
  j["seeds"] = {1};
  j["trace"] = {{"enabled", true}, {"every", 2}, {"probe_size", 50}};
  std::ostringstream traces;
  const auto s = run_experiment(config_from_json(j), {1, nullptr, &traces, {}});
  // 3 layers; meta records at steps 1,3,5 and wct at step 1.
  std::set<std::size_t> layers;
  std::size_t meta = 0, wct = 0;
  for (const auto& t : s.traces)
  {
    layers.insert(t.layer);
    (t.method == "meta" ? meta : wct) += 1;
    EXPECT_GE(t.rs, 0.0);
    EXPECT_LE(t.rs, 1.0);
  }
  EXPECT_EQ(layers, (std::set<std::size_t>{0, 1, 2}));
  EXPECT_EQ(meta, 9u);
  EXPECT_EQ(wct, 3u);
  EXPECT_EQ(traces.str().substr(0, traces.str().find('\n')), trace_header());
}

TEST(RunExperiment, BoundsSweepRows)
{
  json j = {{"kind", "bounds_sweep"}, {"entropy_grid", {0.0, 0.5, 1.0}}, {"seeds", {4, 5}}};
  const auto s = run_experiment(config_from_json(j));
  ASSERT_EQ(s.rows.size(), 12u);
  const auto means = method_means(s.rows, "ratio");
  ASSERT_EQ(means.size(), 3u);
  for (const auto& [key, ratio] : means)
  {
    EXPECT_GT(ratio, 0.0);
  }
  const auto cfg = config_from_json(j);
  bounds::BoundInputs in{cfg.bounds.m, cfg.bounds.c1, cfg.bounds.c2, cfg.bounds.k, std::nullopt,
                         0.5 * cfg.bounds.m * std::log(cfg.bounds.c1)};
  in = bounds::with_default_stability(in, 0.1);
  EXPECT_DOUBLE_EQ(s.rows[5].value, bounds::wct_bound(in));
}

TEST(PrepareRun, HeldOutClassesAndSharedLabels)
{
  const auto cfg = config_from_json(tiny("noise_table"));
  const auto a = prepare_run(cfg, 0.3, 7);
  const auto b = prepare_run(cfg, 0.3, 7);
  EXPECT_EQ(a.train.labels, b.train.labels);
  for (const int c : a.split.test_classes)
  {
    EXPECT_EQ(std::count(a.split.train_classes.begin(), a.split.train_classes.end(), c), 0);
  }
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < a.train.size(); ++i)
  {
    wrong += a.train.labels[i] != a.train.true_labels[i];
  }
  EXPECT_NEAR(static_cast<double>(wrong) / static_cast<double>(a.train.size()), 0.3, 0.06);
  ASSERT_EQ(a.episodes.size(), 10u);
  for (const auto& e : a.episodes)
  {
    EXPECT_EQ(e.way, 5u);
    EXPECT_EQ(e.support.size(), 5u);
  }
}

TEST(PrepareRun, UnsupervisedPoolHasBackground)
{
  const auto cfg = config_from_json(tiny("ablation"));
  const auto d = prepare_run(cfg, 0.3, 1);
  const auto bg = std::count(d.train.true_labels.begin(), d.train.true_labels.end(), -1);
  EXPECT_EQ(static_cast<std::size_t>(bg), d.split.train.size() * 3 / 10);
}

TEST(CorruptTask, RateAndCap)
{
  Task t;
  t.way = 2;
  std::vector<std::size_t> rows(200);
  std::iota(rows.begin(), rows.end(), 0);
  std::vector<int> labels(200);
  for (std::size_t i = 0; i < 200; ++i)
  {
    labels[i] = static_cast<int>(i % 2);
  }
  const Tensor x = Tensor::zeros({200, 1});
  t.support = metalab::detail::make_split(x, std::span(rows).first(100), std::span(labels).first(100), {});
  t.query = metalab::detail::make_split(x, std::span(rows).last(100), std::span(labels).last(100), {});
  EXPECT_EQ(corrupt_task(t, 0.0, 1).support.labels, t.support.labels);
  // 0.9 exceeds the 2-way maximum of 0.5; the result is a coin flip.
  const auto n = corrupt_task(t, 0.9, 2);
  std::size_t flips = 0;
  for (std::size_t i = 0; i < 100; ++i)
  {
    flips += n.support.labels[i] != t.support.labels[i];
    flips += n.query.labels[i] != t.query.labels[i];
  }
  EXPECT_NEAR(static_cast<double>(flips) / 200.0, 0.5, 0.1);
}

TEST(Threads, EnvironmentVariable)
{
  ::unsetenv("METALAB_THREADS");
  EXPECT_EQ(thread_count_from_env(), 1u);
  ::setenv("METALAB_THREADS", "4", 1);
  EXPECT_EQ(thread_count_from_env(), 4u);
  ::setenv("METALAB_THREADS", "0", 1);
  EXPECT_THROW(thread_count_from_env(), ConfigError);
  ::setenv("METALAB_THREADS", "two", 1);
  EXPECT_THROW(thread_count_from_env(), ConfigError);
  ::unsetenv("METALAB_THREADS");
}

TEST(PseudoTasks, ShotModeShapesEpisodes)
{
  Rng rng(3);
  std::vector<double> v;
  std::vector<int> truth;
  for (int c = 0; c < 4; ++c)
  {
    for (int i = 0; i < 30; ++i)
    {
      v.push_back(20.0 * c + 0.1 * rng.normal());
      v.push_back(0.1 * rng.normal());
      truth.push_back(c);
    }
  }
  const Tensor pool = Tensor::matrix(120, 2, std::move(v));
  PseudoTaskConfig pc;
  pc.samples_per_task = 100;
  pc.num_tasks = 3;
  pc.shot = 2;
  pc.query = 4;
  pc.max_way = 3;
  const auto identity = [](const Tensor& x) { return x; };
  for (const auto& t : construct_pseudo_tasks(pool, identity, pc, {1.0, 3}, 9, truth))
  {
    EXPECT_EQ(t.way, 3u);
    EXPECT_EQ(t.support.size(), 6u);
    EXPECT_EQ(t.query.size(), 12u);
    EXPECT_EQ(matched_accuracy(t.query.labels, t.query.true_labels), 1.0);
  }
  const auto km = construct_kmeans_tasks(pool, identity, pc, 4, 9, truth);
  ASSERT_EQ(km.size(), 3u);
  EXPECT_EQ(km[0].support.size(), 6u);
  EXPECT_THROW(construct_kmeans_tasks(pool, identity, pc, 1, 9), std::invalid_argument);
}

TEST(Synthetic, BackgroundPoints)
{
  const auto data = gen_synthetic({4, 3, 10, 2.0, 0, 1.5, 1});
  const auto more = add_background(data, 0.5, 3.0, 3, 2);
  EXPECT_EQ(more.size(), 60u);
  EXPECT_EQ(more.true_labels.back(), -1);
  EXPECT_EQ(more.num_classes, 4u);
  EXPECT_EQ(add_background(data, 0.0, 3.0, 3, 2).size(), 40u);
  EXPECT_THROW(add_background(data, -1.0, 3.0, 3, 2), std::invalid_argument);
}
