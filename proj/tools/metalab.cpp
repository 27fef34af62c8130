#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "metalab/bounds.hpp"
#include "metalab/cluster.hpp"
#include "metalab/entropy.hpp"
#include "metalab/experiment.hpp"
#include "metalab/stability.hpp"

namespace
{
using namespace metalab;
using harness::ConfigError;
using harness::json;

constexpr int kOk = 0;
constexpr int kPartial = 1;
constexpr int kInvalid = 2;

/// Whitespace- or comma-separated numeric matrix, one row per line.
/// Blank lines and lines starting with '#' are skipped.
Tensor read_matrix(const std::string& path)
{
  std::ifstream in(path);
  if (!in)
  {
    throw ConfigError("cannot open '" + path + "'");
  }
  std::vector<double> values;
  std::size_t cols = 0;
  std::size_t rows = 0;
  std::string line;
  while (std::getline(in, line))
  {
    for (auto& ch : line)
    {
      if (ch == ',' || ch == ';' || ch == '\t')
      {
        ch = ' ';
      }
    }
    std::istringstream ss(line);
    std::vector<double> row;
    std::string tok;
    while (ss >> tok)
    {
      if (row.empty() && tok[0] == '#')
      {
        break;
      }
      try
      {
        std::size_t used = 0;
        row.push_back(std::stod(tok, &used));
        if (used != tok.size())
        {
          throw std::invalid_argument(tok);
        }
      }
      catch (const std::exception&)
      {
        throw ConfigError(path + ":" + std::to_string(rows + 1) + ": not a number: '" + tok + "'");
      }
    }
    if (row.empty())
    {
      continue;
    }
    if (cols == 0)
    {
      cols = row.size();
    }
    else if (row.size() != cols)
    {
      throw ConfigError(path + ": row " + std::to_string(rows + 1) + " has " +
                        std::to_string(row.size()) + " columns, expected " + std::to_string(cols));
    }
    values.insert(values.end(), row.begin(), row.end());
    ++rows;
  }
  if (rows == 0)
  {
    throw ConfigError(path + ": no data rows");
  }
  return Tensor::matrix(rows, cols, std::move(values));
}

json read_config(const std::string& path, const std::vector<std::string>& overrides)
{
  std::ifstream in(path);
  if (!in)
  {
    throw ConfigError("cannot open config '" + path + "'");
  }
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded())
  {
    throw ConfigError("config '" + path + "' is not valid JSON");
  }
  for (const auto& o : overrides)
  {
    harness::apply_override(j, o);
  }
  return j;
}

std::string fmt(double v)
{
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string sibling(const std::string& output, const std::string& suffix)
{
  std::filesystem::path p(output);
  return (p.parent_path() / (p.stem().string() + suffix)).string();
}

int execute(const std::vector<harness::Cell>& cells, const std::string& output, const json& sidecar)
{
  const auto threads = harness::thread_count_from_env();
  if (!std::filesystem::path(output).parent_path().empty())
  {
    std::filesystem::create_directories(std::filesystem::path(output).parent_path());
  }
  std::ofstream results(output);
  if (!results)
  {
    throw ConfigError("cannot write '" + output + "'");
  }
  {
    std::ofstream side(output + ".json");
    side << sidecar.dump(2) << '\n';
  }
  const bool tracing = std::any_of(cells.begin(), cells.end(),
                                   [](const auto& c) { return c.config.trace.enabled; });
  std::ofstream traces;
  if (tracing)
  {
    traces.open(sibling(output, ".trace.csv"));
  }
  harness::RunOptions opts;
  opts.threads = threads;
  opts.results = &results;
  opts.traces = tracing ? &traces : nullptr;
  opts.on_row = [](const harness::ResultRow& r) {
    std::cerr << r.method << " seed=" << r.seed << " " << r.grid_key << "=" << r.grid_value
              << (r.cell.empty() ? "" : " [" + r.cell + "]") << " " << r.metric << "="
              << r.value << " (" << r.status << (r.message.empty() ? "" : ": " + r.message)
              << ")\n";
  };
  const auto summary = harness::run_cells(cells, opts);
  std::cerr << summary.rows.size() << " rows, " << summary.failed << " failed -> " << output
            << '\n';
  return summary.exit_code();
}

}  // namespace

int main(int argc, char** argv)
{
  CLI::App app{"metalab: entropy-limited supervision, bounds, and unsupervised meta-learning"};
  app.require_subcommand(1);

  // entropy
  auto* ent = app.add_subcommand("entropy", "Correct-label probability under an entropy budget");
  std::size_t e_m = 0, e_c = 0;
  std::optional<double> e_h, e_noise, e_frac;
  ent->add_option("-m,--samples", e_m, "Number of labelled samples")->required();
  ent->add_option("-c,--classes", e_c, "Number of classes")->required();
  auto* g_h = ent->add_option("--entropy", e_h, "Annotation entropy H in nats");
  auto* g_n = ent->add_option("--noise", e_noise, "Target label-noise rate");
  auto* g_f = ent->add_option("--fraction", e_frac, "H as a fraction of m ln C");
  g_h->excludes(g_n, g_f);
  g_n->excludes(g_f);

  // bounds
  auto* bnd = app.add_subcommand("bounds", "WCT and meta-learning generalization bounds over H");
  double b_m = 10000, b_c1 = 10, b_c2 = 5, b_k = 1, b_c = 0.1, b_delta = 0.01, b_loss = 1.0;
  std::optional<double> b_n;
  std::size_t b_points = 8;
  bool b_check = false;
  bnd->add_option("-m", b_m, "Sample count")->capture_default_str();
  bnd->add_option("--c1", b_c1, "Classes seen by WCT")->capture_default_str();
  bnd->add_option("--c2", b_c2, "Classes per task")->capture_default_str();
  bnd->add_option("-k", b_k, "Samples per class within a task")->capture_default_str();
  bnd->add_option("-n", b_n, "Task count (default m / (k C2))");
  bnd->add_option("--stability", b_c, "Constant c in beta = c / sqrt(m)")->capture_default_str();
  bnd->add_option("--delta", b_delta, "Confidence parameter")->capture_default_str();
  bnd->add_option("--loss-bound", b_loss, "Loss bound M")->capture_default_str();
  bnd->add_option("--points", b_points, "Grid points over [0, m ln C1]")->capture_default_str();
  bnd->add_flag("--check", b_check, "Also report whether C2^2 k < C1");

  // cluster
  auto* clu = app.add_subcommand("cluster", "Cluster a point matrix; writes one label per row");
  std::string c_in, c_out, c_algo = "dbscan";
  double c_eps = 1.0;
  std::size_t c_min = 15, c_k = 2;
  std::uint64_t c_seed = 0;
  clu->add_option("input", c_in, "Matrix file (whitespace or CSV)")->required();
  clu->add_option("-o,--output", c_out, "Labels CSV (default stdout)");
  clu->add_option("--algorithm", c_algo, "dbscan or kmeans")
      ->check(CLI::IsMember({"dbscan", "kmeans"}))
      ->capture_default_str();
  clu->add_option("--eps", c_eps, "DBSCAN radius")->capture_default_str();
  clu->add_option("--min-samples", c_min, "DBSCAN density threshold")->capture_default_str();
  clu->add_option("-k", c_k, "k-means cluster count")->capture_default_str();
  clu->add_option("--seed", c_seed, "k-means seed")->capture_default_str();

  // stability
  auto* stab = app.add_subcommand("stability", "SVCCA similarity of two representation matrices");
  std::string s_x, s_y;
  double s_thr = 0.99;
  stab->add_option("x", s_x, "First matrix (rows are probe samples)")->required();
  stab->add_option("y", s_y, "Second matrix, same rows")->required();
  stab->add_option("--threshold", s_thr, "Variance kept by SVD pruning")->capture_default_str();

  // train / run / sweep share config handling
  std::string config_path;
  std::vector<std::string> overrides;
  const auto add_config = [&](CLI::App* sub) {
    sub->add_option("config", config_path, "Experiment JSON config")->required();
    sub->add_option("--set", overrides, "Override a field: dotted.path=value (repeatable)");
  };

  auto* trn = app.add_subcommand("train", "Train one method for one seed and save a checkpoint");
  add_config(trn);
  std::string t_method, t_ckpt;
  std::optional<std::uint64_t> t_seed;
  std::optional<double> t_grid;
  trn->add_option("--method", t_method, "Method (default: first in config)");
  trn->add_option("--seed", t_seed, "Seed (default: first in config)");
  trn->add_option("--grid-value", t_grid, "Noise rate or entropy fraction (default: first)");
  trn->add_option("--checkpoint", t_ckpt, "Where to write the trained parameters");

  auto* run = app.add_subcommand("run", "Run an experiment config; writes CSV and a JSON sidecar");
  add_config(run);
  std::string r_out;
  run->add_option("-o,--output", r_out, "Results CSV (default: config output)");

  auto* swp = app.add_subcommand("sweep", "Cross-product sweep of config fields");
  add_config(swp);
  std::vector<std::string> axes;
  std::string w_out;
  swp->add_option("--axis", axes, "path=v1,v2,... (repeatable; eps, min_samples, C2, k are aliases)")
      ->required();
  swp->add_option("-o,--output", w_out, "Results CSV (default: config output)");

  try
  {
    app.parse(argc, argv);
  }
  catch (const CLI::ParseError& e)
  {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }

  try
  {
    if (ent->parsed())
    {
      double h = 0.0;
      if (e_h)
      {
        h = *e_h;
      }
      else if (e_noise)
      {
        h = entropy::entropy_for_noise(*e_noise, e_m, e_c);
      }
      else if (e_frac)
      {
        h = *e_frac * static_cast<double>(e_m) * std::log(static_cast<double>(e_c));
      }
      else
      {
        h = static_cast<double>(e_m) * std::log(static_cast<double>(e_c));
      }
      const entropy::EntropyBudget budget{e_m, e_c, h};
      budget.validate();
      std::cout << "entropy,p_correct,expected_correct,p_noise\n"
                << fmt(h) << "," << fmt(entropy::correct_probability(budget)) << ","
                << fmt(entropy::expected_correct(budget)) << ","
                << fmt(entropy::noise_probability(budget)) << '\n';
      return kOk;
    }
    if (bnd->parsed())
    {
      bounds::BoundInputs base{b_m, b_c1, b_c2, b_k, b_n, 0.0};
      base.loss_bound = b_loss;
      base.delta = b_delta;
      base.validate();
      if (b_points == 0)
      {
        throw ConfigError("--points must be >= 1");
      }
      std::cout << "H,wct_bound,meta_bound,ratio\n";
      for (const double f : harness::uniform_grid(b_points))
      {
        auto in = base;
        in.entropy = f * b_m * std::log(b_c1);
        in = bounds::with_default_stability(in, b_c);
        const double w = bounds::wct_bound(in);
        const double mb = bounds::meta_bound(in);
        std::cout << fmt(in.entropy) << "," << fmt(w) << "," << fmt(mb) << "," << fmt(mb / w)
                  << '\n';
      }
      if (b_check)
      {
        const auto r = bounds::corollary_check(std::llround(b_c1), std::llround(b_c2),
                                               std::llround(b_k));
        std::cerr << "C2^2 k = " << r.lhs << (r.holds ? " < " : " >= ") << "C1 = " << r.rhs
                  << (r.holds ? " (meta-learning bound is tighter)\n" : "\n");
      }
      return kOk;
    }
    if (clu->parsed())
    {
      const Tensor points = read_matrix(c_in);
      std::vector<int> labels;
      if (c_algo == "dbscan")
      {
        labels = cluster::dbscan(points, {c_eps, c_min}).labels;
      }
      else
      {
        if (c_k < 1 || c_k > points.rows())
        {
          throw ConfigError("-k must lie in [1, rows]");
        }
        labels = cluster::kmeans(points, c_k, 100, c_seed).assignment.labels;
      }
      std::ofstream file;
      if (!c_out.empty())
      {
        file.open(c_out);
        if (!file)
        {
          throw ConfigError("cannot write '" + c_out + "'");
        }
      }
      std::ostream& os = c_out.empty() ? std::cout : file;
      os << "label\n";
      for (const int l : labels)
      {
        os << l << '\n';
      }
      return kOk;
    }
    if (stab->parsed())
    {
      const auto r = stability::svcca_detail(read_matrix(s_x), read_matrix(s_y), s_thr);
      std::cout << fmt(r.similarity) << '\n';
      if (r.degenerate)
      {
        std::cerr << "warning: a representation has zero variance\n";
      }
      return kOk;
    }

    const json j = read_config(config_path, overrides);
    const auto cfg = harness::config_from_json(j);
    if (trn->parsed())
    {
      if (cfg.kind == harness::ExperimentKind::bounds_sweep)
      {
        throw ConfigError("train: bounds_sweep has nothing to train");
      }
      const std::string method = t_method.empty() ? cfg.methods.front() : t_method;
      const auto& known = harness::ExperimentConfig::known_methods(cfg.kind);
      if (std::find(known.begin(), known.end(), method) == known.end())
      {
        throw ConfigError("train: method '" + method + "' is not available for this kind");
      }
      const auto seed = t_seed.value_or(cfg.seeds.front());
      const double grid = t_grid.value_or(cfg.grid().front());
      const auto data = harness::prepare_run(cfg, grid, seed);
      const auto out = harness::run_method(cfg, data, method, seed, grid);
      std::cout << "method,seed," << cfg.grid_key() << ",accuracy,ci95\n"
                << method << "," << seed << "," << fmt(grid) << "," << fmt(out.eval.mean) << ","
                << fmt(out.eval.ci95) << '\n';
      if (!t_ckpt.empty())
      {
        save_checkpoint(out.model, t_ckpt);
        std::cerr << "checkpoint -> " << t_ckpt << '\n';
      }
      return kOk;
    }
    if (run->parsed())
    {
      const std::string output = r_out.empty() ? cfg.output : r_out;
      json side = harness::to_json(cfg);
      side["config_hash"] = harness::config_hash(cfg);
      return execute({{cfg, ""}}, output, side);
    }
    if (swp->parsed())
    {
      std::vector<std::pair<std::string, std::vector<json>>> grid;
      for (const auto& a : axes)
      {
        grid.push_back(harness::parse_sweep_axis(a));
      }
      const auto cells = harness::sweep_cells(j, grid);
      json side = harness::to_json(cfg);
      side["sweep"] = json::array();
      for (const auto& c : cells)
      {
        side["sweep"].push_back(
            {{"cell", c.label}, {"config_hash", harness::config_hash(c.config)}});
      }
      return execute(cells, w_out.empty() ? cfg.output : w_out, side);
    }
  }
  catch (const ConfigError& e)
  {
    std::cerr << "invalid config: " << e.what() << '\n';
    return kInvalid;
  }
  catch (const std::invalid_argument& e)
  {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kInvalid;
  }
  catch (const std::domain_error& e)
  {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kInvalid;
  }
  catch (const std::exception& e)
  {
    std::cerr << "error: " << e.what() << '\n';
    return kPartial;
  }
  return kOk;
}
