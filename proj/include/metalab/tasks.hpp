#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "metalab/cluster.hpp"
#include "metalab/rng.hpp"
#include "metalab/tensor.hpp"

namespace metalab
{
/// Labelled pool. `labels` are what training sees (possibly corrupted or
/// pseudo); `true_labels` are kept for evaluation only.
struct Dataset
{
  Tensor inputs;
  std::vector<int> labels;
  std::vector<int> true_labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return inputs.empty() ? 0 : inputs.rows(); }
  std::size_t dim() const { return inputs.cols(); }
};

struct Split
{
  Tensor inputs;
  std::vector<int> labels;
  /// Ground truth when known, else empty.
  std::vector<int> true_labels;

  std::size_t size() const { return labels.size(); }
};

/// One episode: a support set for adaptation and a disjoint query set.
struct Task
{
  Split support;
  Split query;
  std::size_t way = 0;

  void validate() const
  {
    if (way < 2)
    {
      throw std::invalid_argument("Task: way must be >= 2");
    }
    if (support.size() == 0 || query.size() == 0)
    {
      throw std::invalid_argument("Task: empty support or query");
    }
    std::vector<bool> present(way, false);
    for (const int l : support.labels)
    {
      if (l < 0 || static_cast<std::size_t>(l) >= way)
      {
        throw std::invalid_argument("Task: support label out of range");
      }
      present[static_cast<std::size_t>(l)] = true;
    }
    for (const int l : query.labels)
    {
      if (l < 0 || static_cast<std::size_t>(l) >= way)
      {
        throw std::invalid_argument("Task: query label out of range");
      }
    }
    if (std::find(present.begin(), present.end(), false) != present.end())
    {
      throw std::invalid_argument("Task: a class is missing from the support set");
    }
  }
};

namespace detail
{
inline Split make_split(const Tensor& inputs, std::span<const std::size_t> rows,
                        std::span<const int> labels, std::span<const int> truth)
{
  Split s;
  s.inputs = gather_rows(inputs, rows);
  s.labels.assign(labels.begin(), labels.end());
  s.true_labels.assign(truth.begin(), truth.end());
  return s;
}
}  // namespace detail

/// Episode sampler over a labelled pool: picks `way` classes by the pool's
/// training labels, then `shot` support and `query_per_class` query samples
/// from each. Classes are relabelled 0..way-1 in a random order.
class EpisodeSampler
{
public:
  explicit EpisodeSampler(const Dataset& data, bool use_true_labels = false)
      : data_(&data)
  {
    const auto& source = use_true_labels ? data.true_labels : data.labels;
    for (std::size_t i = 0; i < source.size(); ++i)
    {
      by_class_[source[i]].push_back(i);
    }
  }

  /// Classes that can supply `per_class` samples.
  std::vector<int> eligible_classes(std::size_t per_class) const
  {
    std::vector<int> out;
    for (const auto& [label, rows] : by_class_)
    {
      if (rows.size() >= per_class)
      {
        out.push_back(label);
      }
    }
    return out;
  }

  Task sample(std::size_t way, std::size_t shot, std::size_t query_per_class,
              Rng& rng) const
  {
    const auto classes = eligible_classes(shot + query_per_class);
    if (classes.size() < way)
    {
      throw std::invalid_argument("EpisodeSampler: only " +
                                  std::to_string(classes.size()) +
                                  " classes have enough samples for a " +
                                  std::to_string(way) + "-way episode");
    }
    const auto picked = rng.sample_without_replacement(classes.size(), way);
    std::vector<std::size_t> s_rows, q_rows;
    std::vector<int> s_lab, q_lab, s_true, q_true;
    const bool has_truth = !data_->true_labels.empty();
    for (std::size_t c = 0; c < way; ++c)
    {
      const auto& rows = by_class_.at(classes[picked[c]]);
      const auto take = rng.sample_without_replacement(rows.size(), shot + query_per_class);
      for (std::size_t i = 0; i < take.size(); ++i)
      {
        const std::size_t row = rows[take[i]];
        const bool to_support = i < shot;
        (to_support ? s_rows : q_rows).push_back(row);
        (to_support ? s_lab : q_lab).push_back(static_cast<int>(c));
        if (has_truth)
        {
          (to_support ? s_true : q_true).push_back(data_->true_labels[row]);
        }
      }
    }
    Task task;
    task.way = way;
    task.support = detail::make_split(data_->inputs, s_rows, s_lab, s_true);
    task.query = detail::make_split(data_->inputs, q_rows, q_lab, q_true);
    return task;
  }

private:
  const Dataset* data_;
  std::map<int, std::vector<std::size_t>> by_class_;
};

/// Raised when no clusterable task can be built within the retry budget.
class ClusteringError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

struct PseudoTaskConfig
{
  std::size_t samples_per_task = 50;
  std::size_t num_tasks = 8;
  double support_fraction = 0.5;
  /// Keep at most this many (largest) clusters; 0 means no cap.
  std::size_t max_way = 0;
  std::size_t max_retries = 100;
  /// When non-zero, each kept cluster contributes `shot` support rows and up
  /// to `query` query rows instead of a support_fraction split, and only
  /// clusters with more than `shot` members are kept.
  std::size_t shot = 0;
  std::size_t query = 0;
};

using Embedder = std::function<Tensor(const Tensor&)>;

/// Turn one clustering of sampled points into a task: noise and clusters
/// smaller than min_samples are dropped, survivors relabelled 0..c-1 and
/// split per cluster between support and query. Returns false when fewer
/// than two clusters survive.
inline bool task_from_clusters(const Tensor& sample_inputs,
                               std::span<const int> cluster_labels,
                               std::span<const int> truth, std::size_t min_size,
                               const PseudoTaskConfig& config, Task& out)
{
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < cluster_labels.size(); ++i)
  {
    if (cluster_labels[i] >= 0)
    {
      members[cluster_labels[i]].push_back(i);
    }
  }
  std::vector<std::pair<int, std::size_t>> kept;
  for (const auto& [id, rows] : members)
  {
    if (rows.size() >= std::max<std::size_t>(min_size, config.shot + 1))
    {
      kept.emplace_back(id, rows.size());
    }
  }
  if (config.max_way > 0 && kept.size() > config.max_way)
  {
    std::stable_sort(kept.begin(), kept.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    kept.resize(config.max_way);
    std::sort(kept.begin(), kept.end());
  }
  if (kept.size() < 2)
  {
    return false;
  }

  std::vector<std::size_t> s_rows, q_rows;
  std::vector<int> s_lab, q_lab, s_true, q_true;
  for (std::size_t c = 0; c < kept.size(); ++c)
  {
    const auto& rows = members.at(kept[c].first);
    std::size_t n_support = config.shot;
    std::size_t n_total = rows.size();
    if (config.shot == 0)
    {
      n_support = static_cast<std::size_t>(
          std::lround(config.support_fraction * static_cast<double>(rows.size())));
      n_support = std::clamp<std::size_t>(n_support, 1, rows.size());
      if (n_support == rows.size() && rows.size() > 1)
      {
        --n_support;
      }
    }
    else if (config.query > 0)
    {
      n_total = std::min(n_total, config.shot + config.query);
    }
    for (std::size_t i = 0; i < n_total; ++i)
    {
      const bool to_support = i < n_support;
      (to_support ? s_rows : q_rows).push_back(rows[i]);
      (to_support ? s_lab : q_lab).push_back(static_cast<int>(c));
      if (!truth.empty())
      {
        (to_support ? s_true : q_true).push_back(truth[rows[i]]);
      }
    }
  }
  if (q_rows.empty())
  {
    return false;
  }
  out.way = kept.size();
  out.support = detail::make_split(sample_inputs, s_rows, s_lab, s_true);
  out.query = detail::make_split(sample_inputs, q_rows, q_lab, q_true);
  return true;
}

/// Cluster labels for one batch of embedded points (-1 marks noise).
using Clusterer = std::function<std::vector<int>(const Tensor& embedded, Rng& rng)>;

/// Sample points from the pool, embed and cluster them, and use the cluster
/// index as the pseudo label. Clusters below `min_size` are dropped. Tasks
/// with fewer than two surviving clusters are resampled up to `max_retries`
/// times.
inline std::vector<Task> construct_pseudo_tasks(const Tensor& pool, const Embedder& embed,
                                                const Clusterer& clusterer, std::size_t min_size,
                                                const PseudoTaskConfig& config, std::uint64_t seed,
                                                std::span<const int> pool_truth = {},
                                                const std::string& what = "clustering")
{
  if (config.samples_per_task > pool.rows())
  {
    throw std::invalid_argument("construct_pseudo_tasks: samples_per_task exceeds pool size");
  }
  if (!pool_truth.empty() && pool_truth.size() != pool.rows())
  {
    throw std::invalid_argument("construct_pseudo_tasks: truth length mismatch");
  }
  Rng rng(seed);
  std::vector<Task> tasks;
  tasks.reserve(config.num_tasks);
  while (tasks.size() < config.num_tasks)
  {
    bool built = false;
    for (std::size_t attempt = 0; attempt <= config.max_retries && !built; ++attempt)
    {
      const auto rows = rng.sample_without_replacement(pool.rows(), config.samples_per_task);
      const Tensor inputs = gather_rows(pool, rows);
      const auto labels = clusterer(embed(inputs), rng);
      std::vector<int> truth;
      if (!pool_truth.empty())
      {
        for (const auto r : rows)
        {
          truth.push_back(pool_truth[r]);
        }
      }
      Task task;
      if (task_from_clusters(inputs, labels, truth, min_size, config, task))
      {
        tasks.push_back(std::move(task));
        built = true;
      }
    }
    if (!built)
    {
      throw ClusteringError("construct_pseudo_tasks: no task with >= 2 clusters after " +
                            std::to_string(config.max_retries) + " retries; " + what);
    }
  }
  return tasks;
}

/// DBSCAN pseudo tasks: clusters smaller than min_samples are dropped.
inline std::vector<Task> construct_pseudo_tasks(const Tensor& pool, const Embedder& embed,
                                                const PseudoTaskConfig& config,
                                                const cluster::DbscanParams& params,
                                                std::uint64_t seed,
                                                std::span<const int> pool_truth = {})
{
  params.validate();
  return construct_pseudo_tasks(
      pool, embed,
      [&](const Tensor& x, Rng&) { return cluster::dbscan(x, params).labels; },
      params.min_samples, config, seed, pool_truth,
      "adjust eps (now " + std::to_string(params.eps) + ") or min_samples (now " +
          std::to_string(params.min_samples) + ")");
}

/// k-means pseudo tasks: every sampled point is assigned to one of k clusters.
inline std::vector<Task> construct_kmeans_tasks(const Tensor& pool, const Embedder& embed,
                                                const PseudoTaskConfig& config, std::size_t k,
                                                std::uint64_t seed,
                                                std::span<const int> pool_truth = {})
{
  if (k < 2 || k > config.samples_per_task)
  {
    throw std::invalid_argument("construct_kmeans_tasks: need 2 <= k <= samples_per_task");
  }
  return construct_pseudo_tasks(
      pool, embed,
      [k](const Tensor& x, Rng& rng) { return cluster::kmeans(x, k, 100, rng.fork()).assignment.labels; },
      1, config, seed, pool_truth, "k = " + std::to_string(k));
}

}  // namespace metalab
