#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "metalab/rng.hpp"
#include "metalab/tensor.hpp"

namespace metalab::cluster
{
constexpr int kNoise = -1;

struct DbscanParams
{
  double eps = 1.0;
  std::size_t min_samples = 15;

  void validate() const
  {
    if (!(eps > 0.0))
    {
      throw std::invalid_argument("DbscanParams: eps must be positive");
    }
    if (min_samples < 1)
    {
      throw std::invalid_argument("DbscanParams: min_samples must be >= 1");
    }
  }
};

/// Per-point cluster ids in [0, num_clusters) or kNoise.
struct ClusterAssignment
{
  std::vector<int> labels;
  std::vector<bool> core_mask;
  std::size_t num_clusters = 0;

  std::vector<std::size_t> cluster_sizes() const
  {
    std::vector<std::size_t> sizes(num_clusters, 0);
    for (const int l : labels)
    {
      if (l >= 0)
      {
        ++sizes[static_cast<std::size_t>(l)];
      }
    }
    return sizes;
  }

  std::size_t noise_count() const
  {
    std::size_t n = 0;
    for (const int l : labels)
    {
      n += l == kNoise ? 1 : 0;
    }
    return n;
  }
};

inline double squared_distance(std::span<const double> a, std::span<const double> b)
{
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
  {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

/// Neighbour lists (self included) under Euclidean distance <= eps.
inline std::vector<std::vector<std::size_t>> radius_neighbours(const Tensor& points,
                                                               double eps)
{
  const std::size_t n = points.rows();
  const double eps2 = eps * eps;
  std::vector<std::vector<std::size_t>> out(n);
  for (std::size_t i = 0; i < n; ++i)
  {
    out[i].push_back(i);
  }
  for (std::size_t i = 0; i < n; ++i)
  {
    for (std::size_t j = i + 1; j < n; ++j)
    {
      if (squared_distance(points.row(i), points.row(j)) <= eps2)
      {
        out[i].push_back(j);
        out[j].push_back(i);
      }
    }
  }
  for (auto& list : out)
  {
    std::sort(list.begin(), list.end());
  }
  return out;
}

/// DBSCAN over the rows of `points`. A point is core when at least
/// min_samples points (itself included) lie within eps. Clusters grow from
/// cores in index order; a border point joins the first cluster reaching it.
inline ClusterAssignment dbscan(const Tensor& points, const DbscanParams& params)
{
  params.validate();
  if (points.rank() != 2)
  {
    throw std::invalid_argument("dbscan: points must be a matrix");
  }
  const std::size_t n = points.rows();
  const auto neighbours = radius_neighbours(points, params.eps);

  ClusterAssignment out;
  out.labels.assign(n, kNoise);
  out.core_mask.assign(n, false);
  for (std::size_t i = 0; i < n; ++i)
  {
    out.core_mask[i] = neighbours[i].size() >= params.min_samples;
  }

  std::vector<bool> assigned(n, false);
  for (std::size_t seed = 0; seed < n; ++seed)
  {
    if (assigned[seed] || !out.core_mask[seed])
    {
      continue;
    }
    const int id = static_cast<int>(out.num_clusters++);
    std::deque<std::size_t> frontier{seed};
    assigned[seed] = true;
    out.labels[seed] = id;
    while (!frontier.empty())
    {
      const std::size_t q = frontier.front();
      frontier.pop_front();
      for (const auto r : neighbours[q])
      {
        if (assigned[r])
        {
          continue;
        }
        assigned[r] = true;
        out.labels[r] = id;
        if (out.core_mask[r])
        {
          frontier.push_back(r);
        }
      }
    }
  }
  return out;
}

/// Overload for ragged input; rejects dimension mismatches.
inline ClusterAssignment dbscan(const std::vector<std::vector<double>>& points,
                                const DbscanParams& params)
{
  params.validate();
  if (points.empty())
  {
    return {};
  }
  const std::size_t dim = points.front().size();
  std::vector<double> flat;
  flat.reserve(points.size() * dim);
  for (const auto& p : points)
  {
    if (p.size() != dim)
    {
      throw std::invalid_argument("dbscan: point dimension " +
                                  std::to_string(p.size()) + " != " +
                                  std::to_string(dim));
    }
    flat.insert(flat.end(), p.begin(), p.end());
  }
  return dbscan(Tensor::matrix(points.size(), dim, std::move(flat)), params);
}

struct KMeansResult
{
  ClusterAssignment assignment;
  Tensor centroids;
  /// Inertia after each assignment step.
  std::vector<double> inertia_history;

  double inertia() const
  {
    return inertia_history.empty() ? 0.0 : inertia_history.back();
  }
};

/// Lloyd's algorithm with seeded k-means++ initialisation. An emptied
/// cluster is re-seeded at the point farthest from its centroid.
inline KMeansResult kmeans(const Tensor& points, std::size_t k, std::size_t max_iters,
                           std::uint64_t seed)
{
  const std::size_t n = points.rows();
  const std::size_t dim = points.cols();
  if (k == 0 || k > n)
  {
    throw std::invalid_argument("kmeans: k = " + std::to_string(k) +
                                " must lie in [1, " + std::to_string(n) + "]");
  }
  Rng rng(seed);

  std::vector<std::size_t> chosen{rng.index(n)};
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  while (chosen.size() < k)
  {
    const auto last = points.row(chosen.back());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
    {
      nearest[i] = std::min(nearest[i], squared_distance(points.row(i), last));
      total += nearest[i];
    }
    std::size_t pick = n;
    if (total > 0.0)
    {
      double target = rng.uniform() * total;
      for (std::size_t i = 0; i < n; ++i)
      {
        if (nearest[i] <= 0.0)
        {
          continue;
        }
        pick = i;
        target -= nearest[i];
        if (target < 0.0)
        {
          break;
        }
      }
    }
    else
    {
      // Remaining points coincide with centres; take any unchosen one.
      std::vector<std::size_t> free;
      for (std::size_t i = 0; i < n; ++i)
      {
        if (std::find(chosen.begin(), chosen.end(), i) == chosen.end())
        {
          free.push_back(i);
        }
      }
      pick = free[rng.index(free.size())];
    }
    chosen.push_back(pick);
  }

  KMeansResult result;
  std::vector<double> centres;
  centres.reserve(k * dim);
  for (const auto c : chosen)
  {
    const auto row = points.row(c);
    centres.insert(centres.end(), row.begin(), row.end());
  }
  result.centroids = Tensor::matrix(k, dim, std::move(centres));

  auto& labels = result.assignment.labels;
  labels.assign(n, -1);
  std::vector<double> dist(n, 0.0);
  for (std::size_t iter = 0;; ++iter)
  {
    bool changed = false;
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i)
    {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c)
      {
        const double d = squared_distance(points.row(i), result.centroids.row(c));
        if (d < best_d)
        {
          best_d = d;
          best = c;
        }
      }
      changed = changed || labels[i] != static_cast<int>(best);
      labels[i] = static_cast<int>(best);
      dist[i] = best_d;
      inertia += best_d;
    }
    result.inertia_history.push_back(inertia);
    if ((!changed && iter > 0) || iter + 1 >= max_iters)
    {
      break;
    }

    std::vector<double> sums(k * dim, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i)
    {
      const auto c = static_cast<std::size_t>(labels[i]);
      ++counts[c];
      const auto row = points.row(i);
      for (std::size_t d = 0; d < dim; ++d)
      {
        sums[c * dim + d] += row[d];
      }
    }
    for (std::size_t c = 0; c < k; ++c)
    {
      if (counts[c] == 0)
      {
        const auto far = static_cast<std::size_t>(
            std::max_element(dist.begin(), dist.end()) - dist.begin());
        dist[far] = 0.0;
        const auto row = points.row(far);
        for (std::size_t d = 0; d < dim; ++d)
        {
          result.centroids.at(c, d) = row[d];
        }
        continue;
      }
      for (std::size_t d = 0; d < dim; ++d)
      {
        result.centroids.at(c, d) = sums[c * dim + d] / static_cast<double>(counts[c]);
      }
    }
  }

  result.assignment.num_clusters = k;
  result.assignment.core_mask.assign(n, false);
  return result;
}

}  // namespace metalab::cluster
