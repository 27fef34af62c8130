#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <vector>

namespace metalab
{
/// Minimum-cost assignment of rows to columns (Hungarian method with
/// potentials, O(n^2 m)). `cost` is rows x cols, row-major, rows <= cols.
/// Returns the column assigned to each row.
inline std::vector<std::size_t> min_cost_assignment(std::span<const double> cost,
                                                    std::size_t rows,
                                                    std::size_t cols)
{
  if (rows > cols)
  {
    throw std::invalid_argument("min_cost_assignment: more rows than columns");
  }
  if (cost.size() != rows * cols)
  {
    throw std::invalid_argument("min_cost_assignment: cost size mismatch");
  }
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays as in the textbook formulation; index 0 is a sentinel.
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<std::size_t> match(cols + 1, 0), way(cols + 1, 0);
  for (std::size_t i = 1; i <= rows; ++i)
  {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(cols + 1, inf);
    std::vector<bool> used(cols + 1, false);
    do
    {
      used[j0] = true;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= cols; ++j)
      {
        if (used[j])
        {
          continue;
        }
        const double cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j])
        {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta)
        {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= cols; ++j)
      {
        if (used[j])
        {
          u[match[j]] += delta;
          v[j] -= delta;
        }
        else
        {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do
    {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> result(rows, 0);
  for (std::size_t j = 1; j <= cols; ++j)
  {
    if (match[j] != 0)
    {
      result[match[j] - 1] = j - 1;
    }
  }
  return result;
}

/// Fraction of positions where predicted ids agree with true ids under the
/// best one-to-one relabelling of predictions. Negative predictions (noise)
/// never match.
inline double matched_accuracy(std::span<const int> predicted,
                               std::span<const int> truth)
{
  if (predicted.size() != truth.size())
  {
    throw std::invalid_argument("matched_accuracy: length mismatch");
  }
  if (predicted.empty())
  {
    return 0.0;
  }
  std::map<int, std::size_t> pred_ids;
  std::map<int, std::size_t> true_ids;
  for (std::size_t i = 0; i < predicted.size(); ++i)
  {
    if (predicted[i] >= 0)
    {
      pred_ids.emplace(predicted[i], pred_ids.size());
    }
    true_ids.emplace(truth[i], true_ids.size());
  }
  if (pred_ids.empty())
  {
    return 0.0;
  }
  // Square matrix so either side may be larger.
  const std::size_t n = std::max(pred_ids.size(), true_ids.size());
  std::vector<double> cost(n * n, 0.0);
  for (std::size_t i = 0; i < predicted.size(); ++i)
  {
    if (predicted[i] < 0)
    {
      continue;
    }
    cost[pred_ids.at(predicted[i]) * n + true_ids.at(truth[i])] -= 1.0;
  }
  const auto assign = min_cost_assignment(cost, n, n);
  double matched = 0.0;
  for (std::size_t r = 0; r < n; ++r)
  {
    matched -= cost[r * n + assign[r]];
  }
  return matched / static_cast<double>(predicted.size());
}

}  // namespace metalab
