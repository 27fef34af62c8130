#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "metalab/rng.hpp"
#include "metalab/tasks.hpp"
#include "metalab/tensor.hpp"

namespace metalab
{
/// Isotropic Gaussian classes with unit within-class sd.
struct SyntheticSpec
{
  std::size_t num_classes = 10;
  std::size_t dim = 16;
  std::size_t per_class = 50;
  /// Minimum pairwise centroid distance.
  double separation = 6.0;
  /// Centroids vary only in the first `informative_dim` coordinates; the
  /// rest are pure noise. 0 means every coordinate.
  std::size_t informative_dim = 0;
  /// Centroids are drawn uniformly in a ball of radius radius * separation.
  double radius = 1.5;
  std::uint64_t seed = 0;

  std::size_t signal_dim() const { return informative_dim == 0 ? dim : informative_dim; }

  void validate() const
  {
    if (num_classes < 2) throw std::invalid_argument("SyntheticSpec: num_classes must be >= 2");
    if (per_class < 2) throw std::invalid_argument("SyntheticSpec: per_class must be >= 2");
    if (dim == 0) throw std::invalid_argument("SyntheticSpec: dim must be >= 1");
    if (informative_dim > dim)
    {
      throw std::invalid_argument("SyntheticSpec: informative_dim exceeds dim");
    }
    if (!(separation >= 0.0)) throw std::invalid_argument("SyntheticSpec: separation must be >= 0");
    if (!(radius > 0.0)) throw std::invalid_argument("SyntheticSpec: radius must be > 0");
  }
};

/// Raised when centroids at the requested separation do not fit the region.
class PackingError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

/// Centroids drawn one at a time by rejection until every pair is at least
/// `separation` apart.
inline std::vector<std::vector<double>> pack_centroids(const SyntheticSpec& spec, Rng& rng)
{
  const std::size_t d = spec.signal_dim();
  const double r = spec.radius * std::max(spec.separation, 1e-12);
  constexpr std::size_t kAttempts = 20000;
  std::vector<std::vector<double>> out;
  while (out.size() < spec.num_classes)
  {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < kAttempts && !placed; ++attempt)
    {
      // Uniform in the ball: Gaussian direction, radius ~ U^(1/d).
      std::vector<double> c(d);
      double norm = 0.0;
      for (auto& v : c)
      {
        v = rng.normal();
        norm += v * v;
      }
      norm = std::sqrt(norm);
      const double scale = r * std::pow(rng.uniform(), 1.0 / static_cast<double>(d)) /
                           std::max(norm, 1e-300);
      for (auto& v : c)
      {
        v *= scale;
      }
      placed = std::all_of(out.begin(), out.end(), [&](const std::vector<double>& o) {
        double d2 = 0.0;
        for (std::size_t i = 0; i < d; ++i)
        {
          d2 += (o[i] - c[i]) * (o[i] - c[i]);
        }
        return d2 >= spec.separation * spec.separation;
      });
      if (placed)
      {
        out.push_back(std::move(c));
      }
    }
    if (!placed)
    {
      throw PackingError("gen_synthetic: cannot place " + std::to_string(spec.num_classes) +
                         " centroids " + std::to_string(spec.separation) +
                         " apart in " + std::to_string(d) +
                         " dimensions; raise dim or radius");
    }
  }
  return out;
}

inline Dataset gen_synthetic(const SyntheticSpec& spec)
{
  spec.validate();
  Rng rng(spec.seed);
  const auto centroids = pack_centroids(spec, rng);
  Dataset data;
  data.num_classes = spec.num_classes;
  std::vector<double> values;
  values.reserve(spec.num_classes * spec.per_class * spec.dim);
  for (std::size_t c = 0; c < spec.num_classes; ++c)
  {
    for (std::size_t i = 0; i < spec.per_class; ++i)
    {
      for (std::size_t k = 0; k < spec.dim; ++k)
      {
        const double mu = k < centroids[c].size() ? centroids[c][k] : 0.0;
        values.push_back(mu + rng.normal());
      }
      data.labels.push_back(static_cast<int>(c));
    }
  }
  data.true_labels = data.labels;
  data.inputs = Tensor::matrix(spec.num_classes * spec.per_class, spec.dim, std::move(values));
  return data;
}

/// Append `fraction * rows` background points that belong to no class
/// (label -1): N(0, scale^2) in the first `signal_dim` coordinates and unit
/// noise elsewhere.
inline Dataset add_background(const Dataset& data, double fraction, double scale,
                              std::size_t signal_dim, std::uint64_t seed)
{
  if (!(fraction >= 0.0) || !(scale > 0.0))
  {
    throw std::invalid_argument("add_background: fraction must be >= 0 and scale > 0");
  }
  const auto extra = static_cast<std::size_t>(fraction * static_cast<double>(data.size()));
  if (extra == 0)
  {
    return data;
  }
  const std::size_t dim = data.dim();
  Rng rng(seed);
  std::vector<double> values(data.inputs.data().begin(), data.inputs.data().end());
  Dataset out;
  out.labels = data.labels;
  out.true_labels = data.true_labels;
  out.num_classes = data.num_classes;
  for (std::size_t i = 0; i < extra; ++i)
  {
    for (std::size_t k = 0; k < dim; ++k)
    {
      values.push_back(rng.normal() * (k < signal_dim ? scale : 1.0));
    }
    out.labels.push_back(-1);
    out.true_labels.push_back(-1);
  }
  out.inputs = Tensor::matrix(data.size() + extra, dim, std::move(values));
  return out;
}

/// Rows of `data` whose true class is in `classes`.
inline Dataset subset_classes(const Dataset& data, const std::vector<int>& classes)
{
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < data.true_labels.size(); ++i)
  {
    if (std::find(classes.begin(), classes.end(), data.true_labels[i]) != classes.end())
    {
      rows.push_back(i);
    }
  }
  if (rows.empty())
  {
    throw std::invalid_argument("subset_classes: no rows selected");
  }
  Dataset out;
  out.inputs = gather_rows(data.inputs, rows);
  for (const auto r : rows)
  {
    out.labels.push_back(data.labels[r]);
    out.true_labels.push_back(data.true_labels[r]);
  }
  out.num_classes = classes.size();
  return out;
}

struct ClassSplit
{
  Dataset train;
  Dataset val;
  Dataset test;
  std::vector<int> train_classes;
  std::vector<int> val_classes;
  std::vector<int> test_classes;
};

/// Disjoint train/val/test class sets in the given proportions (each at
/// least one class), assigned by a seeded shuffle.
inline ClassSplit split_classes(const Dataset& data, double train_frac, double val_frac,
                                std::uint64_t seed)
{
  const std::size_t c = data.num_classes;
  if (c < 3)
  {
    throw std::invalid_argument("split_classes: need at least 3 classes");
  }
  if (!(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac < 1.0))
  {
    throw std::invalid_argument("split_classes: fractions must leave room for test classes");
  }
  Rng rng(seed);
  const auto perm = rng.permutation(c);
  auto n_train = static_cast<std::size_t>(std::lround(train_frac * static_cast<double>(c)));
  auto n_val = static_cast<std::size_t>(std::lround(val_frac * static_cast<double>(c)));
  n_train = std::clamp<std::size_t>(n_train, 1, c - 2);
  n_val = std::clamp<std::size_t>(n_val, 1, c - 1 - n_train);
  ClassSplit out;
  for (std::size_t i = 0; i < c; ++i)
  {
    const int cls = static_cast<int>(perm[i]);
    (i < n_train ? out.train_classes
                 : (i < n_train + n_val ? out.val_classes : out.test_classes))
        .push_back(cls);
  }
  for (auto* v : {&out.train_classes, &out.val_classes, &out.test_classes})
  {
    std::sort(v->begin(), v->end());
  }
  out.train = subset_classes(data, out.train_classes);
  out.val = subset_classes(data, out.val_classes);
  out.test = subset_classes(data, out.test_classes);
  return out;
}

}  // namespace metalab
