#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "metalab/model.hpp"
#include "metalab/tensor.hpp"

namespace metalab::stability
{
struct SvccaResult
{
  double similarity = 0.0;
  /// Set when either input has zero variance; similarity is then 0.
  bool degenerate = false;
  std::size_t dims_x = 0;
  std::size_t dims_y = 0;
  std::vector<double> correlations;
};

namespace detail
{
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Matrix centred(const Tensor& t)
{
  Matrix m = Eigen::Map<const Matrix>(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                                      static_cast<Eigen::Index>(t.cols()));
  m.rowwise() -= m.colwise().mean();
  return m;
}

/// Orthonormal basis of the leading singular directions that together hold
/// `threshold` of the variance. Directions below numerical rank are dropped.
inline Eigen::MatrixXd pruned_basis(const Matrix& m, double threshold)
{
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU);
  const auto& s = svd.singularValues();
  if (s.size() == 0 || !(s(0) > 0.0))
  {
    return {};
  }
  const double tol = s(0) * 1e-10;
  Eigen::Index rank = 0;
  double total = 0.0;
  while (rank < s.size() && s(rank) > tol)
  {
    total += s(rank) * s(rank);
    ++rank;
  }
  Eigen::Index keep = 0;
  double running = 0.0;
  while (keep < rank)
  {
    running += s(keep) * s(keep);
    ++keep;
    if (running >= threshold * total * (1.0 - 1e-12))
    {
      break;
    }
  }
  return svd.matrixU().leftCols(keep);
}
}  // namespace detail

/// SVCCA similarity of two paired representation matrices (rows are the
/// same probe samples). Each side is centred and reduced to the singular
/// directions holding `variance_threshold` of its variance; the canonical
/// correlations between the reduced spaces are the singular values of
/// Ux^T Uy for orthonormal bases Ux, Uy. Returns their mean.
inline SvccaResult svcca_detail(const Tensor& x, const Tensor& y, double variance_threshold = 0.99)
{
  if (x.rank() != 2 || y.rank() != 2)
  {
    throw std::invalid_argument("svcca: inputs must be matrices");
  }
  if (x.rows() != y.rows())
  {
    throw std::invalid_argument("svcca: row counts differ (" + std::to_string(x.rows()) +
                                " vs " + std::to_string(y.rows()) + ")");
  }
  if (x.rows() < 2)
  {
    throw std::invalid_argument("svcca: need at least 2 rows");
  }
  if (!(variance_threshold > 0.0 && variance_threshold <= 1.0))
  {
    throw std::invalid_argument("svcca: variance_threshold must lie in (0, 1]");
  }
  if (!x.all_finite() || !y.all_finite())
  {
    throw std::invalid_argument("svcca: non-finite input");
  }

  const Eigen::MatrixXd ux = detail::pruned_basis(detail::centred(x), variance_threshold);
  const Eigen::MatrixXd uy = detail::pruned_basis(detail::centred(y), variance_threshold);
  SvccaResult out;
  out.dims_x = static_cast<std::size_t>(ux.cols());
  out.dims_y = static_cast<std::size_t>(uy.cols());
  if (ux.cols() == 0 || uy.cols() == 0)
  {
    out.degenerate = true;
    return out;
  }
  if (x == y)
  {
    out.correlations.assign(out.dims_x, 1.0);
    out.similarity = 1.0;
    return out;
  }
  const Eigen::MatrixXd cross = ux.transpose() * uy;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(cross);
  const auto& rho = svd.singularValues();
  double total = 0.0;
  for (Eigen::Index i = 0; i < rho.size(); ++i)
  {
    const double r = std::clamp(rho(i), 0.0, 1.0);
    out.correlations.push_back(r);
    total += r;
  }
  out.similarity = std::clamp(total / static_cast<double>(rho.size()), 0.0, 1.0);
  return out;
}

inline double svcca(const Tensor& x, const Tensor& y, double variance_threshold = 0.99)
{
  return svcca_detail(x, y, variance_threshold).similarity;
}

/// rs of one layer: SVCCA between that layer's outputs under two parameter
/// snapshots on a fixed probe batch. The last layer index is the head.
inline double representation_stability(const ModelParams& current, const ModelParams& previous,
                                       const Tensor& probe, std::size_t layer,
                                       double variance_threshold = 0.99)
{
  if (!(current.arch == previous.arch))
  {
    throw std::invalid_argument("representation_stability: architectures differ");
  }
  if (layer >= current.arch.num_layers())
  {
    throw std::out_of_range("representation_stability: layer " + std::to_string(layer) +
                            " >= " + std::to_string(current.arch.num_layers()));
  }
  return svcca(layer_activations(current, probe, layer),
               layer_activations(previous, probe, layer), variance_threshold);
}

/// One rs sample.
struct StabilityRecord
{
  std::size_t layer = 0;
  std::size_t epoch = 0;
  double rs = 0.0;
};

/// rs for every layer at once.
inline std::vector<StabilityRecord> trace_layers(const ModelParams& current,
                                                 const ModelParams& previous,
                                                 const Tensor& probe, std::size_t epoch,
                                                 double variance_threshold = 0.99)
{
  std::vector<StabilityRecord> out;
  for (std::size_t l = 0; l < current.arch.num_layers(); ++l)
  {
    out.push_back({l, epoch,
                   representation_stability(current, previous, probe, l, variance_threshold)});
  }
  return out;
}

/// Per-task weight for the outer loss: SVCCA of the head-input features of
/// the adapted model against a reference snapshot from the same adaptation,
/// on the task's query inputs. Without a reference the weight is 1.
inline double meta_scaler(const ModelParams& adapted, const ModelParams* reference,
                          const Tensor& query_inputs, double variance_threshold = 0.99)
{
  if (reference == nullptr)
  {
    return 1.0;
  }
  return svcca(features(adapted, query_inputs), features(*reference, query_inputs),
               variance_threshold);
}

}  // namespace metalab::stability
