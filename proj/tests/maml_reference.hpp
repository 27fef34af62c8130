#pragma once

// Hand-written MAML outer gradient for a linear softmax classifier, used as
// an oracle that shares no code with the autodiff engine.

#include <Eigen/Dense>

#include <cmath>
#include <vector>

namespace maml_ref
{
using Mat = Eigen::MatrixXd;

struct Linear
{
  Mat w;  // d x c
  Mat b;  // 1 x c
};

inline Mat softmax_rows(const Mat& z)
{
  Mat s(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i)
  {
    const double peak = z.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (z.row(i).array() - peak).exp();
    s.row(i) = e / e.sum();
  }
  return s;
}

inline Mat one_hot(const std::vector<int>& y, Eigen::Index classes)
{
  Mat out = Mat::Zero(static_cast<Eigen::Index>(y.size()), classes);
  for (std::size_t i = 0; i < y.size(); ++i)
  {
    out(static_cast<Eigen::Index>(i), y[i]) = 1.0;
  }
  return out;
}

inline Mat logits(const Linear& p, const Mat& x)
{
  return (x * p.w).rowwise() + p.b.row(0);
}

/// Gradient of mean cross-entropy.
inline Linear gradient(const Linear& p, const Mat& x, const std::vector<int>& y)
{
  const double n = static_cast<double>(x.rows());
  const Mat diff = softmax_rows(logits(p, x)) - one_hot(y, p.w.cols());
  return {x.transpose() * diff / n, diff.colwise().sum() / n};
}

/// Hessian of mean cross-entropy applied to direction v.
inline Linear hessian_vector(const Linear& p, const Mat& x, const std::vector<int>& y,
                             const Linear& v)
{
  (void)y;
  const double n = static_cast<double>(x.rows());
  const Mat s = softmax_rows(logits(p, x));
  const Mat dz = (x * v.w).rowwise() + v.b.row(0);
  Mat ds(dz.rows(), dz.cols());
  for (Eigen::Index i = 0; i < dz.rows(); ++i)
  {
    const double inner = s.row(i).dot(dz.row(i));
    ds.row(i) = s.row(i).array() * (dz.row(i).array() - inner);
  }
  return {x.transpose() * ds / n, ds.colwise().sum() / n};
}

/// d/dphi of L_query(theta_K) with theta_{k+1} = theta_k - alpha grad L_support(theta_k).
inline Linear maml_gradient(const Linear& phi, const Mat& xs, const std::vector<int>& ys,
                            const Mat& xq, const std::vector<int>& yq, double alpha,
                            int steps)
{
  std::vector<Linear> path{phi};
  for (int k = 0; k < steps; ++k)
  {
    const Linear g = gradient(path.back(), xs, ys);
    path.push_back({path.back().w - alpha * g.w, path.back().b - alpha * g.b});
  }
  Linear v = gradient(path.back(), xq, yq);
  for (int k = steps - 1; k >= 0; --k)
  {
    const Linear hv = hessian_vector(path[static_cast<std::size_t>(k)], xs, ys, v);
    v = {v.w - alpha * hv.w, v.b - alpha * hv.b};
  }
  return v;
}
}  // namespace maml_ref
