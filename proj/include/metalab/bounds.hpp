#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

/// Uniform-stability generalization bounds for whole-class training (WCT)
/// and meta-learning under an annotation-entropy budget.
namespace metalab::bounds
{
struct BoundInputs
{
  double m = 0.0;          // sample count
  double c1 = 0.0;         // classes seen by WCT
  double c2 = 0.0;         // classes per task
  double k = 0.0;          // samples per class within a task
  std::optional<double> n; // task count; defaults to m / (k C2)
  double entropy = 0.0;    // H, nats
  double beta = 0.0;       // base-learner uniform stability
  double beta_tilde = 0.0; // meta-learner uniform stability
  double loss_bound = 1.0; // M
  double delta = 0.01;

  /// Worst case when tasks share no samples.
  double tasks() const { return n.value_or(m / (k * c2)); }

  void validate() const
  {
    const auto fail = [](const std::string& what) {
      throw std::domain_error("BoundInputs: " + what);
    };
    if (!(m > 0.0)) fail("m must be positive");
    if (!(c1 >= 1.0)) fail("C1 must be >= 1");
    if (!(c2 >= 1.0)) fail("C2 must be >= 1");
    if (!(k >= 1.0)) fail("k must be >= 1");
    if (n && !(*n > 0.0)) fail("n must be positive");
    const double top = m * std::log(c1);
    if (!(entropy >= 0.0) || entropy > top + 1e-12 * std::max(1.0, top))
    {
      fail("H outside [0, m ln C1]");
    }
    if (!(beta >= 0.0) || !(beta_tilde >= 0.0)) fail("stability must be >= 0");
    if (!(loss_bound > 0.0)) fail("M must be positive");
    if (!(delta > 0.0 && delta < 1.0)) fail("delta must lie in (0, 1)");
  }
};

/// beta = c / sqrt(m), beta_tilde = c / sqrt(n): the o(sqrt(1/m)) premise with
/// an explicit constant.
inline BoundInputs with_default_stability(BoundInputs in, double c = 0.1)
{
  in.beta = c / std::sqrt(in.m);
  in.beta_tilde = c / std::sqrt(in.tasks());
  return in;
}

namespace detail
{
inline double confidence_term(double classes_factor, const BoundInputs& in)
{
  return std::sqrt(classes_factor * std::log(1.0 / in.delta) /
                   (2.0 * in.m * std::exp(in.entropy / in.m)));
}
}  // namespace detail

/// 2 beta + (4 m beta + M) sqrt(C1 ln(1/delta) / (2 m e^{H/m}))
inline double wct_bound(const BoundInputs& in)
{
  in.validate();
  return 2.0 * in.beta +
         (4.0 * in.m * in.beta + in.loss_bound) * detail::confidence_term(in.c1, in);
}

/// 2 beta + 2 beta~ + (4 n beta~ + M) sqrt(k C2^2 ln(1/delta) / (2 m e^{H/m}))
inline double meta_bound(const BoundInputs& in)
{
  in.validate();
  const double factor = in.k * in.c2 * in.c2;
  return 2.0 * in.beta + 2.0 * in.beta_tilde +
         (4.0 * in.tasks() * in.beta_tilde + in.loss_bound) *
             detail::confidence_term(factor, in);
}

/// Fully supervised single-task bound: 2 beta + (4 m beta + M) sqrt(ln(1/delta)/(2m)).
inline double wct_bound_conventional(const BoundInputs& in)
{
  in.validate();
  return 2.0 * in.beta + (4.0 * in.m * in.beta + in.loss_bound) *
                             std::sqrt(std::log(1.0 / in.delta) / (2.0 * in.m));
}

/// Fully supervised meta bound over n tasks:
/// 2 beta~ + (4 n beta~ + M) sqrt(ln(1/delta)/(2n)) + 2 beta.
inline double meta_bound_conventional(const BoundInputs& in)
{
  in.validate();
  const double n = in.tasks();
  return 2.0 * in.beta_tilde +
         (4.0 * n * in.beta_tilde + in.loss_bound) *
             std::sqrt(std::log(1.0 / in.delta) / (2.0 * n)) +
         2.0 * in.beta;
}

struct CorollaryResult
{
  bool holds = false;
  long long lhs = 0; // C2^2 k
  long long rhs = 0; // C1
};

/// Meta-learning has the tighter bound when C2^2 k < C1.
inline CorollaryResult corollary_check(long long c1, long long c2, long long k)
{
  if (c1 <= 0 || c2 <= 0 || k <= 0)
  {
    throw std::domain_error("corollary_check: arguments must be positive");
  }
  CorollaryResult out;
  out.lhs = c2 * c2 * k;
  out.rhs = c1;
  out.holds = out.lhs < out.rhs;
  return out;
}

/// Ratio of the meta dominant term to the WCT dominant term: sqrt(k C2^2 / C1).
inline double dominant_term_ratio(const BoundInputs& in)
{
  if (!(in.c1 > 0.0 && in.c2 > 0.0 && in.k > 0.0))
  {
    throw std::domain_error("dominant_term_ratio: C1, C2, k must be positive");
  }
  return std::sqrt(in.k * in.c2 * in.c2 / in.c1);
}

inline double dominant_term_ratio(long long c1, long long c2, long long k)
{
  BoundInputs in;
  in.c1 = static_cast<double>(c1);
  in.c2 = static_cast<double>(c2);
  in.k = static_cast<double>(k);
  return dominant_term_ratio(in);
}

}  // namespace metalab::bounds
