#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "metalab/rng.hpp"

/// Entropy-limited supervision: an annotation budget of H nats spread over m
/// balanced samples of C classes leaves each label correct with probability
/// e^{H/m} / C. All logarithms are natural (nats).
namespace metalab::entropy
{
/// (m, C, H) describing one annotation regime.
struct EntropyBudget
{
  std::size_t samples = 0;
  std::size_t classes = 0;
  double entropy = 0.0;

  /// Entropy of fully labelling the set: m ln C.
  double max_entropy() const
  {
    return static_cast<double>(samples) * std::log(static_cast<double>(classes));
  }

  void validate() const
  {
    if (samples == 0)
    {
      throw std::domain_error("EntropyBudget: sample count must be positive");
    }
    if (classes < 2)
    {
      throw std::domain_error("EntropyBudget: need at least 2 classes");
    }
    const double top = max_entropy();
    // Allow round-off when callers pass m * ln(C) computed in floating point.
    const double slack = 1e-12 * std::max(1.0, top);
    if (!(entropy >= 0.0) || entropy > top + slack)
    {
      throw std::domain_error("EntropyBudget: H = " + std::to_string(entropy) +
                              " outside [0, m ln C] = [0, " +
                              std::to_string(top) + "]");
    }
  }
};

/// Probability that any single label is correct, clamped to [1/C, 1].
inline double correct_probability(const EntropyBudget& budget)
{
  budget.validate();
  const double c = static_cast<double>(budget.classes);
  const double p =
      std::exp(budget.entropy / static_cast<double>(budget.samples)) / c;
  return std::clamp(p, 1.0 / c, 1.0);
}

/// Expected number of correctly labelled samples: (m / C) e^{H/m}.
inline double expected_correct(const EntropyBudget& budget)
{
  return static_cast<double>(budget.samples) * correct_probability(budget);
}

/// 1 - e^{H/m} / C, in [0, (C-1)/C].
inline double noise_probability(const EntropyBudget& budget)
{
  return 1.0 - correct_probability(budget);
}

/// Inverse of noise_probability: H = m ln(C (1 - p_noise)).
inline double entropy_for_noise(double p_noise, std::size_t samples,
                                std::size_t classes)
{
  if (samples == 0 || classes < 2)
  {
    throw std::domain_error("entropy_for_noise: need m > 0 and C >= 2");
  }
  const double c = static_cast<double>(classes);
  const double ceiling = (c - 1.0) / c;
  if (!(p_noise >= 0.0) || p_noise > ceiling + 1e-15)
  {
    throw std::domain_error("entropy_for_noise: p_noise = " +
                            std::to_string(p_noise) + " outside [0, (C-1)/C]");
  }
  const double h =
      static_cast<double>(samples) * std::log(c * (1.0 - std::min(p_noise, ceiling)));
  return std::max(0.0, h);
}

/// Keep each label with probability e^{H/m}/C, otherwise replace it with a
/// uniform draw over the C-1 wrong classes. Deterministic per seed.
///
/// The expectation only matches the budget when classes are balanced; the
/// function itself accepts any label vector.
inline std::vector<int> corrupt_labels(std::span<const int> labels,
                                       const EntropyBudget& budget,
                                       std::uint64_t seed)
{
  const double keep = correct_probability(budget);
  const auto classes = budget.classes;
  Rng rng(seed);
  std::vector<int> out;
  out.reserve(labels.size());
  for (const int label : labels)
  {
    if (label < 0 || static_cast<std::size_t>(label) >= classes)
    {
      throw std::out_of_range("corrupt_labels: label " + std::to_string(label) +
                              " outside [0, " + std::to_string(classes) + ")");
    }
    if (rng.uniform() < keep)
    {
      out.push_back(label);
      continue;
    }
    const auto draw = static_cast<int>(rng.index(classes - 1));
    out.push_back(draw >= label ? draw + 1 : draw);
  }
  return out;
}

/// Probability that C2 samples drawn without replacement from C1 classes of k
/// samples each all come from different classes:
///   C1! k^C2 (C1 k - C2)! / ((C1 - C2)! (C1 k)!)
/// Evaluated in log space.
inline double distinct_class_probability(std::size_t c1, std::size_t c2,
                                         std::size_t k)
{
  if (c2 < 1 || k < 1 || c2 > c1)
  {
    throw std::domain_error("distinct_class_probability: need 1 <= C2 <= C1, k >= 1");
  }
  const double n1 = static_cast<double>(c1);
  const double n2 = static_cast<double>(c2);
  const double kk = static_cast<double>(k);
  const double log_p = std::lgamma(n1 + 1.0) + n2 * std::log(kk) +
                       std::lgamma(n1 * kk - n2 + 1.0) -
                       std::lgamma(n1 - n2 + 1.0) - std::lgamma(n1 * kk + 1.0);
  return std::min(1.0, std::exp(log_p));
}

}  // namespace metalab::entropy
