#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "metalab/assignment.hpp"
#include "metalab/autodiff.hpp"
#include "metalab/model.hpp"
#include "metalab/rng.hpp"
#include "metalab/stability.hpp"
#include "metalab/tasks.hpp"

namespace metalab
{
enum class AdaptMode
{
  second_order,
  first_order,
  head_only,
};

inline const char* to_string(AdaptMode mode)
{
  switch (mode)
  {
    case AdaptMode::second_order: return "second_order";
    case AdaptMode::first_order: return "first_order";
    case AdaptMode::head_only: return "head_only";
  }
  return "?";
}

inline AdaptMode adapt_mode_from_string(const std::string& s)
{
  if (s == "second_order") return AdaptMode::second_order;
  if (s == "first_order") return AdaptMode::first_order;
  if (s == "head_only") return AdaptMode::head_only;
  throw std::invalid_argument("unknown adapt mode '" + s + "'");
}

/// Snapshot the meta-scaler compares the adapted model against.
enum class ScalerReference
{
  penultimate,
  initial,
};

inline ScalerReference scaler_reference_from_string(const std::string& s)
{
  if (s == "penultimate") return ScalerReference::penultimate;
  if (s == "initial") return ScalerReference::initial;
  throw std::invalid_argument("unknown scaler reference '" + s + "'");
}

inline const char* to_string(ScalerReference r)
{
  return r == ScalerReference::penultimate ? "penultimate" : "initial";
}

/// Representation the meta-scaler compares.
enum class ScalerRepresentation
{
  /// Body output feeding the head.
  features,
  /// The task's group-restricted logits.
  logits,
};

inline ScalerRepresentation scaler_representation_from_string(const std::string& s)
{
  if (s == "features") return ScalerRepresentation::features;
  if (s == "logits") return ScalerRepresentation::logits;
  throw std::invalid_argument("unknown scaler representation '" + s + "'");
}

inline const char* to_string(ScalerRepresentation r)
{
  return r == ScalerRepresentation::features ? "features" : "logits";
}

struct TrainConfig
{
  double alpha = 0.05;
  double eta = 0.001;
  std::size_t inner_steps = 5;
  std::size_t meta_batch = 8;
  std::size_t epochs = 30000;
  AdaptMode mode = AdaptMode::second_order;
  bool scaler_enabled = true;
  ScalerReference scaler_reference = ScalerReference::penultimate;
  ScalerRepresentation scaler_representation = ScalerRepresentation::features;
  double variance_threshold = 0.99;
  /// Draw a head group per task; otherwise every task uses group 0.
  bool random_groups = true;
  /// Shuffle the cluster-id to output mapping per task.
  bool permute_labels = true;
  std::uint64_t seed = 0;

  void validate() const
  {
    if (!(alpha >= 0.0) || !(eta >= 0.0))
    {
      throw std::invalid_argument("TrainConfig: alpha and eta must be >= 0");
    }
    if (inner_steps < 1)
    {
      throw std::invalid_argument("TrainConfig: inner_steps must be >= 1");
    }
    if (meta_batch < 1)
    {
      throw std::invalid_argument("TrainConfig: meta_batch must be >= 1");
    }
    if (!(variance_threshold > 0.0 && variance_threshold <= 1.0))
    {
      throw std::invalid_argument("TrainConfig: variance_threshold must lie in (0, 1]");
    }
  }
};

/// Raised when a loss turns non-finite.
class NumericalError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

namespace detail
{
inline void require_finite(const ad::Var& loss, const char* where, std::size_t step)
{
  if (!loss.value().all_finite())
  {
    std::ostringstream msg;
    msg << where << ": non-finite loss " << loss.value()[0] << " at step " << step
        << "; lower the learning rate";
    throw NumericalError(msg.str());
  }
}

inline std::vector<int> permuted(std::span<const int> labels, std::span<const std::size_t> perm)
{
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
  {
    out[i] = static_cast<int>(perm[static_cast<std::size_t>(labels[i])]);
  }
  return out;
}
}  // namespace detail

struct AdaptResult
{
  ParamVars params;
  /// Parameter values before the first step and after each step.
  std::vector<ModelParams> trajectory;
};

/// Inner-loop adaptation on a support split. With `track_outer` the steps
/// stay in the graph so the caller can differentiate through them (second
/// order, or first order with the inner gradient detached). Without it each
/// step starts from fresh leaves and nothing accumulates.
inline AdaptResult inner_adapt(const Architecture& arch, const ParamVars& start,
                               const Split& support, const HeadView& view,
                               const TrainConfig& config, std::size_t steps, bool track_outer,
                               bool record_trajectory = false)
{
  AdaptResult out;
  out.params = start;
  if (record_trajectory)
  {
    out.trajectory.push_back(to_params(arch, out.params));
  }
  const ad::Var x = ad::constant(support.inputs);
  const std::size_t head = 2 * arch.body_layers();
  for (std::size_t step = 0; step < steps; ++step)
  {
    if (!track_outer)
    {
      for (auto& p : out.params)
      {
        p = ad::parameter(p.value());
      }
    }
    const ad::Var loss =
        ad::softmax_xent(forward_logits(arch, out.params, x, view), support.labels);
    detail::require_finite(loss, "inner_adapt", step);

    const bool head_only = config.mode == AdaptMode::head_only;
    const bool create_graph = track_outer && config.mode != AdaptMode::first_order;
    const std::size_t first = head_only ? head : 0;
    const std::span<const ad::Var> wrt(out.params.data() + first, out.params.size() - first);
    const auto grads = ad::grad(loss, wrt, create_graph);
    for (std::size_t i = 0; i < grads.size(); ++i)
    {
      out.params[first + i] = ad::sgd_update(out.params[first + i], grads[i], config.alpha);
    }
    if (record_trajectory)
    {
      out.trajectory.push_back(to_params(arch, out.params));
    }
  }
  if (!track_outer)
  {
    for (auto& p : out.params)
    {
      p = ad::constant(p.value());
    }
  }
  return out;
}

inline ad::Var query_loss(const Architecture& arch, const ParamVars& adapted, const Split& query,
                          const HeadView& view)
{
  if (query.size() == 0)
  {
    throw std::invalid_argument("query_loss: empty query set");
  }
  return ad::softmax_xent(forward_logits(arch, adapted, ad::constant(query.inputs), view),
                          query.labels);
}

/// Query loss after adapting `params` on the task's support set; the graph
/// runs through the inner steps so it can be checked against finite
/// differences. `steps` may be 0.
inline ad::Var meta_objective(const Architecture& arch, const ParamVars& params,
                              const Task& task, const HeadView& view,
                              const TrainConfig& config, std::size_t steps)
{
  const auto adapted = inner_adapt(arch, params, task.support, view, config, steps, true);
  return query_loss(arch, adapted.params, task.query, view);
}

struct TaskGradient
{
  std::vector<Tensor> grads;
  double loss = 0.0;
  double sigma = 1.0;
  HeadView view;
};

/// Gradient of one task's query loss (after adaptation) with respect to the
/// meta parameters, plus its meta-scaler weight. The weight is not applied
/// to `grads`.
inline TaskGradient task_outer_gradient(const ModelParams& meta, const Task& task,
                                        const HeadView& view, const TrainConfig& config)
{
  const ParamVars leaves = as_parameters(meta);
  const bool need_trace = config.scaler_enabled;
  const auto adapted = inner_adapt(meta.arch, leaves, task.support, view, config,
                                   config.inner_steps, true, need_trace);
  const ad::Var loss = query_loss(meta.arch, adapted.params, task.query, view);
  detail::require_finite(loss, "query_loss", config.inner_steps);

  TaskGradient out;
  out.view = view;
  out.loss = loss.value()[0];
  const auto g = ad::grad(loss, leaves, false);
  for (const auto& v : g)
  {
    out.grads.push_back(v.value());
  }
  if (config.scaler_enabled)
  {
    const auto& traj = adapted.trajectory;
    const ModelParams* reference = nullptr;
    // A single step has no penultimate adapted state; the weight stays 1.
    if (config.scaler_reference == ScalerReference::initial && traj.size() >= 2)
    {
      reference = &traj.front();
    }
    else if (config.scaler_reference == ScalerReference::penultimate && traj.size() >= 3)
    {
      reference = &traj[traj.size() - 2];
    }
    if (config.scaler_representation == ScalerRepresentation::features || reference == nullptr)
    {
      out.sigma = stability::meta_scaler(traj.back(), reference, task.query.inputs,
                                         config.variance_threshold);
    }
    else
    {
      out.sigma = stability::svcca(logits(traj.back(), task.query.inputs, view),
                                   logits(*reference, task.query.inputs, view),
                                   config.variance_threshold);
    }
  }
  return out;
}

struct MetaStepStats
{
  std::vector<double> sigmas;
  std::vector<double> losses;
  /// L2 norm of each task's scaled gradient.
  std::vector<double> contributions;
  std::vector<HeadView> views;

  double mean_loss() const
  {
    return losses.empty() ? 0.0
                          : std::accumulate(losses.begin(), losses.end(), 0.0) /
                                static_cast<double>(losses.size());
  }
};

/// Task relabelled by `perm` (old label -> new label).
inline Task relabel(const Task& task, std::span<const std::size_t> perm)
{
  Task out = task;
  out.support.labels = detail::permuted(task.support.labels, perm);
  out.query.labels = detail::permuted(task.query.labels, perm);
  return out;
}

/// Head group and label order for each task of a batch, drawn from `rng`.
inline std::vector<std::pair<HeadView, std::vector<std::size_t>>> draw_task_layout(
    std::span<const Task> tasks, const Architecture& arch, const TrainConfig& config, Rng& rng)
{
  std::vector<std::pair<HeadView, std::vector<std::size_t>>> out;
  for (const auto& t : tasks)
  {
    if (t.way > arch.c_max)
    {
      throw std::invalid_argument("task way " + std::to_string(t.way) + " exceeds c_max " +
                                  std::to_string(arch.c_max));
    }
    HeadView view{config.random_groups ? rng.index(arch.num_groups) : 0, t.way};
    std::vector<std::size_t> perm(t.way);
    std::iota(perm.begin(), perm.end(), 0);
    if (config.permute_labels)
    {
      perm = rng.permutation(t.way);
    }
    out.emplace_back(view, std::move(perm));
  }
  return out;
}

/// Sum over tasks of sigma_i * grad L_i, divided by the batch size; this is
/// the step direction of the outer update.
inline std::vector<Tensor> outer_gradient(const ModelParams& meta, std::span<const Task> tasks,
                                          std::span<const HeadView> views,
                                          const TrainConfig& config,
                                          MetaStepStats* stats = nullptr)
{
  if (tasks.empty())
  {
    throw std::invalid_argument("outer_gradient: empty task batch");
  }
  std::vector<Tensor> total;
  for (const auto& t : meta.tensors)
  {
    total.push_back(Tensor::zeros(t.shape()));
  }
  const double inv_n = 1.0 / static_cast<double>(tasks.size());
  for (std::size_t i = 0; i < tasks.size(); ++i)
  {
    const auto tg = task_outer_gradient(meta, tasks[i], views[i], config);
    double norm2 = 0.0;
    for (std::size_t j = 0; j < total.size(); ++j)
    {
      auto dst = total[j].data();
      const auto src = tg.grads[j].data();
      for (std::size_t e = 0; e < dst.size(); ++e)
      {
        const double v = tg.sigma * src[e];
        dst[e] += inv_n * v;
        norm2 += v * v;
      }
    }
    if (stats)
    {
      stats->sigmas.push_back(tg.sigma);
      stats->losses.push_back(tg.loss);
      stats->contributions.push_back(std::sqrt(norm2));
      stats->views.push_back(views[i]);
    }
  }
  return total;
}

/// One outer update: meta <- meta - eta * outer_gradient.
inline MetaStepStats meta_step(ModelParams& meta, std::span<const Task> tasks,
                               const TrainConfig& config, Rng& rng)
{
  if (tasks.empty())
  {
    throw std::invalid_argument("meta_step: empty task batch");
  }
  const auto layout = draw_task_layout(tasks, meta.arch, config, rng);
  std::vector<Task> prepared;
  std::vector<HeadView> views;
  for (std::size_t i = 0; i < tasks.size(); ++i)
  {
    prepared.push_back(relabel(tasks[i], layout[i].second));
    views.push_back(layout[i].first);
  }
  MetaStepStats stats;
  const auto g = outer_gradient(meta, prepared, views, config, &stats);
  for (std::size_t j = 0; j < g.size(); ++j)
  {
    auto dst = meta.tensors[j].data();
    const auto src = g[j].data();
    for (std::size_t e = 0; e < dst.size(); ++e)
    {
      dst[e] -= config.eta * src[e];
    }
  }
  return stats;
}

/// Source of training tasks for one outer step.
using TaskSource = std::function<std::vector<Task>(std::size_t epoch, Rng& rng)>;

/// Called after each outer step with the updated parameters.
using EpochHook = std::function<void(std::size_t epoch, const ModelParams& params,
                                     const MetaStepStats& stats)>;

/// Bi-level training loop.
inline ModelParams meta_train(ModelParams meta, const TaskSource& source,
                              const TrainConfig& config, const EpochHook& hook = {})
{
  config.validate();
  Rng rng(derive_seed(config.seed, 0x6d657461));
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch)
  {
    const auto tasks = source(epoch, rng);
    const auto stats = meta_step(meta, tasks, config, rng);
    if (hook)
    {
      hook(epoch, meta, stats);
    }
  }
  return meta;
}

/// Single-level multi-task step: each task trains its head group directly
/// on support and query together, no inner loop.
inline MetaStepStats single_level_step(ModelParams& params, std::span<const Task> tasks,
                                       const TrainConfig& config, Rng& rng)
{
  const auto layout = draw_task_layout(tasks, params.arch, config, rng);
  MetaStepStats stats;
  std::vector<Tensor> total;
  for (const auto& t : params.tensors)
  {
    total.push_back(Tensor::zeros(t.shape()));
  }
  const double inv_n = 1.0 / static_cast<double>(tasks.size());
  for (std::size_t i = 0; i < tasks.size(); ++i)
  {
    const Task task = relabel(tasks[i], layout[i].second);
    const auto leaves = as_parameters(params);
    const ad::Var a = ad::softmax_xent(
        forward_logits(params.arch, leaves, ad::constant(task.support.inputs), layout[i].first),
        task.support.labels);
    const ad::Var b = ad::softmax_xent(
        forward_logits(params.arch, leaves, ad::constant(task.query.inputs), layout[i].first),
        task.query.labels);
    const double ns = static_cast<double>(task.support.size());
    const double nq = static_cast<double>(task.query.size());
    const ad::Var loss = ad::add(ad::scale(a, ns / (ns + nq)), ad::scale(b, nq / (ns + nq)));
    detail::require_finite(loss, "single_level_step", i);
    const auto g = ad::grad(loss, leaves);
    for (std::size_t j = 0; j < total.size(); ++j)
    {
      auto dst = total[j].data();
      const auto src = g[j].value().data();
      for (std::size_t e = 0; e < dst.size(); ++e)
      {
        dst[e] += inv_n * src[e];
      }
    }
    stats.losses.push_back(loss.value()[0]);
    stats.sigmas.push_back(1.0);
    stats.views.push_back(layout[i].first);
  }
  for (std::size_t j = 0; j < total.size(); ++j)
  {
    auto dst = params.tensors[j].data();
    const auto src = total[j].data();
    for (std::size_t e = 0; e < dst.size(); ++e)
    {
      dst[e] -= config.eta * src[e];
    }
  }
  return stats;
}

inline ModelParams multitask_train(ModelParams params, const TaskSource& source,
                                   const TrainConfig& config, const EpochHook& hook = {})
{
  config.validate();
  Rng rng(derive_seed(config.seed, 0x6d746c));
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch)
  {
    const auto tasks = source(epoch, rng);
    const auto stats = single_level_step(params, tasks, config, rng);
    if (hook)
    {
      hook(epoch, params, stats);
    }
  }
  return params;
}

struct WctConfig
{
  double lr = 0.05;
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const
  {
    if (!(lr > 0.0) || batch_size == 0)
    {
      throw std::invalid_argument("WctConfig: lr must be > 0 and batch_size >= 1");
    }
  }
};

/// Class ids of `labels` mapped to 0..C-1 in increasing order.
inline std::vector<int> compact_labels(std::span<const int> labels, std::size_t* num_classes = nullptr)
{
  std::map<int, int> ids;
  for (const int l : labels)
  {
    ids.emplace(l, 0);
  }
  int next = 0;
  for (auto& [_, v] : ids)
  {
    v = next++;
  }
  std::vector<int> out;
  out.reserve(labels.size());
  for (const int l : labels)
  {
    out.push_back(ids.at(l));
  }
  if (num_classes)
  {
    *num_classes = ids.size();
  }
  return out;
}

/// Called once per pass over the data.
using WctHook = std::function<void(std::size_t epoch, const ModelParams& params, double loss)>;

/// Whole-class training: plain mini-batch cross-entropy over every class at
/// once, using the (possibly corrupted) training labels. The head must have
/// num_groups == 1 and c_max equal to the class count.
inline ModelParams wct_train(ModelParams params, const Dataset& data, const WctConfig& config,
                             const WctHook& hook = {})
{
  config.validate();
  std::size_t classes = 0;
  const auto targets = compact_labels(data.labels, &classes);
  if (params.arch.num_groups != 1 || params.arch.c_max != std::max<std::size_t>(classes, 2))
  {
    throw std::invalid_argument("wct_train: head must be one group of width " +
                                std::to_string(classes));
  }
  const HeadView view{0, params.arch.c_max};
  Rng rng(derive_seed(config.seed, 0x776374));
  const std::size_t n = data.size();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch)
  {
    const auto order = rng.permutation(n);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size)
    {
      const std::size_t stop = std::min(n, start + config.batch_size);
      const std::span<const std::size_t> rows(order.data() + start, stop - start);
      std::vector<int> y;
      for (const auto r : rows)
      {
        y.push_back(targets[r]);
      }
      const auto leaves = as_parameters(params);
      const ad::Var loss = ad::softmax_xent(
          forward_logits(params.arch, leaves, ad::constant(gather_rows(data.inputs, rows)), view),
          y);
      detail::require_finite(loss, "wct_train", epoch);
      const auto g = ad::grad(loss, leaves);
      for (std::size_t j = 0; j < g.size(); ++j)
      {
        auto dst = params.tensors[j].data();
        const auto src = g[j].value().data();
        for (std::size_t e = 0; e < dst.size(); ++e)
        {
          dst[e] -= config.lr * src[e];
        }
      }
      epoch_loss += loss.value()[0];
      ++batches;
    }
    if (hook)
    {
      hook(epoch, params, epoch_loss / static_cast<double>(batches));
    }
  }
  return params;
}

enum class EvalMode
{
  /// Adapt the head group 0 view on the support set, then predict.
  finetune,
  /// Fit a fresh softmax regression on support features.
  logistic_probe,
  /// No adaptation: argmax of the group-0 logits, matched to the true
  /// labels by optimal assignment.
  zero_shot,
};

inline EvalMode eval_mode_from_string(const std::string& s)
{
  if (s == "finetune") return EvalMode::finetune;
  if (s == "logistic_probe") return EvalMode::logistic_probe;
  if (s == "zero_shot") return EvalMode::zero_shot;
  throw std::invalid_argument("unknown eval mode '" + s + "'");
}

struct EvalConfig
{
  EvalMode mode = EvalMode::finetune;
  double lr = 0.05;
  std::size_t steps = 5;
  AdaptMode adapt = AdaptMode::second_order;
};

struct EvalResult
{
  double mean = 0.0;
  /// Half-width of the normal-approximation 95% interval.
  double ci95 = 0.0;
  std::vector<double> per_episode;
};

inline EvalResult summarize(std::vector<double> values)
{
  EvalResult r;
  r.per_episode = std::move(values);
  const double n = static_cast<double>(r.per_episode.size());
  if (r.per_episode.empty())
  {
    return r;
  }
  r.mean = std::accumulate(r.per_episode.begin(), r.per_episode.end(), 0.0) / n;
  if (r.per_episode.size() > 1)
  {
    double ss = 0.0;
    for (const double v : r.per_episode)
    {
      ss += (v - r.mean) * (v - r.mean);
    }
    r.ci95 = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  return r;
}

/// Softmax regression on fixed features; returns query predictions.
inline std::vector<int> logistic_probe_predict(const Tensor& support_x, std::span<const int> support_y,
                                               std::size_t way, const Tensor& query_x,
                                               double lr, std::size_t steps)
{
  const std::size_t d = support_x.cols();
  ad::Var w = ad::parameter(Tensor::zeros({d, way}));
  ad::Var b = ad::parameter(Tensor::zeros({1, way}));
  const ad::Var x = ad::constant(support_x);
  for (std::size_t s = 0; s < steps; ++s)
  {
    const ad::Var loss = ad::softmax_xent(ad::add_rowvec(ad::matmul(x, w), b), support_y);
    const std::vector<ad::Var> wrt{w, b};
    const auto g = ad::grad(loss, wrt);
    w = ad::parameter(ad::sgd_update(w, g[0], lr).value());
    b = ad::parameter(ad::sgd_update(b, g[1], lr).value());
  }
  ad::NoGradGuard guard;
  return argmax_rows(ad::add_rowvec(ad::matmul(ad::constant(query_x), w), b).value());
}

inline double accuracy(std::span<const int> predicted, std::span<const int> truth)
{
  if (predicted.size() != truth.size() || truth.empty())
  {
    throw std::invalid_argument("accuracy: length mismatch or empty");
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i)
  {
    hit += predicted[i] == truth[i] ? 1 : 0;
  }
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

/// Query accuracy of one episode. Labels in the episode are 0..way-1.
inline double evaluate_episode(const ModelParams& model, const Task& episode,
                               const EvalConfig& config)
{
  switch (config.mode)
  {
    case EvalMode::finetune:
    {
      if (episode.way > model.arch.c_max)
      {
        throw std::invalid_argument("evaluate_episode: way exceeds head group width");
      }
      TrainConfig tc;
      tc.alpha = config.lr;
      tc.mode = config.adapt;
      const HeadView view{0, episode.way};
      const auto adapted = inner_adapt(model.arch, as_constants(model), episode.support, view,
                                       tc, config.steps, false);
      const auto pred = argmax_rows(
          logits(to_params(model.arch, adapted.params), episode.query.inputs, view));
      return accuracy(pred, episode.query.labels);
    }
    case EvalMode::logistic_probe:
    {
      const auto pred = logistic_probe_predict(features(model, episode.support.inputs),
                                               episode.support.labels, episode.way,
                                               features(model, episode.query.inputs), config.lr,
                                               config.steps);
      return accuracy(pred, episode.query.labels);
    }
    case EvalMode::zero_shot:
    {
      const std::size_t way = std::min(episode.way, model.arch.c_max);
      const auto pred = argmax_rows(logits(model, episode.query.inputs, HeadView{0, way}));
      const auto& truth =
          episode.query.true_labels.empty() ? episode.query.labels : episode.query.true_labels;
      return matched_accuracy(pred, truth);
    }
  }
  return 0.0;
}

inline EvalResult evaluate_episodes(const ModelParams& model, std::span<const Task> episodes,
                                    const EvalConfig& config)
{
  std::vector<double> acc;
  acc.reserve(episodes.size());
  for (const auto& e : episodes)
  {
    acc.push_back(evaluate_episode(model, e, config));
  }
  return summarize(std::move(acc));
}

}  // namespace metalab
