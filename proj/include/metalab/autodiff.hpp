#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "metalab/tensor.hpp"

/// Reverse-mode differentiation over an immutable graph of dense tensors.
///
/// Gradients are themselves built out of graph operations, so calling grad()
/// with create_graph=true yields gradient nodes that can be differentiated
/// again. Unrolling `theta' = theta - alpha * grad(L(theta))` this way gives
/// the exact second-order outer gradient of a bi-level objective.
namespace metalab::ad
{
class Var;

namespace detail
{
struct Node;
}

using BackwardFn =
    std::function<std::vector<Var>(const std::vector<Var>& inputs,
                                   const Var& grad_out)>;

/// Handle to an immutable graph node. Cheap to copy.
class Var
{
public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const;
  std::size_t size() const;
  bool requires_grad() const;
  const std::string& op() const;
  bool valid() const { return static_cast<bool>(node_); }

  /// Identity of the underlying node, used as a gradient-map key.
  const detail::Node* id() const { return node_.get(); }

private:
  friend Var make_node(std::string op, Tensor value, std::vector<Var> inputs,
                       BackwardFn backward);
  friend Var make_leaf(Tensor value, bool requires_grad);

  explicit Var(std::shared_ptr<const detail::Node> node)
      : node_(std::move(node))
  {
  }

  std::shared_ptr<const detail::Node> node_;
};

namespace detail
{
struct Node
{
  std::string op;
  Tensor value;
  std::vector<Var> inputs;
  BackwardFn backward;
  bool requires_grad = false;
};

inline bool& grad_mode_flag()
{
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline const Tensor& Var::value() const { return node_->value; }
inline const Shape& Var::shape() const { return node_->value.shape(); }
inline std::size_t Var::size() const { return node_->value.size(); }
inline bool Var::requires_grad() const { return node_ && node_->requires_grad; }
inline const std::string& Var::op() const { return node_->op; }

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard
{
public:
  NoGradGuard() : previous_(detail::grad_mode_flag())
  {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

inline Var make_leaf(Tensor value, bool requires_grad)
{
  auto node = std::make_shared<detail::Node>();
  node->op = requires_grad ? "parameter" : "constant";
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

/// Trainable leaf.
inline Var parameter(Tensor value) { return make_leaf(std::move(value), true); }

/// Leaf that never receives a gradient.
inline Var constant(Tensor value) { return make_leaf(std::move(value), false); }

/// Record an op result. Inputs and the backward rule are kept only when the
/// result depends on a trainable leaf and recording is enabled.
inline Var make_node(std::string op, Tensor value, std::vector<Var> inputs,
                     BackwardFn backward)
{
  bool tracked = false;
  if (grad_enabled())
  {
    for (const auto& in : inputs)
    {
      tracked = tracked || in.requires_grad();
    }
  }
  auto node = std::make_shared<detail::Node>();
  node->op = std::move(op);
  node->value = std::move(value);
  node->requires_grad = tracked;
  if (tracked)
  {
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

namespace detail
{
inline void require_same_shape(const char* op, const Var& a, const Var& b)
{
  if (a.shape() != b.shape())
  {
    throw ShapeError(op, a.shape(), b.shape());
  }
}

inline void require_matrix(const char* op, const Var& a)
{
  if (a.value().rank() != 2)
  {
    throw ShapeError(std::string(op) + ": expected a matrix, got " +
                     shape_string(a.shape()));
  }
}

inline void require_scalar(const char* op, const Var& a)
{
  if (a.shape() != Shape{1})
  {
    throw ShapeError(std::string(op) + ": expected a scalar, got " +
                     shape_string(a.shape()));
  }
}

template <typename F>
Tensor map(const Tensor& a, F&& f)
{
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i)
  {
    out[i] = f(a[i]);
  }
  return Tensor(a.shape(), std::move(out));
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, F&& f)
{
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i)
  {
    out[i] = f(a[i], b[i]);
  }
  return Tensor(a.shape(), std::move(out));
}

inline Tensor matmul_values(const Tensor& a, const Tensor& b)
{
  const std::size_t n = a.rows();
  const std::size_t inner = a.cols();
  const std::size_t m = b.cols();
  std::vector<double> out(n * m, 0.0);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i)
  {
    double* row = out.data() + i * m;
    for (std::size_t k = 0; k < inner; ++k)
    {
      const double aik = av[i * inner + k];
      const double* brow = bv.data() + k * m;
      for (std::size_t j = 0; j < m; ++j)
      {
        row[j] += aik * brow[j];
      }
    }
  }
  return Tensor::matrix(n, m, std::move(out));
}

inline Tensor softmax_values(const Tensor& z)
{
  const std::size_t n = z.rows();
  const std::size_t c = z.cols();
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i)
  {
    const auto row = z.row(i);
    const double peak = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j)
    {
      out[i * c + j] = std::exp(row[j] - peak);
      total += out[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j)
    {
      out[i * c + j] /= total;
    }
  }
  return Tensor::matrix(n, c, std::move(out));
}
}  // namespace detail

// Forward declarations so backward rules can reference each other.
inline Var add(const Var& a, const Var& b);
inline Var sub(const Var& a, const Var& b);
inline Var mul(const Var& a, const Var& b);
inline Var scale(const Var& a, double factor);
inline Var mul_scalar(const Var& a, const Var& s);
inline Var matmul(const Var& a, const Var& b);
inline Var transpose(const Var& a);
inline Var sum(const Var& a);
inline Var broadcast_scalar(const Var& s, const Shape& shape);
inline Var sum_rows(const Var& a);
inline Var broadcast_rows(const Var& a, std::size_t rows);
inline Var sum_cols(const Var& a);
inline Var broadcast_cols(const Var& a, std::size_t cols);
inline Var select_cols(const Var& a, std::size_t start, std::size_t count);
inline Var pad_cols(const Var& a, std::size_t start, std::size_t total);
inline Var softmax(const Var& z);

inline Var add(const Var& a, const Var& b)
{
  detail::require_same_shape("add", a, b);
  return make_node("add",
                   detail::zip(a.value(), b.value(),
                               [](double x, double y) { return x + y; }),
                   {a, b}, [](const std::vector<Var>&, const Var& g) {
                     return std::vector<Var>{g, g};
                   });
}

inline Var sub(const Var& a, const Var& b)
{
  detail::require_same_shape("sub", a, b);
  return make_node("sub",
                   detail::zip(a.value(), b.value(),
                               [](double x, double y) { return x - y; }),
                   {a, b}, [](const std::vector<Var>&, const Var& g) {
                     return std::vector<Var>{g, scale(g, -1.0)};
                   });
}

/// Elementwise product.
inline Var mul(const Var& a, const Var& b)
{
  detail::require_same_shape("mul", a, b);
  return make_node("mul",
                   detail::zip(a.value(), b.value(),
                               [](double x, double y) { return x * y; }),
                   {a, b}, [](const std::vector<Var>& in, const Var& g) {
                     return std::vector<Var>{mul(g, in[1]), mul(g, in[0])};
                   });
}

inline Var scale(const Var& a, double factor)
{
  return make_node("scale",
                   detail::map(a.value(), [factor](double x) { return factor * x; }),
                   {a}, [factor](const std::vector<Var>&, const Var& g) {
                     return std::vector<Var>{scale(g, factor)};
                   });
}

/// a * s where s has shape [1] and may itself carry a gradient.
inline Var mul_scalar(const Var& a, const Var& s)
{
  detail::require_scalar("mul_scalar", s);
  const double factor = s.value()[0];
  return make_node(
      "mul_scalar",
      detail::map(a.value(), [factor](double x) { return factor * x; }), {a, s},
      [](const std::vector<Var>& in, const Var& g) {
        return std::vector<Var>{mul_scalar(g, in[1]), sum(mul(g, in[0]))};
      });
}

inline Var matmul(const Var& a, const Var& b)
{
  detail::require_matrix("matmul", a);
  detail::require_matrix("matmul", b);
  if (a.shape()[1] != b.shape()[0])
  {
    throw ShapeError("matmul", a.shape(), b.shape());
  }
  return make_node("matmul", detail::matmul_values(a.value(), b.value()),
                   {a, b}, [](const std::vector<Var>& in, const Var& g) {
                     return std::vector<Var>{matmul(g, transpose(in[1])),
                                             matmul(transpose(in[0]), g)};
                   });
}

inline Var transpose(const Var& a)
{
  detail::require_matrix("transpose", a);
  const auto& v = a.value();
  const std::size_t r = v.rows();
  const std::size_t c = v.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
  {
    for (std::size_t j = 0; j < c; ++j)
    {
      out[j * r + i] = v.at(i, j);
    }
  }
  return make_node("transpose", Tensor::matrix(c, r, std::move(out)), {a},
                   [](const std::vector<Var>&, const Var& g) {
                     return std::vector<Var>{transpose(g)};
                   });
}

/// Sum of all elements, shape [1].
inline Var sum(const Var& a)
{
  double total = 0.0;
  for (const double v : a.value().data())
  {
    total += v;
  }
  const Shape shape = a.shape();
  return make_node("sum", Tensor::scalar(total), {a},
                   [shape](const std::vector<Var>&, const Var& g) {
                     return std::vector<Var>{broadcast_scalar(g, shape)};
                   });
}

inline Var mean(const Var& a)
{
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

inline Var broadcast_scalar(const Var& s, const Shape& shape)
{
  detail::require_scalar("broadcast_scalar", s);
  return make_node("broadcast_scalar", Tensor::filled(shape, s.value()[0]), {s},
                   [](const std::vector<Var>&, const Var& g) {
                     return std::vector<Var>{sum(g)};
                   });
}

/// [N x C] -> [1 x C] column sums.
inline Var sum_rows(const Var& a)
{
  detail::require_matrix("sum_rows", a);
  const auto& v = a.value();
  std::vector<double> out(v.cols(), 0.0);
  for (std::size_t i = 0; i < v.rows(); ++i)
  {
    for (std::size_t j = 0; j < v.cols(); ++j)
    {
      out[j] += v.at(i, j);
    }
  }
  const std::size_t rows = v.rows();
  return make_node("sum_rows", Tensor::matrix(1, v.cols(), std::move(out)), {a},
                   [rows](const std::vector<Var>&, const Var& g) {
                     return std::vector<Var>{broadcast_rows(g, rows)};
                   });
}

/// [1 x C] -> [rows x C] by repetition.
inline Var broadcast_rows(const Var& a, std::size_t rows)
{
  detail::require_matrix("broadcast_rows", a);
  if (a.shape()[0] != 1)
  {
    throw ShapeError("broadcast_rows: expected a row vector, got " +
                     shape_string(a.shape()));
  }
  const auto& v = a.value();
  std::vector<double> out;
  out.reserve(rows * v.cols());
  for (std::size_t i = 0; i < rows; ++i)
  {
    out.insert(out.end(), v.data().begin(), v.data().end());
  }
  return make_node("broadcast_rows", Tensor::matrix(rows, v.cols(), std::move(out)),
                   {a}, [](const std::vector<Var>&, const Var& g) {
                     return std::vector<Var>{sum_rows(g)};
                   });
}

/// [N x C] -> [N x 1] row sums.
inline Var sum_cols(const Var& a)
{
  detail::require_matrix("sum_cols", a);
  const auto& v = a.value();
  std::vector<double> out(v.rows(), 0.0);
  for (std::size_t i = 0; i < v.rows(); ++i)
  {
    for (std::size_t j = 0; j < v.cols(); ++j)
    {
      out[i] += v.at(i, j);
    }
  }
  const std::size_t cols = v.cols();
  return make_node("sum_cols", Tensor::matrix(v.rows(), 1, std::move(out)), {a},
                   [cols](const std::vector<Var>&, const Var& g) {
                     return std::vector<Var>{broadcast_cols(g, cols)};
                   });
}

/// [N x 1] -> [N x cols] by repetition.
inline Var broadcast_cols(const Var& a, std::size_t cols)
{
  detail::require_matrix("broadcast_cols", a);
  if (a.shape()[1] != 1)
  {
    throw ShapeError("broadcast_cols: expected a column vector, got " +
                     shape_string(a.shape()));
  }
  const auto& v = a.value();
  std::vector<double> out(v.rows() * cols);
  for (std::size_t i = 0; i < v.rows(); ++i)
  {
    std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(i * cols), cols, v[i]);
  }
  return make_node("broadcast_cols", Tensor::matrix(v.rows(), cols, std::move(out)),
                   {a}, [](const std::vector<Var>&, const Var& g) {
                     return std::vector<Var>{sum_cols(g)};
                   });
}

/// Matrix plus a [1 x C] row vector added to every row.
inline Var add_rowvec(const Var& a, const Var& b)
{
  detail::require_matrix("add_rowvec", a);
  detail::require_matrix("add_rowvec", b);
  if (b.shape()[0] != 1 || b.shape()[1] != a.shape()[1])
  {
    throw ShapeError("add_rowvec", a.shape(), b.shape());
  }
  return add(a, broadcast_rows(b, a.shape()[0]));
}

inline Var relu(const Var& a)
{
  return make_node(
      "relu", detail::map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }),
      {a}, [](const std::vector<Var>& in, const Var& g) {
        // The mask is piecewise constant, so it carries no gradient.
        Var mask = constant(detail::map(
            in[0].value(), [](double x) { return x > 0.0 ? 1.0 : 0.0; }));
        return std::vector<Var>{mul(g, mask)};
      });
}

/// Columns [start, start + count) of a matrix.
inline Var select_cols(const Var& a, std::size_t start, std::size_t count)
{
  detail::require_matrix("select_cols", a);
  const auto& v = a.value();
  if (count == 0 || start + count > v.cols())
  {
    throw ShapeError("select_cols: columns [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of range for " +
                     shape_string(a.shape()));
  }
  std::vector<double> out(v.rows() * count);
  for (std::size_t i = 0; i < v.rows(); ++i)
  {
    for (std::size_t j = 0; j < count; ++j)
    {
      out[i * count + j] = v.at(i, start + j);
    }
  }
  const std::size_t total = v.cols();
  return make_node("select_cols", Tensor::matrix(v.rows(), count, std::move(out)),
                   {a}, [start, total](const std::vector<Var>&, const Var& g) {
                     return std::vector<Var>{pad_cols(g, start, total)};
                   });
}

/// Embed a matrix into a zero matrix of width `total` starting at `start`.
inline Var pad_cols(const Var& a, std::size_t start, std::size_t total)
{
  detail::require_matrix("pad_cols", a);
  const auto& v = a.value();
  if (start + v.cols() > total)
  {
    throw ShapeError("pad_cols: width " + std::to_string(v.cols()) +
                     " at offset " + std::to_string(start) +
                     " exceeds total " + std::to_string(total));
  }
  std::vector<double> out(v.rows() * total, 0.0);
  for (std::size_t i = 0; i < v.rows(); ++i)
  {
    for (std::size_t j = 0; j < v.cols(); ++j)
    {
      out[i * total + start + j] = v.at(i, j);
    }
  }
  const std::size_t count = v.cols();
  return make_node("pad_cols", Tensor::matrix(v.rows(), total, std::move(out)),
                   {a}, [start, count](const std::vector<Var>&, const Var& g) {
                     return std::vector<Var>{select_cols(g, start, count)};
                   });
}

/// Row-wise softmax.
inline Var softmax(const Var& z)
{
  detail::require_matrix("softmax", z);
  return make_node("softmax", detail::softmax_values(z.value()), {z},
                   [](const std::vector<Var>& in, const Var& g) {
                     // ds = s * (g - rowsum(g * s))
                     Var s = softmax(in[0]);
                     Var inner = sum_cols(mul(g, s));
                     Var centered = sub(g, broadcast_cols(inner, g.shape()[1]));
                     return std::vector<Var>{mul(s, centered)};
                   });
}

/// Mean softmax cross-entropy of logits [N x C] against integer targets.
/// Uses max-shifted log-sum-exp.
inline Var softmax_xent(const Var& logits, std::span<const int> targets)
{
  detail::require_matrix("softmax_xent", logits);
  const auto& z = logits.value();
  const std::size_t n = z.rows();
  const std::size_t c = z.cols();
  if (targets.size() != n)
  {
    throw ShapeError("softmax_xent: " + std::to_string(targets.size()) +
                     " targets for " + shape_string(logits.shape()) +
                     " logits");
  }
  auto onehot = Tensor::zeros({n, c});
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
  {
    const int t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= c)
    {
      throw std::out_of_range("softmax_xent: target " + std::to_string(t) +
                              " outside [0, " + std::to_string(c) + ")");
    }
    const auto row = z.row(i);
    const double peak = *std::max_element(row.begin(), row.end());
    double acc = 0.0;
    for (const double v : row)
    {
      acc += std::exp(v - peak);
    }
    total += peak + std::log(acc) - row[static_cast<std::size_t>(t)];
    onehot.at(i, static_cast<std::size_t>(t)) = 1.0;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  auto target_const = std::make_shared<const Tensor>(std::move(onehot));
  return make_node(
      "softmax_xent", Tensor::scalar(total * inv_n), {logits},
      [target_const, inv_n](const std::vector<Var>& in, const Var& g) {
        Var diff = sub(softmax(in[0]), constant(*target_const));
        return std::vector<Var>{mul_scalar(scale(diff, inv_n), g)};
      });
}

/// theta' = theta - alpha * g, recorded as one node. When `g` was produced
/// with create_graph=true the second-order path runs through it.
inline Var sgd_update(const Var& theta, const Var& g, double alpha)
{
  detail::require_same_shape("sgd_update", theta, g);
  return make_node("sgd_update",
                   detail::zip(theta.value(), g.value(),
                               [alpha](double t, double d) { return t - alpha * d; }),
                   {theta, g}, [alpha](const std::vector<Var>&, const Var& go) {
                     return std::vector<Var>{go, scale(go, -alpha)};
                   });
}

/// Gradients of a scalar `loss` with respect to `wrt`.
///
/// With create_graph=false the results are detached constants. With
/// create_graph=true they are graph nodes that can be differentiated again.
/// Inputs that do not influence the loss get a zero gradient.
inline std::vector<Var> grad(const Var& loss, std::span<const Var> wrt,
                             bool create_graph = false)
{
  if (!loss.valid() || loss.size() != 1)
  {
    throw std::invalid_argument("grad: loss must be a scalar, got " +
                                (loss.valid() ? shape_string(loss.shape())
                                              : std::string("<null>")));
  }

  std::vector<Var> result;
  result.reserve(wrt.size());
  if (!loss.requires_grad())
  {
    for (const auto& w : wrt)
    {
      result.push_back(constant(Tensor::zeros(w.shape())));
    }
    return result;
  }

  // Iterative post-order DFS; reversing it gives a topological order.
  std::vector<Var> order;
  {
    std::unordered_map<const detail::Node*, bool> visited;
    std::vector<std::pair<Var, std::size_t>> stack;
    stack.emplace_back(loss, 0);
    visited[loss.id()] = true;
    while (!stack.empty())
    {
      auto& [node, next] = stack.back();
      const auto& inputs = node.id()->inputs;
      if (next < inputs.size())
      {
        const Var child = inputs[next++];
        if (child.requires_grad() && !visited[child.id()])
        {
          visited[child.id()] = true;
          stack.emplace_back(child, 0);
        }
      }
      else
      {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::unique_ptr<NoGradGuard> guard;
  if (!create_graph)
  {
    guard = std::make_unique<NoGradGuard>();
  }

  std::unordered_map<const detail::Node*, Var> grads;
  grads.emplace(loss.id(), constant(Tensor::filled(loss.shape(), 1.0)));
  for (auto it = order.rbegin(); it != order.rend(); ++it)
  {
    const detail::Node* node = it->id();
    const auto found = grads.find(node);
    if (found == grads.end() || !node->backward)
    {
      continue;
    }
    const Var g = found->second;
    const auto parts = node->backward(node->inputs, g);
    for (std::size_t i = 0; i < node->inputs.size(); ++i)
    {
      const Var& in = node->inputs[i];
      if (!in.requires_grad() || !parts[i].valid())
      {
        continue;
      }
      auto slot = grads.find(in.id());
      if (slot == grads.end())
      {
        grads.emplace(in.id(), parts[i]);
      }
      else
      {
        slot->second = add(slot->second, parts[i]);
      }
    }
  }

  for (const auto& w : wrt)
  {
    const auto found = grads.find(w.id());
    if (found == grads.end())
    {
      result.push_back(constant(Tensor::zeros(w.shape())));
    }
    else if (create_graph)
    {
      result.push_back(found->second);
    }
    else
    {
      result.push_back(constant(found->second.value()));
    }
  }
  return result;
}

/// Gradient values for every trainable leaf reachable from `loss`.
class GradientMap
{
public:
  const Tensor* find(const Var& leaf) const
  {
    const auto it = grads_.find(leaf.id());
    return it == grads_.end() ? nullptr : &it->second;
  }

  /// Gradient of `leaf`, or zeros if it does not influence the loss.
  Tensor at(const Var& leaf) const
  {
    const auto* g = find(leaf);
    return g ? *g : Tensor::zeros(leaf.shape());
  }

  std::size_t size() const { return grads_.size(); }

private:
  friend GradientMap backward(const Var& loss);
  std::unordered_map<const detail::Node*, Tensor> grads_;
};

inline GradientMap backward(const Var& loss)
{
  if (!loss.valid() || loss.size() != 1)
  {
    throw std::invalid_argument("backward: loss must be a scalar");
  }
  GradientMap map;
  if (!loss.requires_grad())
  {
    return map;
  }
  // Collect leaves, then reuse grad() so both entry points share one path.
  std::vector<Var> leaves;
  std::vector<Var> stack{loss};
  std::unordered_map<const detail::Node*, bool> seen;
  seen[loss.id()] = true;
  while (!stack.empty())
  {
    const Var v = stack.back();
    stack.pop_back();
    if (v.id()->inputs.empty() && v.requires_grad())
    {
      leaves.push_back(v);
    }
    for (const auto& in : v.id()->inputs)
    {
      if (in.requires_grad() && !seen[in.id()])
      {
        seen[in.id()] = true;
        stack.push_back(in);
      }
    }
  }
  const auto g = grad(loss, leaves, false);
  for (std::size_t i = 0; i < leaves.size(); ++i)
  {
    map.grads_.emplace(leaves[i].id(), g[i].value());
  }
  return map;
}

/// Builds a scalar loss from parameter handles.
using LossBuilder = std::function<Var(const std::vector<Var>& params)>;

/// Largest relative error between analytic gradients and central differences
/// over every parameter element: |analytic - fd| / (|fd| + 1e-12).
inline double grad_check_fd(const LossBuilder& build,
                            const std::vector<Tensor>& params, double epsilon)
{
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3))
  {
    throw std::invalid_argument("grad_check_fd: epsilon must lie in [1e-7, 1e-3]");
  }
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params)
  {
    leaves.push_back(parameter(p));
  }
  const Var loss = build(leaves);
  const auto analytic = grad(loss, leaves, false);

  // Fresh trainable leaves each time: builders may take inner gradients.
  const auto evaluate = [&](const std::vector<Tensor>& values) {
    std::vector<Var> fresh;
    fresh.reserve(values.size());
    for (const auto& v : values)
    {
      fresh.push_back(parameter(v));
    }
    return build(fresh).value().item();
  };

  const double base_a = evaluate(params);
  const double base_b = evaluate(params);
  if (base_a != base_b || base_a != loss.value().item())
  {
    throw std::runtime_error("grad_check_fd: loss builder is not deterministic");
  }

  double worst = 0.0;
  auto probe = params;
  for (std::size_t p = 0; p < params.size(); ++p)
  {
    for (std::size_t i = 0; i < params[p].size(); ++i)
    {
      const double original = params[p][i];
      probe[p][i] = original + epsilon;
      const double up = evaluate(probe);
      probe[p][i] = original - epsilon;
      const double down = evaluate(probe);
      probe[p][i] = original;
      const double fd = (up - down) / (2.0 * epsilon);
      const double err =
          std::abs(analytic[p].value()[i] - fd) / (std::abs(fd) + 1e-12);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace metalab::ad
