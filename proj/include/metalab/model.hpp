#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "metalab/autodiff.hpp"
#include "metalab/rng.hpp"
#include "metalab/tensor.hpp"

namespace metalab
{
/// MLP body followed by a grouped linear head.
///
/// `layer_dims` lists the input width and then each hidden width, so
/// {16, 32, 32} is two ReLU layers 16->32->32 and a head of width
/// num_groups * c_max on top. A single entry means no body.
struct Architecture
{
  std::vector<std::size_t> layer_dims;
  std::size_t num_groups = 1;
  std::size_t c_max = 2;

  std::size_t body_layers() const { return layer_dims.size() - 1; }
  std::size_t input_dim() const { return layer_dims.front(); }
  std::size_t feature_dim() const { return layer_dims.back(); }
  std::size_t head_width() const { return num_groups * c_max; }
  /// Body layers plus the head.
  std::size_t num_layers() const { return body_layers() + 1; }

  void validate() const
  {
    if (layer_dims.empty())
    {
      throw std::invalid_argument("Architecture: layer_dims is empty");
    }
    for (const auto d : layer_dims)
    {
      if (d == 0)
      {
        throw std::invalid_argument("Architecture: zero layer width");
      }
    }
    if (num_groups == 0 || c_max < 2)
    {
      throw std::invalid_argument("Architecture: need num_groups >= 1 and c_max >= 2");
    }
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// Parameter tensors in the order W0, b0, W1, b1, ..., W_head, b_head.
/// Weights are [in x out], biases [1 x out].
struct ModelParams
{
  Architecture arch;
  std::vector<Tensor> tensors;

  const Tensor& weight(std::size_t layer) const { return tensors.at(2 * layer); }
  const Tensor& bias(std::size_t layer) const { return tensors.at(2 * layer + 1); }
  Tensor& weight(std::size_t layer) { return tensors.at(2 * layer); }
  Tensor& bias(std::size_t layer) { return tensors.at(2 * layer + 1); }
  const Tensor& head_weight() const { return weight(arch.body_layers()); }
  const Tensor& head_bias() const { return bias(arch.body_layers()); }

  std::size_t num_params() const
  {
    std::size_t n = 0;
    for (const auto& t : tensors)
    {
      n += t.size();
    }
    return n;
  }

  void validate() const
  {
    arch.validate();
    if (tensors.size() != 2 * arch.num_layers())
    {
      throw std::invalid_argument("ModelParams: expected " +
                                  std::to_string(2 * arch.num_layers()) +
                                  " tensors, got " + std::to_string(tensors.size()));
    }
    for (std::size_t l = 0; l < arch.num_layers(); ++l)
    {
      const std::size_t in = arch.layer_dims[std::min(l, arch.body_layers())];
      const std::size_t out =
          l < arch.body_layers() ? arch.layer_dims[l + 1] : arch.head_width();
      const Shape w{in, out};
      const Shape b{1, out};
      if (weight(l).shape() != w || bias(l).shape() != b)
      {
        throw ShapeError("ModelParams layer " + std::to_string(l) + ": expected " +
                         shape_string(w) + "/" + shape_string(b) + ", got " +
                         shape_string(weight(l).shape()) + "/" +
                         shape_string(bias(l).shape()));
      }
    }
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
inline ModelParams init_model(std::vector<std::size_t> layer_dims, std::size_t num_groups,
                              std::size_t c_max, std::uint64_t seed)
{
  ModelParams p;
  p.arch = Architecture{std::move(layer_dims), num_groups, c_max};
  p.arch.validate();
  Rng rng(seed);
  for (std::size_t l = 0; l < p.arch.num_layers(); ++l)
  {
    const std::size_t in = p.arch.layer_dims[std::min(l, p.arch.body_layers())];
    const std::size_t out =
        l < p.arch.body_layers() ? p.arch.layer_dims[l + 1] : p.arch.head_width();
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> w(in * out);
    for (auto& v : w)
    {
      v = rng.uniform(-bound, bound);
    }
    p.tensors.push_back(Tensor::matrix(in, out, std::move(w)));
    p.tensors.push_back(Tensor::zeros({1, out}));
  }
  return p;
}

/// Which slice of the head a task trains: columns
/// [group * c_max, group * c_max + way).
struct HeadView
{
  std::size_t group = 0;
  std::size_t way = 2;

  void validate(const Architecture& arch) const
  {
    if (way < 2 || way > arch.c_max)
    {
      throw std::invalid_argument("HeadView: way " + std::to_string(way) +
                                  " outside [2, " + std::to_string(arch.c_max) + "]");
    }
    if (group >= arch.num_groups)
    {
      throw std::invalid_argument("HeadView: group " + std::to_string(group) +
                                  " >= " + std::to_string(arch.num_groups));
    }
  }
};

/// Graph-side handles for a parameter set.
using ParamVars = std::vector<ad::Var>;

inline ParamVars as_parameters(const ModelParams& p)
{
  ParamVars out;
  out.reserve(p.tensors.size());
  for (const auto& t : p.tensors)
  {
    out.push_back(ad::parameter(t));
  }
  return out;
}

inline ParamVars as_constants(const ModelParams& p)
{
  ParamVars out;
  out.reserve(p.tensors.size());
  for (const auto& t : p.tensors)
  {
    out.push_back(ad::constant(t));
  }
  return out;
}

inline ModelParams to_params(const Architecture& arch, const ParamVars& vars)
{
  ModelParams p;
  p.arch = arch;
  for (const auto& v : vars)
  {
    p.tensors.push_back(v.value());
  }
  return p;
}

/// Body output (the head's input).
inline ad::Var forward_features(const Architecture& arch, const ParamVars& params,
                                const ad::Var& x)
{
  ad::Var h = x;
  for (std::size_t l = 0; l < arch.body_layers(); ++l)
  {
    h = ad::relu(ad::add_rowvec(ad::matmul(h, params[2 * l]), params[2 * l + 1]));
  }
  return h;
}

/// Logits restricted to one head group. Slicing the weights before the
/// product keeps unselected columns out of the graph entirely.
inline ad::Var forward_logits(const Architecture& arch, const ParamVars& params,
                              const ad::Var& x, const HeadView& view)
{
  view.validate(arch);
  const std::size_t hl = arch.body_layers();
  const std::size_t start = view.group * arch.c_max;
  const ad::Var w = ad::select_cols(params[2 * hl], start, view.way);
  const ad::Var b = ad::select_cols(params[2 * hl + 1], start, view.way);
  return ad::add_rowvec(ad::matmul(forward_features(arch, params, x), w), b);
}

/// Logits over the whole head width.
inline ad::Var forward_full(const Architecture& arch, const ParamVars& params,
                            const ad::Var& x)
{
  const std::size_t hl = arch.body_layers();
  return ad::add_rowvec(ad::matmul(forward_features(arch, params, x), params[2 * hl]),
                        params[2 * hl + 1]);
}

/// Output of layer `layer` on `inputs` without building a graph. Layers
/// 0..body_layers-1 are the ReLU body layers; body_layers is the full head.
inline Tensor layer_activations(const ModelParams& p, const Tensor& inputs, std::size_t layer)
{
  if (layer >= p.arch.num_layers())
  {
    throw std::out_of_range("layer_activations: layer " + std::to_string(layer) +
                            " >= " + std::to_string(p.arch.num_layers()));
  }
  ad::NoGradGuard guard;
  const auto vars = as_constants(p);
  ad::Var h = ad::constant(inputs);
  for (std::size_t l = 0; l <= layer; ++l)
  {
    h = ad::add_rowvec(ad::matmul(h, vars[2 * l]), vars[2 * l + 1]);
    if (l < p.arch.body_layers())
    {
      h = ad::relu(h);
    }
  }
  return h.value();
}

inline Tensor features(const ModelParams& p, const Tensor& inputs)
{
  ad::NoGradGuard guard;
  return forward_features(p.arch, as_constants(p), ad::constant(inputs)).value();
}

inline Tensor logits(const ModelParams& p, const Tensor& inputs, const HeadView& view)
{
  ad::NoGradGuard guard;
  return forward_logits(p.arch, as_constants(p), ad::constant(inputs), view).value();
}

/// Row-wise argmax.
inline std::vector<int> argmax_rows(const Tensor& scores)
{
  std::vector<int> out(scores.rows());
  for (std::size_t i = 0; i < scores.rows(); ++i)
  {
    const auto row = scores.row(i);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

// Checkpoint: "MLABCKPT", u32 version, u32 tensor count, u64 num_groups,
// u64 c_max, then per tensor u32 rank, u64 dims, f64 values. All
// little-endian.
namespace detail
{
inline constexpr char kCheckpointMagic[8] = {'M', 'L', 'A', 'B', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void write_le(std::ostream& out, T value)
{
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  const U bits = std::bit_cast<U>(value);
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i)
  {
    bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
  }
  out.write(bytes, sizeof(U));
}

template <typename T>
T read_le(std::istream& in)
{
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  unsigned char bytes[sizeof(U)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(U));
  if (!in)
  {
    throw std::runtime_error("checkpoint: truncated file");
  }
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
  {
    bits |= static_cast<U>(bytes[i]) << (8 * i);
  }
  return std::bit_cast<T>(bits);
}
}  // namespace detail

inline void save_checkpoint(const ModelParams& p, const std::string& path)
{
  p.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out)
  {
    throw std::runtime_error("checkpoint: cannot open " + path);
  }
  out.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  detail::write_le(out, detail::kCheckpointVersion);
  detail::write_le(out, static_cast<std::uint32_t>(p.tensors.size()));
  detail::write_le(out, static_cast<std::uint64_t>(p.arch.num_groups));
  detail::write_le(out, static_cast<std::uint64_t>(p.arch.c_max));
  for (const auto& t : p.tensors)
  {
    detail::write_le(out, static_cast<std::uint32_t>(t.rank()));
    for (const auto d : t.shape())
    {
      detail::write_le(out, static_cast<std::uint64_t>(d));
    }
    for (const double v : t.data())
    {
      detail::write_le(out, v);
    }
  }
  if (!out)
  {
    throw std::runtime_error("checkpoint: write failed for " + path);
  }
}

/// Loads a checkpoint and checks it against the expected architecture.
inline ModelParams load_checkpoint(const std::string& path, const Architecture& expected)
{
  std::ifstream in(path, std::ios::binary);
  if (!in)
  {
    throw std::runtime_error("checkpoint: cannot open " + path);
  }
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(magic, magic + 8, detail::kCheckpointMagic))
  {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  const auto version = detail::read_le<std::uint32_t>(in);
  if (version != detail::kCheckpointVersion)
  {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = detail::read_le<std::uint32_t>(in);
  ModelParams p;
  p.arch = expected;
  const auto groups = detail::read_le<std::uint64_t>(in);
  const auto c_max = detail::read_le<std::uint64_t>(in);
  if (groups != expected.num_groups || c_max != expected.c_max)
  {
    throw std::runtime_error("checkpoint: head layout differs from config");
  }
  for (std::uint32_t i = 0; i < count; ++i)
  {
    const auto rank = detail::read_le<std::uint32_t>(in);
    if (rank == 0 || rank > 8)
    {
      throw std::runtime_error("checkpoint: implausible tensor rank");
    }
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r)
    {
      shape.push_back(static_cast<std::size_t>(detail::read_le<std::uint64_t>(in)));
    }
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values)
    {
      v = detail::read_le<double>(in);
    }
    p.tensors.emplace_back(std::move(shape), std::move(values));
  }
  p.validate();
  return p;
}

}  // namespace metalab
