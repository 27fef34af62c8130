#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace metalab
{
using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape)
{
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape)
{
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i)
  {
    out << (i ? "x" : "") << shape[i];
  }
  out << ']';
  return out.str();
}

/// Raised when operand shapes do not conform for an operation.
class ShapeError : public std::invalid_argument
{
public:
  ShapeError(const std::string& op, const Shape& lhs, const Shape& rhs)
      : std::invalid_argument(op + ": shape mismatch " + shape_string(lhs) +
                              " vs " + shape_string(rhs))
  {
  }
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major array of doubles. Value type; copies are deep.
class Tensor
{
public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data))
  {
    for (const auto dim : shape_)
    {
      if (dim == 0)
      {
        throw std::invalid_argument("Tensor: zero-sized dimension in " +
                                    shape_string(shape_));
      }
    }
    if (shape_numel(shape_) != data_.size())
    {
      throw std::invalid_argument("Tensor: shape " + shape_string(shape_) +
                                  " does not match " +
                                  std::to_string(data_.size()) + " values");
    }
  }

  static Tensor filled(Shape shape, double value)
  {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }

  static Tensor zeros(Shape shape) { return filled(std::move(shape), 0.0); }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> data)
  {
    return Tensor({rows, cols}, std::move(data));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<double> data)
  {
    return Tensor({rows, cols}, std::vector<double>(data));
  }

  static Tensor identity(std::size_t n)
  {
    auto out = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i)
    {
      out.at(i, i) = 1.0;
    }
    return out;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const
  {
    require_matrix("rows");
    return shape_[0];
  }

  std::size_t cols() const
  {
    require_matrix("cols");
    return shape_[1];
  }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  double at(std::size_t r, std::size_t c) const
  {
    return data_[r * shape_[1] + c];
  }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  /// Row r of a matrix as a contiguous view.
  std::span<const double> row(std::size_t r) const
  {
    return std::span<const double>(data_).subspan(r * shape_[1], shape_[1]);
  }

  double item() const
  {
    if (data_.size() != 1)
    {
      throw std::invalid_argument("Tensor::item on " + shape_string(shape_));
    }
    return data_[0];
  }

  bool all_finite() const
  {
    for (const double v : data_)
    {
      if (!std::isfinite(v))
      {
        return false;
      }
    }
    return true;
  }

  /// Bitwise equality of shape and contents.
  friend bool operator==(const Tensor& a, const Tensor& b)
  {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

private:
  void require_matrix(const char* what) const
  {
    if (shape_.size() != 2)
    {
      throw std::invalid_argument(std::string("Tensor::") + what +
                                  " requires rank 2, got " +
                                  shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

/// Gather a subset of matrix rows into a new matrix.
inline Tensor gather_rows(const Tensor& m, std::span<const std::size_t> rows)
{
  const std::size_t cols = m.cols();
  std::vector<double> out;
  out.reserve(rows.size() * cols);
  for (const auto r : rows)
  {
    if (r >= m.rows())
    {
      throw std::out_of_range("gather_rows: row index out of range");
    }
    const auto src = m.row(r);
    out.insert(out.end(), src.begin(), src.end());
  }
  return Tensor::matrix(rows.size(), cols, std::move(out));
}

}  // namespace metalab
