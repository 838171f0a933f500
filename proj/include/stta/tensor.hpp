#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace stta {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles.
///
/// The (shape, data) constructor validates that the extents match the data
/// length and that every value is finite; it is the entry point for anything
/// coming from outside the library. The shape-only constructor yields zeros
/// and is what kernels use for their outputs.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  // Copy of row `i` along axis 0, with the leading extent dropped.
  Tensor slice0(std::size_t i) const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Stacks equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> items);

Tensor matmul(const Tensor& a, const Tensor& b);

struct MeanVar {
  Tensor mean;
  Tensor var;
};

/// Mean and population variance over `axes`. The result keeps the
/// non-reduced axes in order; reducing every axis yields rank-0 tensors.
MeanVar reduce_mean_var(const Tensor& x, std::span<const std::size_t> axes);
MeanVar reduce_mean_var(const Tensor& x, std::initializer_list<std::size_t> axes);

// Softmax over the last axis with max subtraction.
Tensor softmax(const Tensor& logits);

// Index of the largest entry of each row of a [N x K] tensor (first on ties).
std::vector<int> argmax_rows(const Tensor& x);

}  // namespace stta
