#include "stta/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "stta/errors.hpp"

namespace stta {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
  for (double v : data_) {
    if (!std::isfinite(v)) throw DomainError("tensor data must be finite");
  }
}

Tensor Tensor::filled(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::scalar(double value) { return filled({}, value); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(shape_));
  }
  return shape_[axis];
}

Tensor Tensor::slice0(std::size_t i) const {
  if (rank() == 0 || i >= shape_[0]) throw DimensionError("slice0 index out of range");
  Shape inner(shape_.begin() + 1, shape_.end());
  const std::size_t n = shape_size(inner);
  Tensor out(std::move(inner));
  std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(i * n), n, out.data_.begin());
  return out;
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw DimensionError("cannot stack zero tensors");
  const Shape& inner = items.front().shape();
  Shape shape{items.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  Tensor out(shape);
  const std::size_t n = shape_size(inner);
  auto dst = out.data().begin();
  for (const Tensor& t : items) {
    if (t.shape() != inner) {
      throw DimensionError("stack: mismatched shapes " + shape_string(inner) + " and " +
                           shape_string(t.shape()));
    }
    dst = std::copy_n(t.data().begin(), n, dst);
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a.at(i, p);
      for (std::size_t j = 0; j < n; ++j) out.at(i, j) += aip * b.at(p, j);
    }
  }
  return out;
}

namespace {

// Maps every flat index of `shape` to the flat index of its reduced slot.
std::vector<std::size_t> reduction_map(const Shape& shape, const std::vector<bool>& reduced,
                                       Shape& out_shape) {
  out_shape.clear();
  for (std::size_t a = 0; a < shape.size(); ++a) {
    if (!reduced[a]) out_shape.push_back(shape[a]);
  }
  const std::size_t total = shape_size(shape);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(shape.size(), 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t o = 0;
    for (std::size_t a = 0; a < shape.size(); ++a) {
      if (!reduced[a]) o = o * shape[a] + idx[a];
    }
    map[flat] = o;
    for (std::size_t a = shape.size(); a-- > 0;) {
      if (++idx[a] < shape[a]) break;
      idx[a] = 0;
    }
  }
  return map;
}

}  // namespace

MeanVar reduce_mean_var(const Tensor& x, std::span<const std::size_t> axes) {
  std::vector<bool> reduced(x.rank(), false);
  for (std::size_t a : axes) {
    if (a >= x.rank()) throw DimensionError("reduce_mean_var: axis out of range");
    reduced[a] = true;
  }
  std::size_t count = 1;
  for (std::size_t a = 0; a < x.rank(); ++a) {
    if (reduced[a]) count *= x.shape()[a];
  }
  if (axes.empty() || count == 0) throw DomainError("reduce_mean_var: empty reduction set");

  Shape out_shape;
  const auto map = reduction_map(x.shape(), reduced, out_shape);
  Tensor mean(out_shape);
  Tensor var(out_shape);
  for (std::size_t i = 0; i < x.size(); ++i) mean[map[i]] += x[i];
  for (double& m : mean.data()) m /= static_cast<double>(count);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - mean[map[i]];
    var[map[i]] += d * d;
  }
  for (double& v : var.data()) v /= static_cast<double>(count);
  return {std::move(mean), std::move(var)};
}

MeanVar reduce_mean_var(const Tensor& x, std::initializer_list<std::size_t> axes) {
  return reduce_mean_var(x, std::span<const std::size_t>(axes.begin(), axes.size()));
}

Tensor softmax(const Tensor& logits) {
  if (logits.rank() == 0 || logits.shape().back() == 0) {
    throw DimensionError("softmax: needs at least one class");
  }
  const std::size_t k = logits.shape().back();
  const std::size_t rows = logits.size() / k;
  Tensor out(logits.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = logits.data().data() + r * k;
    double* p = out.data().data() + r * k;
    const double zmax = *std::max_element(z, z + k);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      p[j] = std::exp(z[j] - zmax);
      total += p[j];
    }
    for (std::size_t j = 0; j < k; ++j) p[j] /= total;
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("argmax_rows expects a matrix");
  std::vector<int> out(x.dim(0));
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < x.dim(1); ++j) {
      if (x.at(i, j) > x.at(i, best)) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace stta
