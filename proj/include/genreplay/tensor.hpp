#pragma once

#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

namespace genreplay {

/// Dense row-major tensor of doubles. Image batches use NCHW layout.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(count(shape_)), 0.0);
  }
  Tensor(std::vector<int> shape, std::vector<double> values)
      : shape_(std::move(shape)), data_(std::move(values)) {
    assert(static_cast<size_t>(count(shape_)) == data_.size());
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int size() const { return static_cast<int>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](int i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int i) const { return data_[static_cast<size_t>(i)]; }

  // (row, col) accessor for 2-d tensors.
  double& at(int r, int c) { return data_[static_cast<size_t>(r) * shape_[1] + c]; }
  double at(int r, int c) const { return data_[static_cast<size_t>(r) * shape_[1] + c]; }

  // NCHW accessor for 4-d tensors.
  double& at(int n, int c, int h, int w) {
    return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at(int n, int c, int h, int w) const {
    return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(0.0); }

  Tensor& operator+=(const Tensor& o) {
    assert(o.size() == size());
    for (int i = 0; i < size(); ++i) data_[static_cast<size_t>(i)] += o.data_[static_cast<size_t>(i)];
    return *this;
  }
  Tensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }
  void add_scaled(const Tensor& o, double s) {
    assert(o.size() == size());
    for (int i = 0; i < size(); ++i) data_[static_cast<size_t>(i)] += s * o.data_[static_cast<size_t>(i)];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor reshaped(std::vector<int> shape) const {
    assert(count(shape) == size());
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  // Rows [begin, end) of the leading dimension as a new tensor.
  Tensor slice_rows(int begin, int end) const {
    assert(ndim() >= 1 && begin >= 0 && end <= shape_[0] && begin <= end);
    int stride = shape_[0] == 0 ? 0 : size() / shape_[0];
    std::vector<int> s = shape_;
    s[0] = end - begin;
    Tensor out(s);
    std::copy(data_.begin() + static_cast<size_t>(begin) * stride,
              data_.begin() + static_cast<size_t>(end) * stride, out.data_.begin());
    return out;
  }

  static int count(const std::vector<int>& shape) {
    int n = 1;
    for (int d : shape) n *= d;
    return n;
  }

  std::string shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + ")";
  }

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

// Stacks tensors along a new/existing leading dimension; all inputs must share
// trailing shape.
inline Tensor concat_rows(const std::vector<const Tensor*>& parts) {
  assert(!parts.empty());
  std::vector<int> s = parts[0]->shape();
  int rows = 0;
  for (const Tensor* p : parts) rows += p->dim(0);
  s[0] = rows;
  Tensor out(s);
  double* dst = out.data();
  for (const Tensor* p : parts) {
    std::copy(p->data(), p->data() + p->size(), dst);
    dst += p->size();
  }
  return out;
}

}  // namespace genreplay
