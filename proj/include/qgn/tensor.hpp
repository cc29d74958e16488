#pragma once

#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace qgn {

/// Dense row-major tensor of doubles. Rank and shape are dynamic.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(numel_of(shape_)), 0.0);
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<double> data) {
    Tensor t;
    t.shape_ = std::move(shape);
    if (static_cast<int64_t>(data.size()) != numel_of(t.shape_))
      throw std::invalid_argument("Tensor::from: data size does not match shape");
    t.data_ = std::move(data);
    return t;
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  /// Multi-index access, slow; meant for tests and setup code.
  double& at(std::initializer_list<int> idx) { return data_[offset(idx)]; }
  double at(std::initializer_list<int> idx) const { return data_[offset(idx)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  double item() const {
    if (numel() != 1) throw std::logic_error("Tensor::item: not a scalar");
    return data_[0];
  }

  void fill(double v) {
    for (auto& x : data_) x = v;
  }

  Tensor reshaped(std::vector<int> shape) const {
    if (numel_of(shape) != numel())
      throw std::invalid_argument("Tensor::reshaped: element count mismatch");
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  static int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  static std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }

 private:
  size_t offset(std::initializer_list<int> idx) const {
    assert(idx.size() == shape_.size());
    size_t off = 0;
    auto it = idx.begin();
    for (size_t i = 0; i < shape_.size(); ++i, ++it) {
      assert(*it >= 0 && *it < shape_[i]);
      off = off * static_cast<size_t>(shape_[i]) + static_cast<size_t>(*it);
    }
    return off;
  }

  std::vector<int> shape_;
  std::vector<double> data_;
};

}  // namespace qgn
