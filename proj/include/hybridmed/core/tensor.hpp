// Dense row-major double tensor. All model math runs in double so gradient
// checks against central finite differences are meaningful.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hybridmed {

using Shape = std::vector<int64_t>;

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), v_(shape_numel(shape_), 0.0) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), v_(std::move(data)) {
    check(static_cast<int64_t>(v_.size()) == shape_numel(shape_),
          "Tensor: data size does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.v_.begin(), t.v_.end(), value);
    return t;
  }
  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return shape_; }
  int64_t dim(size_t i) const { return shape_.at(i); }
  size_t ndim() const { return shape_.size(); }
  int64_t size() const { return static_cast<int64_t>(v_.size()); }
  bool empty() const { return v_.empty(); }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  std::vector<double>& vec() { return v_; }
  const std::vector<double>& vec() const { return v_; }

  double& operator[](int64_t i) { return v_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return v_[static_cast<size_t>(i)]; }

  double item() const {
    check(size() == 1, "Tensor::item on non-scalar " + shape_str(shape_));
    return v_[0];
  }

  // Same data, new shape. Element count must be preserved.
  Tensor reshaped(Shape shape) const {
    check(shape_numel(shape) == size(),
          "reshape " + shape_str(shape_) + " -> " + shape_str(shape) + " changes element count");
    return Tensor(std::move(shape), v_);
  }

  void fill(double value) { std::fill(v_.begin(), v_.end(), value); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  Shape shape_;
  std::vector<double> v_;
};

inline bool all_finite(const Tensor& t) {
  for (double x : t.vec())
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace hybridmed
