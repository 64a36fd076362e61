#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace qlns {

// Dense row-major tensor of 64-bit reals with an optional gradient buffer of
// the same length. All numeric state in the library lives in this type.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(checked_size(shape_), 0.0) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_size(shape_) != data_.size()) {
      throw std::invalid_argument("tensor: shape/data length mismatch");
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  bool has_grad() const { return !grad_.empty(); }

  std::vector<double>& grad() {
    if (grad_.empty()) grad_.assign(data_.size(), 0.0);
    return grad_;
  }
  const std::vector<double>& grad() const { return grad_; }

  void zero_grad() { grad_.assign(data_.size(), 0.0); }
  void drop_grad() { grad_.clear(); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) os << ',';
      os << shape_[i];
    }
    os << ')';
    return os.str();
  }

 private:
  static std::size_t checked_size(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw std::invalid_argument("tensor: zero dimension");
      n *= d;
    }
    return shape.empty() ? 0 : n;
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
  std::vector<double> grad_;
};

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double l2_norm_sq(const std::vector<double>& a) { return dot(a, a); }

inline double linf_norm(const std::vector<double>& a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::fabs(v));
  return m;
}

}  // namespace qlns
