#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <utility>
#include <vector>

#include "gradnet/common.hpp"

namespace gradnet {

/// Dense row-major double tensor, rank 1..4. Small and value-semantic;
/// every network quantity in this library is one of these.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> dims, double fill = 0.0)
      : dims_(std::move(dims)), v_(checked_numel(dims_), fill) {}

  static Tensor scalar(double v) {
    Tensor t({1});
    t.v_[0] = v;
    return t;
  }

  static Tensor zeros_like(const Tensor& o) { return Tensor(o.dims_); }

  int ndim() const { return static_cast<int>(dims_.size()); }
  int dim(int i) const { return dims_[static_cast<std::size_t>(i)]; }
  const std::vector<int>& dims() const { return dims_; }
  std::size_t numel() const { return v_.size(); }
  bool empty() const { return v_.empty(); }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }

  double& operator[](std::size_t i) { return v_[i]; }
  double operator[](std::size_t i) const { return v_[i]; }

  double& operator()(int y, int x) { return v_[idx2(y, x)]; }
  double operator()(int y, int x) const { return v_[idx2(y, x)]; }
  double& operator()(int c, int y, int x) { return v_[idx3(c, y, x)]; }
  double operator()(int c, int y, int x) const { return v_[idx3(c, y, x)]; }
  double& operator()(int o, int c, int y, int x) { return v_[idx4(o, c, y, x)]; }
  double operator()(int o, int c, int y, int x) const { return v_[idx4(o, c, y, x)]; }

  bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

  std::string shape_str() const {
    std::string s;
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (i) s += 'x';
      s += std::to_string(dims_[i]);
    }
    return s.empty() ? "scalar" : s;
  }

  bool all_finite() const {
    for (double x : v_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  double sum() const {
    double s = 0;
    for (double x : v_) s += x;
    return s;
  }

  double max() const {
    double m = -HUGE_VAL;
    for (double x : v_) m = std::max(m, x);
    return m;
  }

  double min() const {
    double m = HUGE_VAL;
    for (double x : v_) m = std::min(m, x);
    return m;
  }

  std::size_t argmax() const {
    return static_cast<std::size_t>(
        std::max_element(v_.begin(), v_.end()) - v_.begin());
  }

  double abs_max() const {
    double m = 0;
    for (double x : v_) m = std::max(m, std::abs(x));
    return m;
  }

  double norm() const {
    double s = 0;
    for (double x : v_) s += x * x;
    return std::sqrt(s);
  }

  Tensor reshaped(std::vector<int> dims) const {
    Tensor t = *this;
    if (checked_numel(dims) != numel())
      throw ShapeError(detail::cat("reshape ", shape_str(), " -> incompatible element count"));
    t.dims_ = std::move(dims);
    return t;
  }

  void fill(double v) { std::fill(v_.begin(), v_.end(), v); }

 private:
  static std::size_t checked_numel(const std::vector<int>& dims) {
    if (dims.empty() || dims.size() > 4)
      throw ShapeError("tensor rank must be 1..4");
    std::size_t n = 1;
    for (int d : dims) {
      if (d <= 0) throw ShapeError("tensor dims must be positive");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::size_t idx2(int y, int x) const {
    return static_cast<std::size_t>(y) * dims_[1] + x;
  }
  std::size_t idx3(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * dims_[1] + y) * dims_[2] + x;
  }
  std::size_t idx4(int o, int c, int y, int x) const {
    return ((static_cast<std::size_t>(o) * dims_[1] + c) * dims_[2] + y) * dims_[3] + x;
  }

  std::vector<int> dims_;
  std::vector<double> v_;
};

inline Tensor random_normal(std::vector<int> dims, Rng& rng, double stddev = 1.0) {
  Tensor t(std::move(dims));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = stddev * rng.normal();
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw ShapeError(detail::cat("max_abs_diff: ", a.shape_str(), " vs ", b.shape_str()));
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// max over elements of |a-b| / (|a|+|b|+eps); the relative metric used by
/// all the oracle-equivalence and finite-difference checks.
inline double max_rel_diff(const Tensor& a, const Tensor& b, double eps = 1e-12) {
  if (!a.same_shape(b))
    throw ShapeError(detail::cat("max_rel_diff: ", a.shape_str(), " vs ", b.shape_str()));
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    double denom = std::abs(a[i]) + std::abs(b[i]) + eps;
    m = std::max(m, std::abs(a[i] - b[i]) / denom);
  }
  return m;
}

}  // namespace gradnet
