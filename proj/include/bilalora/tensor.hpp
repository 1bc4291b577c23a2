#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace bilalora {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Dense row-major array of doubles. Every dimension is positive; a scalar is
// represented with shape {1}.
class Tensor {
 public:
  Tensor() : Tensor(Shape{1}) {}
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor({1}, {value}); }
  static Tensor vector(std::vector<double> values);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor filled(Shape shape, double value);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  // Rows/cols view the tensor as a matrix: a rank-1 tensor of length n is
  // treated as a 1 x n row.
  std::size_t rows() const;
  std::size_t cols() const;
  bool is_scalar() const { return data_.size() == 1; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double item() const;

  bool all_finite() const;
  Tensor reshaped(Shape shape) const;

  Tensor& operator+=(const Tensor& other);
  Tensor& operator-=(const Tensor& other);
  Tensor& operator*=(double factor);

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

double dot(const Tensor& a, const Tensor& b);
double squared_norm(const Tensor& a);
// Largest |a_i - b_i| / max(|a_i|, |b_i|, floor).
double max_relative_error(const Tensor& a, const Tensor& b, double floor = 1e-8);

// Dense kernels on row-major buffers; out is overwritten.
// out[m x n] = a[m x k] * b[k x n]
void gemm_nn(std::span<const double> a, std::span<const double> b,
             std::span<double> out, std::size_t m, std::size_t k,
             std::size_t n);
// out[m x n] = a[m x k] * b[n x k]^T
void gemm_nt(std::span<const double> a, std::span<const double> b,
             std::span<double> out, std::size_t m, std::size_t k,
             std::size_t n);
// out[m x n] = a[k x m]^T * b[k x n]
void gemm_tn(std::span<const double> a, std::span<const double> b,
             std::span<double> out, std::size_t m, std::size_t k,
             std::size_t n);

}  // namespace bilalora
