#include "bilalora/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "bilalora/errors.hpp"

namespace bilalora {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kDegenerate: return "degenerate";
    case ErrorCode::kContract: return "contract_violation";
    case ErrorCode::kOutOfRange: return "out_of_range";
    case ErrorCode::kConvergence: return "no_convergence";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kConfig: return "config";
  }
  return "unknown";
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_to_string(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_size(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (data_.size() != shape_size(shape_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_to_string(shape_));
  }
}

Tensor Tensor::vector(std::vector<double> values) {
  Shape shape{values.size()};
  return Tensor(std::move(shape), std::move(values));
}

Tensor Tensor::filled(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

std::size_t Tensor::rows() const { return rank() == 1 ? 1 : shape_[0]; }

std::size_t Tensor::cols() const { return rank() == 1 ? shape_[0] : size() / shape_[0]; }

double Tensor::item() const {
  if (!is_scalar()) throw ShapeError("item() on non-scalar tensor " + shape_to_string(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != size()) {
    throw ShapeError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.shape_ != shape_) throw ShapeError("+= shape mismatch");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
  if (other.shape_ != shape_) throw ShapeError("-= shape mismatch");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double factor) {
  for (auto& v : data_) v *= factor;
  return *this;
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("dot of tensors with different sizes");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double squared_norm(const Tensor& a) { return dot(a, a); }

double max_relative_error(const Tensor& a, const Tensor& b, double floor) {
  if (a.size() != b.size()) throw ShapeError("max_relative_error size mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

void gemm_nn(std::span<const double> a, std::span<const double> b,
             std::span<double> out, std::size_t m, std::size_t k,
             std::size_t n) {
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    const double* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

void gemm_nt(std::span<const double> a, std::span<const double> b,
             std::span<double> out, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.data() + i * k;
    double* orow = out.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      orow[j] = s;
    }
  }
}

void gemm_tn(std::span<const double> a, std::span<const double> b,
             std::span<double> out, std::size_t m, std::size_t k,
             std::size_t n) {
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a.data() + p * m;
    const double* brow = b.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

}  // namespace bilalora
