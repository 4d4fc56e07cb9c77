#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mvdiff::numerics {

/// Dense row-major array of doubles. Every op in the library treats a tensor
/// as a matrix: `cols()` is the last dimension and `rows()` the product of the
/// leading ones (a rank-1 tensor is a single row).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }
  static Tensor filled(std::size_t rows, std::size_t cols, double v) { return Tensor({rows, cols}, v); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor row(std::vector<double> values);
  static Tensor scalar(double v) { return Tensor({1, 1}, v); }
  static Tensor identity(std::size_t n);

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }
  bool same_shape(const Tensor& other) const noexcept {
    return rows() == other.rows() && cols() == other.cols();
  }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }
  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::span<double> row_span(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row_span(std::size_t r) const noexcept {
    return {data_.data() + r * cols(), cols()};
  }
  double item() const;

  /// Same data reinterpreted as [rows, cols]; sizes must match.
  Tensor reshaped(std::size_t rows, std::size_t cols) const;

  std::string shape_string() const;
  bool all_finite() const noexcept;

  bool operator==(const Tensor& other) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

// Plain (non-differentiable) helpers. Graph ops reuse these kernels.
Tensor matmul(const Tensor& a, const Tensor& b);
/// a^T * b without materializing the transpose.
Tensor matmul_tn(const Tensor& a, const Tensor& b);
/// a * b^T without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
void axpy(double alpha, const Tensor& x, Tensor& y);
Tensor softmax_rows(const Tensor& a);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
double dot(std::span<const double> a, std::span<const double> b) noexcept;
double squared_distance(std::span<const double> a, std::span<const double> b) noexcept;
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace mvdiff::numerics
