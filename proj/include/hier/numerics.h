#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace hier {

// Row-major dense matrix of doubles.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  void fill(double v);
  bool all_finite() const;

  bool operator==(const DenseMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

using Vector = std::vector<double>;

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);

// Numerically stable softmax (max subtraction). Throws NumericError on
// non-finite input.
Vector softmax(std::span<const double> logits);

// Given s = softmax(z) and g = dL/ds, returns dL/dz = s * (g - <s, g>).
Vector softmax_backward(std::span<const double> s, std::span<const double> grad_s);

double sigmoid(double x);

// Cosine similarity; throws NumericError on a zero-norm argument.
double cosine_sim(std::span<const double> a, std::span<const double> b);

// Accumulates d cos(a, b) / da scaled by `scale` into grad_a (and the
// symmetric term into grad_b when non-empty).
void cosine_sim_backward(std::span<const double> a, std::span<const double> b,
                         double scale, std::span<double> grad_a,
                         std::span<double> grad_b);

// bank (k x d) times h (d) -> k logits.
Vector matvec(const DenseMatrix& bank, std::span<const double> h);
// bank^T (d x k) times s (k) -> d.
Vector matvec_transposed(const DenseMatrix& bank, std::span<const double> s);

}  // namespace hier
