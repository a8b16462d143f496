#include "hier/numerics.h"

#include <algorithm>
#include <cassert>
#include <cmath>

#include "hier/errors.h"

namespace hier {

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw NumericError("DenseMatrix: data length does not match rows x cols");
  }
}

void DenseMatrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool DenseMatrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double dot(std::span<const double> a, std::span<const double> b) {
  assert(a.size() == b.size());
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  assert(x.size() == y.size());
  for (std::size_t k = 0; k < x.size(); ++k) y[k] += alpha * x[k];
}

Vector softmax(std::span<const double> logits) {
  double mx = -INFINITY;
  for (double v : logits) {
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
    mx = std::max(mx, v);
  }
  Vector out(logits.size());
  double total = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out[k] = std::exp(logits[k] - mx);
    total += out[k];
  }
  for (double& v : out) v /= total;
  return out;
}

Vector softmax_backward(std::span<const double> s, std::span<const double> grad_s) {
  const double inner = dot(s, grad_s);
  Vector out(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) out[k] = s[k] * (grad_s[k] - inner);
  return out;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double cosine_sim(std::span<const double> a, std::span<const double> b) {
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine_sim: zero-norm vector");
  return dot(a, b) / (na * nb);
}

void cosine_sim_backward(std::span<const double> a, std::span<const double> b,
                         double scale, std::span<double> grad_a,
                         std::span<double> grad_b) {
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine_sim: zero-norm vector");
  const double inv = 1.0 / (na * nb);
  const double c = dot(a, b) * inv;
  const double ca = c / (na * na);
  const double cb = c / (nb * nb);
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (!grad_a.empty()) grad_a[k] += scale * (b[k] * inv - ca * a[k]);
    if (!grad_b.empty()) grad_b[k] += scale * (a[k] * inv - cb * b[k]);
  }
}

Vector matvec(const DenseMatrix& bank, std::span<const double> h) {
  Vector out(bank.rows());
  for (std::size_t r = 0; r < bank.rows(); ++r) out[r] = dot(bank.row(r), h);
  return out;
}

Vector matvec_transposed(const DenseMatrix& bank, std::span<const double> s) {
  Vector out(bank.cols(), 0.0);
  for (std::size_t r = 0; r < bank.rows(); ++r) axpy(s[r], bank.row(r), out);
  return out;
}

}  // namespace hier
