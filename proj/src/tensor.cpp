#include "mifair/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mifair/error.hpp"

namespace mifair {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty()) throw ShapeError("tensor: empty shape (use {1} for scalars)");
  for (std::size_t d : shape_) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_string(shape_));
  }
  if (shape_size(shape_) != data_.size()) {
    throw ShapeError("tensor: shape " + shape_string(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const std::size_t n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

Tensor Tensor::row(std::vector<double> data) {
  const std::size_t n = data.size();
  return Tensor({1, n}, std::move(data));
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<double> data;
  std::size_t cols = 0;
  for (const auto& r : rows) {
    if (cols == 0) cols = r.size();
    if (r.size() != cols) throw ShapeError("tensor: ragged rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return matrix(rows.size(), cols, std::move(data));
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 1) return 1;
  if (shape_.size() == 2) return shape_[0];
  throw ShapeError("tensor: matrix view of rank-" + std::to_string(shape_.size()) + " tensor");
}

std::size_t Tensor::cols() const {
  if (shape_.size() == 1) return shape_[0];
  if (shape_.size() == 2) return shape_[1];
  throw ShapeError("tensor: matrix view of rank-" + std::to_string(shape_.size()) + " tensor");
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("tensor: item() on shape " + shape_string(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
          std::size_t k, std::size_t n, bool transpose_a, bool transpose_b, bool accumulate) {
  if (!accumulate) std::fill(c.begin(), c.end(), 0.0);
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  if (transpose_b) {
    // B: n x k. Transposing once lets the row-streaming kernel vectorize.
    std::vector<double> bt(k * n);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = pb[j * k + p];
    }
    gemm(a, bt, c, m, k, n, transpose_a, false, true);
    return;
  }
  if (transpose_a) {
    // A: k x m
    std::vector<double> at(m * k);
    for (std::size_t p = 0; p < k; ++p) {
      for (std::size_t i = 0; i < m; ++i) at[i * k + p] = pa[p * m + i];
    }
    gemm(at, b, c, m, k, n, false, false, true);
    return;
  }
  // A: m x k, B: k x n. Four rows of C share each streamed row of B.
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* c0 = pc + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    const double* a0 = pa + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double x0 = a0[p], x1 = a0[k + p], x2 = a0[2 * k + p], x3 = a0[3 * k + p];
      const double* bp = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double v = bp[j];
        c0[j] += x0 * v;
        c1[j] += x1 * v;
        c2[j] += x2 * v;
        c3[j] += x3 * v;
      }
    }
  }
  for (; i < m; ++i) {
    double* ci = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      const double* bp = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

Tensor matmul_dense(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor out = Tensor::zeros({a.rows(), b.cols()});
  gemm(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.cols(), false, false, false);
  return out;
}

}  // namespace mifair
