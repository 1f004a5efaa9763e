#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace aetta {

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Dense row-major matrix of doubles. Rows are samples wherever a batch is
// involved.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("Matrix: data length " + std::to_string(data_.size()) +
                           " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Rows [begin, end) as a new matrix.
inline Matrix slice_rows(const Matrix& m, std::size_t begin, std::size_t end) {
  if (begin > end || end > m.rows()) throw IndexError("slice_rows: range out of bounds");
  std::vector<double> out(m.data().begin() + static_cast<std::ptrdiff_t>(begin * m.cols()),
                          m.data().begin() + static_cast<std::ptrdiff_t>(end * m.cols()));
  return Matrix(end - begin, m.cols(), std::move(out));
}

inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= m.rows()) throw IndexError("gather_rows: index out of bounds");
    auto src = m.row(idx[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

// out = x * w + bias (bias broadcast over rows).
inline Matrix affine(const Matrix& x, const Matrix& w, std::span<const double> bias) {
  if (x.cols() != w.rows() || bias.size() != w.cols()) {
    throw DimensionError("affine: " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
                         " times " + std::to_string(w.rows()) + "x" + std::to_string(w.cols()));
  }
  const std::size_t n = x.rows(), in = x.cols(), out_dim = w.cols();
  Matrix out(n, out_dim);
  for (std::size_t r = 0; r < n; ++r) {
    double* o = out.row(r).data();
    for (std::size_t j = 0; j < out_dim; ++j) o[j] = bias[j];
    const double* xr = x.row(r).data();
    for (std::size_t k = 0; k < in; ++k) {
      const double xv = xr[k];
      if (xv == 0.0) continue;
      const double* wr = w.row(k).data();
      for (std::size_t j = 0; j < out_dim; ++j) o[j] += xv * wr[j];
    }
  }
  return out;
}

// a^T * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw DimensionError("matmul_tn: row mismatch");
  Matrix out(a.cols(), b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* ar = a.row(r).data();
    const double* br = b.row(r).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double av = ar[i];
      if (av == 0.0) continue;
      double* o = out.row(i).data();
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += av * br[j];
    }
  }
  return out;
}

// a * b^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw DimensionError("matmul_nt: col mismatch");
  Matrix out(a.rows(), b.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* ar = a.row(r).data();
    for (std::size_t i = 0; i < b.rows(); ++i) {
      const double* br = b.row(i).data();
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += ar[k] * br[k];
      out(r, i) = s;
    }
  }
  return out;
}

inline std::vector<double> column_sums(const Matrix& m) {
  std::vector<double> s(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double* mr = m.row(r).data();
    for (std::size_t c = 0; c < m.cols(); ++c) s[c] += mr[c];
  }
  return s;
}

// Index of the largest entry; the lowest index wins ties.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

inline std::vector<std::size_t> row_argmax(const Matrix& m) {
  std::vector<std::size_t> out(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) out[r] = argmax(m.row(r));
  return out;
}

}  // namespace aetta
