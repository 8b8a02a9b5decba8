#pragma once

#include <cstddef>
#include <vector>

namespace nbr {

// Dense row-major matrix of doubles. All training-path arithmetic runs in
// double precision so finite-difference checks are meaningful.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}

  double& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

  double* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
  const double* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }

  size_t size() const { return data.size(); }
  void fill(double v) { std::fill(data.begin(), data.end(), v); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// out = a(m,k) * b(k,n); out is resized and overwritten.
void matmul(const Matrix& a, const Matrix& b, Matrix& out);
// out = a^T(k,m) * b(k,n)
void matmul_tn(const Matrix& a, const Matrix& b, Matrix& out);
// out = a(m,k) * b^T(n,k)
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out);

void add_inplace(Matrix& a, const Matrix& b);
void axpy_inplace(Matrix& a, double s, const Matrix& b);  // a += s*b
void scale_inplace(Matrix& a, double s);

bool all_finite(const Matrix& m);

}  // namespace nbr
