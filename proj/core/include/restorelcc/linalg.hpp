#pragma once

#include <span>
#include <vector>

namespace rlcc::linalg {

// Dense row-major matrix of doubles. Desk scale only.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(size_t(r) * size_t(c), 0.0) {}

  double& at(int r, int c) { return data[size_t(r) * cols + c]; }
  double at(int r, int c) const { return data[size_t(r) * cols + c]; }
  std::span<double> row(int r) { return {data.data() + size_t(r) * cols, size_t(cols)}; }
  std::span<const double> row(int r) const {
    return {data.data() + size_t(r) * cols, size_t(cols)};
  }
};

// Thin SVD factors: m = u * diag(sigma) * v^T.
// u is N x r, v is d x r, sigma has length r = min(N, d), sorted descending.
struct SvdFactors {
  Matrix u;
  std::vector<double> sigma;
  Matrix v;
};

// One-sided Jacobi thin SVD. Columns of u and v are orthonormal; every right
// singular vector is oriented so its largest-magnitude entry (lowest index on
// ties) is non-negative. Deterministic: identical input bytes give identical
// output bytes.
SvdFactors svd_thin(const Matrix& m);

// a.b / (|a||b|). A zero vector yields 0 and sets *degenerate when provided.
double cosine_similarity(std::span<const double> a, std::span<const double> b,
                         bool* degenerate = nullptr);

// |a - b|_F / max(|a|_F, 1e-30). Shapes must match.
double frobenius_rel_error(const Matrix& a, const Matrix& b);

double frobenius_norm(const Matrix& m);

// u * diag(sigma) * v^T, for reconstruction checks.
Matrix reconstruct(const SvdFactors& f);

double dot(std::span<const double> a, std::span<const double> b);

}  // namespace rlcc::linalg
