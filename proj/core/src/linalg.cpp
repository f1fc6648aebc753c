#include "restorelcc/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <string>

#include "restorelcc/util.hpp"

namespace rlcc::linalg {

double dot(std::span<const double> a, std::span<const double> b) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  size_t n = a.size();
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

double frobenius_norm(const Matrix& m) {
  return std::sqrt(dot(m.data, m.data));
}

double frobenius_rel_error(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw std::invalid_argument("frobenius_rel_error: shape mismatch (" +
                                std::to_string(a.rows) + "x" + std::to_string(a.cols) + " vs " +
                                std::to_string(b.rows) + "x" + std::to_string(b.cols) + ")");
  }
  double diff = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    diff += d * d;
  }
  return std::sqrt(diff) / std::max(frobenius_norm(a), 1e-30);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b,
                         bool* degenerate) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("cosine_similarity: length mismatch");
  }
  if (degenerate) *degenerate = false;
  const double na = std::sqrt(dot(a, a));
  const double nb = std::sqrt(dot(b, b));
  if (na == 0.0 || nb == 0.0) {
    // Degenerate inputs sort last as negatives.
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  const double c = dot(a, b) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

Matrix reconstruct(const SvdFactors& f) {
  const int n = f.u.rows;
  const int d = f.v.rows;
  const int r = int(f.sigma.size());
  Matrix m(n, d);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < r; ++k) {
      const double w = f.u.at(i, k) * f.sigma[size_t(k)];
      if (w == 0.0) continue;
      for (int j = 0; j < d; ++j) {
        m.at(i, j) += w * f.v.at(j, k);
      }
    }
  }
  return m;
}

namespace {

// Columns stored contiguously for the rotation sweeps.
struct ColMajor {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;
  ColMajor(int r, int c) : rows(r), cols(c), data(size_t(r) * size_t(c), 0.0) {}
  double* col(int j) { return data.data() + size_t(j) * rows; }
  const double* col(int j) const { return data.data() + size_t(j) * rows; }
};

double col_dot(const ColMajor& m, int i, int j) {
  return dot({m.col(i), size_t(m.rows)}, {m.col(j), size_t(m.rows)});
}

void rotate_cols(ColMajor& m, int i, int j, double c, double s) {
  double* a = m.col(i);
  double* b = m.col(j);
  for (int t = 0; t < m.rows; ++t) {
    const double ai = a[t];
    const double bj = b[t];
    a[t] = c * ai - s * bj;
    b[t] = s * ai + c * bj;
  }
}

// Deterministic orthonormal completion for columns whose singular value is
// numerically zero: Gram-Schmidt of canonical basis vectors.
void complete_column(Matrix& u, int col, int n) {
  for (int k = 0; k < n; ++k) {
    std::vector<double> cand(size_t(n), 0.0);
    cand[size_t(k)] = 1.0;
    for (int c = 0; c < col; ++c) {
      double proj = 0.0;
      for (int t = 0; t < n; ++t) proj += u.at(t, c) * cand[size_t(t)];
      for (int t = 0; t < n; ++t) cand[size_t(t)] -= proj * u.at(t, c);
    }
    const double norm = std::sqrt(dot(cand, cand));
    if (norm > 0.5) {
      for (int t = 0; t < n; ++t) u.at(t, col) = cand[size_t(t)] / norm;
      return;
    }
  }
  throw std::runtime_error("svd_thin: orthonormal completion failed");
}

}  // namespace

SvdFactors svd_thin(const Matrix& m) {
  if (m.cols > 512) {
    throw std::invalid_argument("svd_thin: cols > 512 exceeds desk scale");
  }
  if (size_t(m.rows) * size_t(m.cols) != m.data.size()) {
    throw std::invalid_argument("svd_thin: inconsistent dimensions");
  }
  for (int i = 0; i < m.rows; ++i) {
    for (int j = 0; j < m.cols; ++j) {
      if (!std::isfinite(m.at(i, j))) {
        throw std::invalid_argument("svd_thin: non-finite entry at (" + std::to_string(i) +
                                    ", " + std::to_string(j) + ")");
      }
    }
  }

  const int n = m.rows;
  const int d = m.cols;
  const int r = std::min(n, d);

  SvdFactors f;
  f.sigma.assign(size_t(r), 0.0);
  f.u = Matrix(n, r);
  f.v = Matrix(d, r);

  double fro2 = 0.0;
  for (double x : m.data) fro2 += x * x;
  if (fro2 == 0.0) {
    for (int k = 0; k < r; ++k) {
      f.u.at(k, k) = 1.0;
      f.v.at(k, k) = 1.0;
    }
    return f;
  }

  ColMajor a(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) a.col(j)[i] = m.at(i, j);
  }
  ColMajor v(d, d);
  for (int j = 0; j < d; ++j) v.col(j)[j] = 1.0;

  // Sweep column pairs until all off-diagonal Gram entries fall below the
  // convergence threshold.
  const double thresh = 1e-12 * fro2;
  const int max_sweeps = 128;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (int i = 0; i < d - 1; ++i) {
      for (int j = i + 1; j < d; ++j) {
        const double gamma = col_dot(a, i, j);
        if (std::abs(gamma) < thresh) continue;
        rotated = true;
        const double alpha = col_dot(a, i, i);
        const double beta = col_dot(a, j, j);
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate_cols(a, i, j, c, s);
        rotate_cols(v, i, j, c, s);
      }
    }
    if (!rotated) break;
  }

  std::vector<double> norms(size_t(d), 0.0);
  for (int j = 0; j < d; ++j) norms[size_t(j)] = std::sqrt(col_dot(a, j, j));

  std::vector<int> order(size_t(d), 0);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
    if (norms[size_t(x)] != norms[size_t(y)]) return norms[size_t(x)] > norms[size_t(y)];
    return x < y;
  });

  const double tiny = 1e-13 * std::sqrt(fro2);
  for (int k = 0; k < r; ++k) {
    const int src = order[size_t(k)];
    const double sigma = norms[size_t(src)];
    f.sigma[size_t(k)] = sigma;
    for (int j = 0; j < d; ++j) f.v.at(j, k) = v.col(src)[j];
    if (sigma > tiny) {
      for (int t = 0; t < n; ++t) f.u.at(t, k) = a.col(src)[t] / sigma;
    } else {
      complete_column(f.u, k, n);
    }
  }

  // Sign convention: largest-magnitude entry of each right singular vector is
  // non-negative, ties resolved toward the lowest index.
  for (int k = 0; k < r; ++k) {
    int arg = 0;
    double best = -1.0;
    for (int j = 0; j < d; ++j) {
      const double mag = std::abs(f.v.at(j, k));
      if (mag > best) {
        best = mag;
        arg = j;
      }
    }
    if (f.v.at(arg, k) < 0.0) {
      for (int j = 0; j < d; ++j) f.v.at(j, k) = -f.v.at(j, k);
      for (int t = 0; t < n; ++t) f.u.at(t, k) = -f.u.at(t, k);
    }
  }

  return f;
}

}  // namespace rlcc::linalg
