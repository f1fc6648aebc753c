#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "restorelcc/linalg.hpp"
#include "restorelcc/util.hpp"

using namespace rlcc;
using linalg::Matrix;

namespace {

Matrix seeded_matrix(uint64_t seed, int rows, int cols, double scale = 1.0) {
  Rng rng(seed);
  Matrix m(rows, cols);
  for (auto& v : m.data) v = scale * rng.next_normal();
  return m;
}

// Independent oracle: eigenvalues of the Gram matrix M^T M by power iteration
// with deflation. Built before svd_thin and kept free of its code path.
std::vector<double> gram_eigenvalues_oracle(const Matrix& m) {
  const int d = m.cols;
  Matrix g(d, d);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) {
      double s = 0.0;
      for (int t = 0; t < m.rows; ++t) s += m.at(t, i) * m.at(t, j);
      g.at(i, j) = s;
    }
  }
  std::vector<double> eigs;
  std::vector<std::vector<double>> vecs;
  auto deflate = [&](std::vector<double>& w) {
    for (const auto& u : vecs) {
      double proj = 0.0;
      for (int i = 0; i < d; ++i) proj += w[size_t(i)] * u[size_t(i)];
      for (int i = 0; i < d; ++i) w[size_t(i)] -= proj * u[size_t(i)];
    }
  };
  for (int k = 0; k < d; ++k) {
    std::vector<double> v(size_t(d), 0.0);
    for (int i = 0; i < d; ++i) v[size_t(i)] = 1.0 + 0.01 * (i + 1) * (k + 1);
    deflate(v);
    double lambda = 0.0;
    bool rank_exhausted = false;
    const double top = eigs.empty() ? 1.0 : std::max(eigs[0], 1.0);
    for (int iter = 0; iter < 20000; ++iter) {
      std::vector<double> w(size_t(d), 0.0);
      for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) w[size_t(i)] += g.at(i, j) * v[size_t(j)];
      }
      deflate(w);
      double norm = 0.0;
      for (double x : w) norm += x * x;
      norm = std::sqrt(norm);
      // Below the extracted spectrum only the null space remains.
      if (norm <= 1e-12 * top) {
        rank_exhausted = true;
        break;
      }
      double next_lambda = 0.0;
      for (int i = 0; i < d; ++i) v[size_t(i)] = w[size_t(i)] / norm;
      std::vector<double> gv(size_t(d), 0.0);
      for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) gv[size_t(i)] += g.at(i, j) * v[size_t(j)];
      }
      for (int i = 0; i < d; ++i) next_lambda += v[size_t(i)] * gv[size_t(i)];
      if (iter > 16 && std::abs(next_lambda - lambda) <= 1e-15 * std::max(1.0, next_lambda)) {
        lambda = next_lambda;
        break;
      }
      lambda = next_lambda;
    }
    if (rank_exhausted) break;
    eigs.push_back(std::max(lambda, 0.0));
    vecs.push_back(v);
  }
  eigs.resize(size_t(d), 0.0);
  std::sort(eigs.begin(), eigs.end(), std::greater<>());
  return eigs;
}

double max_orthonormality_deviation(const Matrix& q) {
  double worst = 0.0;
  for (int i = 0; i < q.cols; ++i) {
    for (int j = 0; j < q.cols; ++j) {
      double s = 0.0;
      for (int t = 0; t < q.rows; ++t) s += q.at(t, i) * q.at(t, j);
      worst = std::max(worst, std::abs(s - (i == j ? 1.0 : 0.0)));
    }
  }
  return worst;
}

std::string factor_bytes(const linalg::SvdFactors& f) {
  std::string bytes;
  auto append = [&](const std::vector<double>& v) {
    bytes.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
  };
  append(f.u.data);
  append(f.sigma);
  append(f.v.data);
  return bytes;
}

}  // namespace

TEST_SUITE("linalg") {

TEST_CASE("svd of a diagonal matrix") {
  Matrix m(2, 2);
  m.at(0, 0) = 2.0;
  m.at(1, 1) = 1.0;
  const auto f = linalg::svd_thin(m);
  REQUIRE(f.sigma.size() == 2);
  CHECK(f.sigma[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(f.sigma[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(f.v.at(0, 0) == doctest::Approx(1.0));
  CHECK(f.v.at(1, 0) == doctest::Approx(0.0));
  CHECK(f.v.at(0, 1) == doctest::Approx(0.0));
  CHECK(f.v.at(1, 1) == doctest::Approx(1.0));
}

TEST_CASE("svd of the zero matrix") {
  Matrix m(4, 3);
  const auto f = linalg::svd_thin(m);
  REQUIRE(f.sigma.size() == 3);
  for (double s : f.sigma) CHECK(s == 0.0);
  CHECK(max_orthonormality_deviation(f.u) < 1e-12);
  CHECK(max_orthonormality_deviation(f.v) < 1e-12);
}

TEST_CASE("seeded 8x4 matrix reconstructs and matches the eigen oracle") {
  const Matrix m = seeded_matrix(42, 8, 4);
  const auto f = linalg::svd_thin(m);
  CHECK(linalg::frobenius_rel_error(m, linalg::reconstruct(f)) < 1e-10);
  const auto eigs = gram_eigenvalues_oracle(m);
  REQUIRE(eigs.size() >= f.sigma.size());
  for (size_t i = 0; i < f.sigma.size(); ++i) {
    const double want = std::sqrt(eigs[i]);
    CHECK(std::abs(f.sigma[i] - want) <= 1e-6 * std::max(want, 1e-30));
  }
}

TEST_CASE("svd invariants over random matrices") {
  Rng shape_rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    const int rows = 1 + shape_rng.next_below(48);
    const int cols = 1 + shape_rng.next_below(32);
    const Matrix m = seeded_matrix(1000 + uint64_t(trial), rows, cols);
    const auto f = linalg::svd_thin(m);
    CAPTURE(rows);
    CAPTURE(cols);
    CHECK(linalg::frobenius_rel_error(m, linalg::reconstruct(f)) < 1e-6);
    CHECK(max_orthonormality_deviation(f.u) < 1e-6);
    CHECK(max_orthonormality_deviation(f.v) < 1e-6);
    for (size_t i = 0; i + 1 < f.sigma.size(); ++i) CHECK(f.sigma[i] >= f.sigma[i + 1]);
    const auto eigs = gram_eigenvalues_oracle(m);
    const double top = std::sqrt(std::max(eigs[0], 0.0));
    for (size_t i = 0; i < f.sigma.size(); ++i) {
      const double want = std::sqrt(std::max(eigs[i], 0.0));
      CHECK(std::abs(f.sigma[i] - want) <= 1e-6 * std::max(top, 1e-30));
    }
  }
}

TEST_CASE("svd is deterministic") {
  const Matrix m = seeded_matrix(99, 12, 9);
  const auto a = linalg::svd_thin(m);
  const auto b = linalg::svd_thin(m);
  CHECK(factor_bytes(a) == factor_bytes(b));
}

TEST_CASE("svd rejects non-finite input naming the entry") {
  Matrix m(2, 2);
  m.at(1, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    linalg::svd_thin(m);
    FAIL("expected rejection");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(1, 0)") != std::string::npos);
  }
}

TEST_CASE("cosine similarity basics") {
  std::vector<double> v{0.3, -1.2, 2.0};
  CHECK(linalg::cosine_similarity(v, v) == doctest::Approx(1.0).epsilon(1e-12));
  std::vector<double> e1{1.0, 0.0}, e2{0.0, 1.0}, d{1.0, 1.0};
  CHECK(linalg::cosine_similarity(e1, e2) == doctest::Approx(0.0));
  CHECK(linalg::cosine_similarity(d, e1) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-12));
  bool degenerate = false;
  std::vector<double> zero{0.0, 0.0};
  CHECK(linalg::cosine_similarity(zero, e1, &degenerate) == 0.0);
  CHECK(degenerate);
}

TEST_CASE("frobenius relative error") {
  const Matrix m = seeded_matrix(5, 3, 3);
  CHECK(linalg::frobenius_rel_error(m, m) == 0.0);
  Matrix zero(3, 3);
  CHECK(linalg::frobenius_rel_error(m, zero) == doctest::Approx(1.0).epsilon(1e-12));

  // direct summation oracle on a seeded pair
  const Matrix a = seeded_matrix(17, 3, 3);
  const Matrix b = seeded_matrix(18, 3, 3);
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    num += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
    den += a.data[i] * a.data[i];
  }
  CHECK(linalg::frobenius_rel_error(a, b) ==
        doctest::Approx(std::sqrt(num) / std::sqrt(den)).epsilon(1e-12));

  Matrix wrong(2, 3);
  CHECK_THROWS_AS((void)linalg::frobenius_rel_error(m, wrong), std::invalid_argument);
}

}  // TEST_SUITE
