// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "helpers.hpp"
#include "mlaforge/error.hpp"
#include "mlaforge/linalg.hpp"

using namespace mlaforge;
using testing::gaussian;

namespace {

Eigen::MatrixXd to_eigen(const MatrixD& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
  return e;
}

// Eigenvalues of A^T A, descending; their square roots are the singular values.
std::vector<double> gram_spectrum(const MatrixD& a) {
  const Eigen::MatrixXd e = to_eigen(a);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(e.transpose() * e);
  std::vector<double> ev(es.eigenvalues().data(), es.eigenvalues().data() + es.eigenvalues().size());
  std::sort(ev.rbegin(), ev.rend());
  for (double& v : ev) v = std::max(v, 0.0);
  return ev;
}

double orthonormal_residual_cols(const MatrixD& u) {
  double worst = 0.0;
  for (std::size_t a = 0; a < u.cols(); ++a)
    for (std::size_t b = 0; b < u.cols(); ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < u.rows(); ++i) s += u(i, a) * u(i, b);
      worst = std::max(worst, std::abs(s - (a == b ? 1.0 : 0.0)));
    }
  return worst;
}

double recon_error_sq(const MatrixD& a, const SvdResult& s) {
  const MatrixD r = reconstruct(s);
  double e = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) e += (a.values()[i] - r.values()[i]) * (a.values()[i] - r.values()[i]);
  return e;
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
  const MatrixD a = gaussian(3, 4, 1);
  CHECK(matmul(MatrixD::identity(3), a) == a);
  const MatrixD x{{1, 2}, {3, 4}};
  const MatrixD y{{0}, {1}};
  CHECK(matmul(x, y) == MatrixD{{2}, {4}});
}

TEST_CASE("matmul matches a naive triple loop bit for bit") {
  const MatrixD a = gaussian(7, 5, 2);
  const MatrixD b = gaussian(5, 3, 3);
  MatrixD ref(7, 3);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t k = 0; k < 5; ++k)
      for (std::size_t j = 0; j < 3; ++j) ref(i, j) += a(i, k) * b(k, j);
  CHECK(max_abs_diff(matmul(a, b), ref) == 0.0);
}

TEST_CASE("matmul rejects mismatched shapes") {
  try {
    matmul(MatrixD(2, 3), MatrixD(2, 3));
    FAIL("expected shape error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::shape);
  }
}

TEST_CASE("softmax rows") {
  const MatrixD uniform = softmax_rows(MatrixD(1, 4));
  for (double v : uniform.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

  const MatrixD big = softmax_rows(MatrixD{{1000.0, 0.0}});
  CHECK(std::abs(big(0, 0) - 1.0) <= 1e-12);
  CHECK(std::abs(big(0, 1)) <= 1e-12);

  const MatrixD r = gaussian(5, 17, 4, 3.0);
  const MatrixD s = softmax_rows(r);
  for (std::size_t i = 0; i < r.rows(); ++i) {
    long double denom = 0.0L;
    for (double v : r.row(i)) denom += std::exp(static_cast<long double>(v));
    double sum = 0.0;
    for (std::size_t j = 0; j < r.cols(); ++j) {
      const double want = static_cast<double>(std::exp(static_cast<long double>(r(i, j))) / denom);
      CHECK(std::abs(s(i, j) - want) <= 1e-12);
      sum += s(i, j);
    }
    CHECK(std::abs(sum - 1.0) <= 1e-6);
  }
}

TEST_CASE("softmax rows in 32-bit sum to one") {
  const MatrixF r = gaussian(20, 33, 5, 10.0).cast<float>();
  const MatrixF s = softmax_rows(r);
  for (std::size_t i = 0; i < s.rows(); ++i) {
    double sum = 0.0;
    for (float v : s.row(i)) sum += v;
    CHECK(std::abs(sum - 1.0) <= 1e-6);
  }
}

TEST_CASE("thin_svd on a diagonal matrix") {
  const MatrixD a{{3, 0, 0}, {0, 2, 0}, {0, 0, 1}};
  const SvdResult full = thin_svd(a, 3);
  REQUIRE(full.sigma.size() == 3);
  CHECK(full.sigma[0] == doctest::Approx(3.0).epsilon(1e-14));
  CHECK(full.sigma[1] == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(full.sigma[2] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(full.discarded_sq_sum == 0.0);
  const SvdResult two = thin_svd(a, 2);
  CHECK(two.discarded_sq_sum == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("thin_svd truncation error equals the Gram-matrix spectrum tail") {
  const MatrixD a = gaussian(12, 8, 6);
  const std::vector<double> ev = gram_spectrum(a);
  double tail = 0.0;
  for (std::size_t i = 4; i < ev.size(); ++i) tail += ev[i];
  const SvdResult s = thin_svd(a, 4);
  CHECK(std::abs(s.discarded_sq_sum - tail) <= 1e-8 * tail);
  CHECK(std::abs(recon_error_sq(a, s) - tail) <= 1e-8 * tail);
  for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(s.full_sigma[i] * s.full_sigma[i] - ev[i]) <= 1e-9 * ev[0]);
}

TEST_CASE("thin_svd invariants on random matrices") {
  for (std::uint64_t seed = 10; seed < 16; ++seed) {
    const std::size_t m = 5 + seed % 7, n = 3 + (seed * 5) % 11;
    const MatrixD a = gaussian(m, n, seed);
    const std::size_t full = std::min(m, n);
    const SvdResult s = thin_svd(a, full);
    CHECK(std::is_sorted(s.sigma.rbegin(), s.sigma.rend()));
    CHECK(*std::min_element(s.sigma.begin(), s.sigma.end()) >= 0.0);
    CHECK(orthonormal_residual_cols(s.u) <= 1e-10);
    CHECK(orthonormal_residual_cols(transpose(s.vt)) <= 1e-10);
    CHECK(std::sqrt(recon_error_sq(a, s)) <= 1e-10 * frobenius_norm(a));
    for (std::size_t k = 0; k < full; ++k) {
      std::size_t arg = 0;
      for (std::size_t i = 1; i < m; ++i)
        if (std::abs(s.u(i, k)) > std::abs(s.u(arg, k))) arg = i;
      CHECK(s.u(arg, k) >= 0.0);
    }
    double prev = INFINITY;
    for (std::size_t t = 0; t <= full; ++t) {
      const SvdResult st = thin_svd(a, t);
      const double err = recon_error_sq(a, st);
      CHECK(err <= prev + 1e-12);
      CHECK(std::abs(err - st.discarded_sq_sum) <= 1e-8 * std::max(st.discarded_sq_sum, 1e-300) + 1e-20);
      prev = err;
    }
  }
}

TEST_CASE("thin_svd is deterministic") {
  const MatrixD a = gaussian(9, 13, 21);
  const SvdResult x = thin_svd(a, 5);
  const SvdResult y = thin_svd(a, 5);
  CHECK(x.u == y.u);
  CHECK(x.vt == y.vt);
  CHECK(x.sigma == y.sigma);
  CHECK(x.discarded_sq_sum == y.discarded_sq_sum);
}

TEST_CASE("thin_svd completes the basis of a rank-deficient matrix") {
  MatrixD a = gaussian(10, 2, 30);
  a = hcat(a, MatrixD(10, 3));  // rank 2, width 5
  const SvdResult s = thin_svd(a, 5);
  CHECK(s.sigma[2] <= 1e-12);
  CHECK(orthonormal_residual_cols(s.u) <= 1e-10);
  CHECK(std::sqrt(recon_error_sq(a, s)) <= 1e-10 * frobenius_norm(a));
}

TEST_CASE("thin_svd errors") {
  try {
    thin_svd(gaussian(4, 3, 1), 4);
    FAIL("expected rank error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::rank_bounds);
  }
  try {
    thin_svd(gaussian(40, 30, 2), 30, SvdOptions{1e-12, 1});
    FAIL("expected non-convergence");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::non_convergence);
    CHECK(std::string(e.what()).find("1 sweeps") != std::string::npos);
  }
}

TEST_CASE("all_finite and casts") {
  MatrixD a = gaussian(2, 2, 3);
  CHECK(all_finite(a));
  a(1, 1) = NAN;
  CHECK_FALSE(all_finite(a));
  const MatrixD b = gaussian(3, 3, 4);
  CHECK(b.cast<float>().cast<double>().cast<float>() == b.cast<float>());
}
