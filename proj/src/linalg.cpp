// SPDX-License-Identifier: Apache-2.0
#include "mlaforge/linalg.hpp"

#include <numeric>

namespace mlaforge {

const char* to_string(DType dtype) {
  switch (dtype) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::u32: return "u32";
  }
  return "?";
}

DType parse_dtype(const std::string& name) {
  if (name == "f32") return DType::f32;
  if (name == "f64") return DType::f64;
  if (name == "u32") return DType::u32;
  throw Error(ErrorCode::schema, "unknown dtype '" + name + "'");
}

std::size_t dtype_size(DType dtype) {
  return dtype == DType::f64 ? 8 : 4;
}

namespace {

// Column-major working copy: col(j) is contiguous.
struct Columns {
  std::size_t m = 0;
  std::size_t n = 0;
  std::vector<double> data;

  double* col(std::size_t j) { return data.data() + j * m; }
  const double* col(std::size_t j) const { return data.data() + j * m; }
};

Columns to_columns(const MatrixD& a) {
  Columns c{a.rows(), a.cols(), std::vector<double>(a.size())};
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) c.data[j * c.m + i] = a(i, j);
  return c;
}

void rotate(double* x, double* y, std::size_t len, double c, double s) {
  for (std::size_t i = 0; i < len; ++i) {
    const double xi = x[i];
    const double yi = y[i];
    x[i] = c * xi - s * yi;
    y[i] = s * xi + c * yi;
  }
}

// Replace zero columns of u (m x k) with unit vectors orthogonal to the rest.
void complete_basis(Columns& u, const std::vector<bool>& is_zero) {
  for (std::size_t j = 0; j < u.n; ++j) {
    if (!is_zero[j]) continue;
    for (std::size_t e = 0; e < u.m; ++e) {
      std::vector<double> cand(u.m, 0.0);
      cand[e] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t o = 0; o < u.n; ++o) {
          if (o == j) continue;
          if (is_zero[o] && o > j) continue;
          const double* q = u.col(o);
          double proj = 0.0;
          for (std::size_t i = 0; i < u.m; ++i) proj += q[i] * cand[i];
          for (std::size_t i = 0; i < u.m; ++i) cand[i] -= proj * q[i];
        }
      }
      double norm = 0.0;
      for (double v : cand) norm += v * v;
      norm = std::sqrt(norm);
      if (norm > 0.5) {
        double* dst = u.col(j);
        for (std::size_t i = 0; i < u.m; ++i) dst[i] = cand[i] / norm;
        break;
      }
    }
  }
}

struct FullSvd {
  Columns u;  // m x n
  std::vector<double> sigma;
  Columns v;  // n x n
  int sweeps = 0;
};

// Requires m >= n.
FullSvd jacobi_tall(const MatrixD& a, const SvdOptions& options) {
  Columns w = to_columns(a);
  const std::size_t m = w.m;
  const std::size_t n = w.n;
  Columns v{n, n, std::vector<double>(n * n, 0.0)};
  for (std::size_t j = 0; j < n; ++j) v.col(j)[j] = 1.0;

  int sweep = 0;
  bool converged = n < 2;
  while (!converged) {
    if (sweep >= options.max_sweeps) {
      throw Error(ErrorCode::non_convergence,
                  "thin_svd: no convergence after " + std::to_string(sweep) + " sweeps");
    }
    ++sweep;
    converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* ap = w.col(p);
        double* aq = w.col(q);
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += ap[i] * ap[i];
          beta += aq[i] * aq[i];
          gamma += ap[i] * aq[i];
        }
        if (alpha == 0.0 || beta == 0.0 || gamma == 0.0) continue;
        if (std::abs(gamma) <= options.tolerance * std::sqrt(alpha * beta)) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate(ap, aq, m, c, s);
        rotate(v.col(p), v.col(q), n, c, s);
      }
    }
  }

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double* col = w.col(j);
    double acc = 0.0;
    for (std::size_t i = 0; i < m; ++i) acc += col[i] * col[i];
    norms[j] = std::sqrt(acc);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  FullSvd out{Columns{m, n, std::vector<double>(m * n, 0.0)}, std::vector<double>(n),
              Columns{n, n, std::vector<double>(n * n, 0.0)}, sweep};
  std::vector<bool> is_zero(n, false);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.sigma[k] = norms[j];
    std::copy_n(v.col(j), n, out.v.col(k));
    if (norms[j] > 0.0) {
      const double* src = w.col(j);
      double* dst = out.u.col(k);
      for (std::size_t i = 0; i < m; ++i) dst[i] = src[i] / norms[j];
    } else {
      is_zero[k] = true;
    }
  }
  complete_basis(out.u, is_zero);
  return out;
}

}  // namespace

SvdResult thin_svd(const MatrixD& a, std::size_t t, const SvdOptions& options) {
  const std::size_t full_rank = std::min(a.rows(), a.cols());
  if (t > full_rank) {
    throw Error(ErrorCode::rank_bounds, "thin_svd: rank " + std::to_string(t) + " exceeds min(" +
                                            std::to_string(a.rows()) + ", " +
                                            std::to_string(a.cols()) + ")");
  }
  const bool wide = a.rows() < a.cols();
  FullSvd f = jacobi_tall(wide ? transpose(a) : a, options);

  // Tall: A = U S V^T. Wide: A^T = U' S V'^T, so A = V' S U'^T.
  const Columns& left = wide ? f.v : f.u;
  const Columns& right = wide ? f.u : f.v;
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();

  SvdResult out;
  out.sweeps = f.sweeps;
  out.full_sigma = f.sigma;
  out.sigma.assign(f.sigma.begin(), f.sigma.begin() + static_cast<std::ptrdiff_t>(t));
  for (std::size_t k = t; k < f.sigma.size(); ++k) out.discarded_sq_sum += f.sigma[k] * f.sigma[k];

  out.u = MatrixD(m, t);
  out.vt = MatrixD(t, n);
  for (std::size_t k = 0; k < t; ++k) {
    const double* ucol = left.col(k);
    const double* vcol = right.col(k);
    std::size_t arg = 0;
    for (std::size_t i = 1; i < m; ++i)
      if (std::abs(ucol[i]) > std::abs(ucol[arg])) arg = i;
    const double sign = ucol[arg] < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < m; ++i) out.u(i, k) = sign * ucol[i];
    for (std::size_t j = 0; j < n; ++j) out.vt(k, j) = sign * vcol[j];
  }
  return out;
}

MatrixD reconstruct(const SvdResult& svd) {
  MatrixD scaled = svd.u;
  for (std::size_t i = 0; i < scaled.rows(); ++i)
    for (std::size_t k = 0; k < scaled.cols(); ++k) scaled(i, k) *= svd.sigma[k];
  return matmul(scaled, svd.vt);
}

}  // namespace mlaforge
