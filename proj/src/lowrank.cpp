// SPDX-License-Identifier: Apache-2.0
#include "mlaforge/lowrank.hpp"

#include <cmath>
#include <cstdio>

#include "mlaforge/error.hpp"

namespace mlaforge {

namespace {

struct Balanced {
  MatrixD down;  // m x t
  MatrixD up;    // t x n
  double discarded = 0.0;
};

Balanced balanced_svd(const MatrixD& a, std::size_t t, const SvdOptions& options) {
  Balanced out{MatrixD(a.rows(), t), MatrixD(t, a.cols()), 0.0};
  if (a.cols() == 0 || a.rows() == 0) return out;
  const SvdResult svd = thin_svd(a, t, options);
  for (std::size_t k = 0; k < t; ++k) {
    const double s = std::sqrt(svd.sigma[k]);
    for (std::size_t i = 0; i < a.rows(); ++i) out.down(i, k) = svd.u(i, k) * s;
    for (std::size_t j = 0; j < a.cols(); ++j) out.up(k, j) = svd.vt(k, j) * s;
  }
  out.discarded = svd.discarded_sq_sum;
  return out;
}

void check_blocks(const MatrixD& wk_nope, const MatrixD& wv) {
  if (wk_nope.rows() != wv.rows())
    throw Error(ErrorCode::shape, "W_k_nope has " + std::to_string(wk_nope.rows()) + " rows, W_v has " +
                                      std::to_string(wv.rows()));
}

void place(MatrixD& dst, const MatrixD& src, std::size_t row0, std::size_t col0) {
  for (std::size_t i = 0; i < src.rows(); ++i)
    for (std::size_t j = 0; j < src.cols(); ++j) dst(row0 + i, col0 + j) = src(i, j);
}

}  // namespace

double LatentFactors::total_discarded() const {
  double s = 0.0;
  for (double v : discarded) s += v;
  return s;
}

MatrixD LatentFactors::reconstruct() const { return matmul(down, hcat(up_k, up_v)); }

std::size_t max_joint_rank(const MatrixD& wk_nope, const MatrixD& wv) {
  return std::min(wk_nope.rows(), wk_nope.cols() + wv.cols());
}

std::size_t max_split_rank(const MatrixD& wk_nope, const MatrixD& wv) {
  const std::size_t rk = std::min(wk_nope.rows(), wk_nope.cols());
  const std::size_t rv = std::min(wv.rows(), wv.cols());
  return 2 * std::max(rk, rv);
}

LatentFactors factor_joint(const MatrixD& wk_nope, const MatrixD& wv, std::size_t d_kv_total,
                           const SvdOptions& options) {
  check_blocks(wk_nope, wv);
  const std::size_t limit = max_joint_rank(wk_nope, wv);
  if (d_kv_total == 0 || d_kv_total > limit)
    throw Error(ErrorCode::rank_bounds, "joint latent width " + std::to_string(d_kv_total) + " outside [1, " +
                                            std::to_string(limit) + "]");
  const Balanced b = balanced_svd(hcat(wk_nope, wv), d_kv_total, options);
  LatentFactors f;
  f.mode = SvdMode::joint;
  f.down = b.down;
  f.up_k = column_slice(b.up, 0, wk_nope.cols());
  f.up_v = column_slice(b.up, wk_nope.cols(), wv.cols());
  f.discarded = {b.discarded};
  return f;
}

LatentFactors factor_split(const MatrixD& wk_nope, const MatrixD& wv, std::size_t d_kv_total,
                           const SvdOptions& options) {
  check_blocks(wk_nope, wv);
  const std::size_t limit = max_split_rank(wk_nope, wv);
  if (d_kv_total == 0 || d_kv_total % 2 != 0 || d_kv_total > limit)
    throw Error(ErrorCode::rank_bounds, "split latent width " + std::to_string(d_kv_total) +
                                            " must be even and in [2, " + std::to_string(limit) + "]");
  const std::size_t half = d_kv_total / 2;
  const std::size_t tk = std::min(half, std::min(wk_nope.rows(), wk_nope.cols()));
  const std::size_t tv = std::min(half, std::min(wv.rows(), wv.cols()));
  const Balanced k = balanced_svd(wk_nope, tk, options);
  const Balanced v = balanced_svd(wv, tv, options);

  LatentFactors f;
  f.mode = SvdMode::split;
  f.down = MatrixD(wk_nope.rows(), d_kv_total);
  f.up_k = MatrixD(d_kv_total, wk_nope.cols());
  f.up_v = MatrixD(d_kv_total, wv.cols());
  place(f.down, k.down, 0, 0);
  place(f.down, v.down, 0, half);
  place(f.up_k, k.up, 0, 0);
  place(f.up_v, v.up, half, 0);
  f.discarded = {k.discarded, v.discarded};
  return f;
}

LatentFactors factor_per_head(const MatrixD& wk_nope, const MatrixD& wv, std::uint32_t n_g,
                              std::size_t d_kv_per_head, SvdMode mode, const SvdOptions& options) {
  check_blocks(wk_nope, wv);
  if (n_g == 0 || wk_nope.cols() % n_g != 0 || wv.cols() % n_g != 0)
    throw Error(ErrorCode::shape, "projection widths are not divisible by the kv head count");
  const std::size_t dc = wk_nope.cols() / n_g;
  const std::size_t dv = wv.cols() / n_g;
  LatentFactors f;
  f.mode = mode;
  f.per_head = true;
  f.down = MatrixD(wk_nope.rows(), n_g * d_kv_per_head);
  f.up_k = MatrixD(n_g * d_kv_per_head, wk_nope.cols());
  f.up_v = MatrixD(n_g * d_kv_per_head, wv.cols());
  for (std::uint32_t g = 0; g < n_g; ++g) {
    const MatrixD k = column_slice(wk_nope, g * dc, dc);
    const MatrixD v = column_slice(wv, g * dv, dv);
    const LatentFactors head = mode == SvdMode::joint ? factor_joint(k, v, d_kv_per_head, options)
                                                      : factor_split(k, v, d_kv_per_head, options);
    place(f.down, head.down, 0, g * d_kv_per_head);
    place(f.up_k, head.up_k, g * d_kv_per_head, g * dc);
    place(f.up_v, head.up_v, g * d_kv_per_head, g * dv);
    f.discarded.insert(f.discarded.end(), head.discarded.begin(), head.discarded.end());
  }
  return f;
}

LatentFactors factor_layer(const MatrixD& wk_nope, const MatrixD& wv, const ModelConfig& cfg,
                           const SvdOptions& options) {
  if (!cfg.conversion) throw Error(ErrorCode::invalid_config, "factorization needs a conversion block");
  const auto& conv = *cfg.conversion;
  if (conv.per_head) return factor_per_head(wk_nope, wv, cfg.n_g, conv.d_kv_per_head, conv.svd_mode, options);
  const std::size_t total = cfg.latent_width();
  return conv.svd_mode == SvdMode::joint ? factor_joint(wk_nope, wv, total, options)
                                         : factor_split(wk_nope, wv, total, options);
}

ReconstructionReport reconstruction_report(const std::vector<LatentFactors>& factors,
                                           const std::vector<MatrixD>& originals,
                                           const std::vector<LatentFactors>* other) {
  if (factors.size() != originals.size() || (other && other->size() != factors.size()))
    throw Error(ErrorCode::shape, "reconstruction report needs one original per factored layer");
  ReconstructionReport rep;
  if (!factors.empty()) rep.mode = factors[0].mode;
  if (other && !other->empty()) rep.other_mode = (*other)[0].mode;
  for (std::size_t l = 0; l < factors.size(); ++l) {
    const MatrixD approx = factors[l].reconstruct();
    if (approx.rows() != originals[l].rows() || approx.cols() != originals[l].cols())
      throw Error(ErrorCode::shape, "layer " + std::to_string(l) + " factors do not match the original shape");
    LayerReconstruction row;
    row.layer = static_cast<std::uint32_t>(l);
    double err = 0.0;
    for (std::size_t i = 0; i < approx.size(); ++i) {
      const double diff = originals[l].values()[i] - approx.values()[i];
      err += diff * diff;
      row.max_abs = std::max(row.max_abs, std::abs(diff));
    }
    row.frobenius = std::sqrt(err);
    const double base = frobenius_norm(originals[l]);
    row.relative = base > 0.0 ? row.frobenius / base : row.frobenius;
    row.discarded_sq_sum = factors[l].total_discarded();
    if (other) row.other_frobenius = frobenius_norm([&] {
        MatrixD d = (*other)[l].reconstruct();
        for (std::size_t i = 0; i < d.size(); ++i) d.values()[i] -= originals[l].values()[i];
        return d;
      }());
    rep.layers.push_back(row);
  }
  return rep;
}

nlohmann::json ReconstructionReport::to_json() const {
  nlohmann::json layers_json = nlohmann::json::array();
  for (const auto& row : layers) {
    nlohmann::json j = {{"layer", row.layer},
                        {"frobenius", row.frobenius},
                        {"relative", row.relative},
                        {"max_abs", row.max_abs},
                        {"discarded_sq_sum", row.discarded_sq_sum}};
    if (row.other_frobenius) j["other_frobenius"] = *row.other_frobenius;
    layers_json.push_back(j);
  }
  nlohmann::json out = {{"layers", layers_json}};
  if (mode) out["mode"] = to_string(*mode);
  if (other_mode) out["other_mode"] = to_string(*other_mode);
  return out;
}

std::string ReconstructionReport::table() const {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-6s %14s %12s %12s %16s", "layer", "frobenius", "relative", "max_abs",
                "discarded_sq");
  out += buf;
  if (other_mode) {
    std::snprintf(buf, sizeof buf, " %14s", (std::string(to_string(*other_mode)) + "_frob").c_str());
    out += buf;
  }
  out += '\n';
  for (const auto& row : layers) {
    std::snprintf(buf, sizeof buf, "%-6u %14.6e %12.4e %12.4e %16.6e", row.layer, row.frobenius, row.relative,
                  row.max_abs, row.discarded_sq_sum);
    out += buf;
    if (row.other_frobenius) {
      std::snprintf(buf, sizeof buf, " %14.6e", *row.other_frobenius);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

}  // namespace mlaforge
