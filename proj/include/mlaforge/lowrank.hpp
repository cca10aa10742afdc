// SPDX-License-Identifier: Apache-2.0
//
// Latent factorization of [W_k_nope, W_v] for one layer.
//   joint: one truncated SVD of the concatenation at rank D_kv
//   split: W_k_nope and W_v separately at rank D_kv/2 each, packaged as
//          down = [W_dk, W_dv] with block-diagonal up matrices
// Both balance sqrt(sigma) between the down and up factors.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mlaforge/config.hpp"
#include "mlaforge/linalg.hpp"

namespace mlaforge {

struct LatentFactors {
  SvdMode mode = SvdMode::joint;
  bool per_head = false;
  MatrixD down;  // d x D_kv
  MatrixD up_k;  // D_kv x n_g*d_c
  MatrixD up_v;  // D_kv x n_g*d_h
  // One entry per SVD: joint {all}; split {k, v}; per-head joint {g0, g1, ...};
  // per-head split {k0, v0, k1, v1, ...}.
  std::vector<double> discarded;

  std::size_t latent_width() const { return down.cols(); }
  double total_discarded() const;
  // down * [up_k, up_v]
  MatrixD reconstruct() const;
};

// Throw Error(rank_bounds) on D_kv = 0 or a rank beyond the block shapes.
LatentFactors factor_joint(const MatrixD& wk_nope, const MatrixD& wv, std::size_t d_kv_total,
                           const SvdOptions& options = {});
// Each half is truncated to min(D_kv/2, block rank); unused latent columns are
// zero, so K and V blocks of unequal rank still reconstruct exactly at D_kv/2 =
// the larger block rank.
LatentFactors factor_split(const MatrixD& wk_nope, const MatrixD& wv, std::size_t d_kv_total,
                           const SvdOptions& options = {});
// Independent factorization per kv head, latent width d_kv_per_head each.
LatentFactors factor_per_head(const MatrixD& wk_nope, const MatrixD& wv, std::uint32_t n_g,
                              std::size_t d_kv_per_head, SvdMode mode, const SvdOptions& options = {});

LatentFactors factor_layer(const MatrixD& wk_nope, const MatrixD& wv, const ModelConfig& cfg,
                           const SvdOptions& options = {});

// Largest D_kv accepted for the given block shapes.
std::size_t max_joint_rank(const MatrixD& wk_nope, const MatrixD& wv);
std::size_t max_split_rank(const MatrixD& wk_nope, const MatrixD& wv);

struct LayerReconstruction {
  std::uint32_t layer = 0;
  double frobenius = 0.0;      // |[W_k_nope, W_v] - down [up_k, up_v]|_F
  double relative = 0.0;       // frobenius / |[W_k_nope, W_v]|_F
  double max_abs = 0.0;
  double discarded_sq_sum = 0.0;
  std::optional<double> other_frobenius;  // same layer under the other svd mode
};

struct ReconstructionReport {
  std::vector<LayerReconstruction> layers;
  std::optional<SvdMode> mode;
  std::optional<SvdMode> other_mode;

  nlohmann::json to_json() const;
  std::string table() const;
};

// originals[l] is [W_k_nope, W_v] of layer l. `other` holds factors of the
// same layers under the other mode.
ReconstructionReport reconstruction_report(const std::vector<LatentFactors>& factors,
                                           const std::vector<MatrixD>& originals,
                                           const std::vector<LatentFactors>* other = nullptr);

}  // namespace mlaforge
