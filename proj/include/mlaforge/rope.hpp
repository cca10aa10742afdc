// SPDX-License-Identifier: Apache-2.0
//
// Rotary embeddings in the chunked layout (subspace k = dims 2k, 2k+1) and
// the selection of which subspaces keep their rotation after conversion.
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mlaforge/config.hpp"
#include "mlaforge/linalg.hpp"

namespace mlaforge {

struct NormStats;
class TensorStore;

struct FreqSpectrum {
  std::uint32_t d_h = 0;
  double base = 1e4;
  std::vector<double> thetas;  // theta_k = base^(-2k/d_h), k < d_h/2

  FreqSpectrum(std::uint32_t head_dim, double rope_base);
};

using SubspaceSet = std::vector<std::uint32_t>;

// Rotates chunk [2k, 2k+1] of a d_h-vector by position * theta_k for every
// k in `subspaces`; other chunks are left as they are.
template <typename T>
void apply_rope(std::span<T> x, const FreqSpectrum& spec, std::span<const std::uint32_t> subspaces,
                double position) {
  for (std::uint32_t k : subspaces) {
    const double angle = position * spec.thetas[k];
    const T c = static_cast<T>(std::cos(angle));
    const T s = static_cast<T>(std::sin(angle));
    const T x0 = x[2 * k];
    const T x1 = x[2 * k + 1];
    x[2 * k] = c * x0 - s * x1;
    x[2 * k + 1] = s * x0 + c * x1;
  }
}

// Same rotation on a packed rope-only vector: pair j carries subspace subspaces[j].
template <typename T>
void apply_rope_packed(std::span<T> x, const FreqSpectrum& spec, std::span<const std::uint32_t> subspaces,
                       double position) {
  for (std::size_t j = 0; j < subspaces.size(); ++j) {
    const double angle = position * spec.thetas[subspaces[j]];
    const T c = static_cast<T>(std::cos(angle));
    const T s = static_cast<T>(std::sin(angle));
    const T x0 = x[2 * j];
    const T x1 = x[2 * j + 1];
    x[2 * j] = c * x0 - s * x1;
    x[2 * j + 1] = s * x0 + c * x1;
  }
}

SubspaceSet all_subspaces(std::uint32_t d_h);
SubspaceSet select_high(std::uint32_t r, std::uint32_t d_h);
SubspaceSet select_low(std::uint32_t r, std::uint32_t d_h);
SubspaceSet select_uniform(std::uint32_t r, std::uint32_t d_h);

// Indices of the r largest scores, ties toward the smaller index, sorted ascending.
SubspaceSet top_r(std::span<const double> scores, std::uint32_t r);

struct RopeSelection {
  Strategy strategy = Strategy::high;
  std::uint32_t d_h = 0;
  std::uint32_t r = 0;
  std::vector<std::vector<SubspaceSet>> sets;  // [layer][kv group]

  static RopeSelection broadcast(Strategy strategy, const SubspaceSet& set, std::uint32_t d_h,
                                 std::uint32_t n_layers, std::uint32_t n_groups);
  static RopeSelection full(const ModelConfig& cfg);
  static RopeSelection for_strategy(Strategy strategy, std::uint32_t r, const ModelConfig& cfg);

  std::uint32_t n_layers() const { return static_cast<std::uint32_t>(sets.size()); }
  std::uint32_t n_groups() const { return sets.empty() ? 0 : static_cast<std::uint32_t>(sets[0].size()); }
  const SubspaceSet& at(std::uint32_t layer, std::uint32_t group) const { return sets.at(layer).at(group); }

  std::vector<std::uint32_t> rope_dims(std::uint32_t layer, std::uint32_t group) const;
  std::vector<std::uint32_t> nope_dims(std::uint32_t layer, std::uint32_t group) const;

  // Throws Error(variant_mismatch) when layer/group counts or r disagree with cfg.
  void check_against(const ModelConfig& cfg) const;

  // `L{l}.S` tensor: n_groups x r indices.
  Matrix<std::uint32_t> to_tensor(std::uint32_t layer) const;
  static RopeSelection from_store(const ModelConfig& cfg, const TensorStore& store);

  friend bool operator==(const RopeSelection&, const RopeSelection&) = default;
};

// Per layer and kv group, the r subspaces with the largest 2-norm score.
// `global` forces one set for the whole model (scores summed over layers and groups).
RopeSelection select_two_norm(const NormStats& stats, std::uint32_t r, bool global = false);

enum class ProjectionRole { query, key };

struct ProjectionSplit {
  MatrixD rope;  // d x n*2r
  MatrixD nope;  // d x n*(d_h - 2r)
};

// Per head, the rope-dim columns of W go to `rope` and the remaining columns
// to `nope`, each ascending. Query head h uses the set of group h*n_g/n_h.
ProjectionSplit split_projection(const MatrixD& w, const RopeSelection& sel, std::uint32_t layer,
                                 ProjectionRole role);
MatrixD reassemble_projection(const ProjectionSplit& parts, const RopeSelection& sel, std::uint32_t layer,
                              ProjectionRole role);

}  // namespace mlaforge
