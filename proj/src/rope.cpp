// SPDX-License-Identifier: Apache-2.0
#include "mlaforge/rope.hpp"

#include <algorithm>
#include <numeric>

#include "mlaforge/calib.hpp"
#include "mlaforge/tensorio.hpp"

namespace mlaforge {

FreqSpectrum::FreqSpectrum(std::uint32_t head_dim, double rope_base) : d_h(head_dim), base(rope_base) {
  thetas.resize(d_h / 2);
  for (std::uint32_t k = 0; k < d_h / 2; ++k)
    thetas[k] = std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(d_h));
}

namespace {

void check_r(std::uint32_t r, std::uint32_t d_h) {
  if (r > d_h / 2) {
    throw Error(ErrorCode::rank_bounds, "r = " + std::to_string(r) + " exceeds d_h/2 = " + std::to_string(d_h / 2));
  }
}

}  // namespace

SubspaceSet all_subspaces(std::uint32_t d_h) {
  SubspaceSet s(d_h / 2);
  std::iota(s.begin(), s.end(), 0u);
  return s;
}

SubspaceSet select_high(std::uint32_t r, std::uint32_t d_h) {
  check_r(r, d_h);
  SubspaceSet s(r);
  std::iota(s.begin(), s.end(), 0u);
  return s;
}

SubspaceSet select_low(std::uint32_t r, std::uint32_t d_h) {
  check_r(r, d_h);
  SubspaceSet s(r);
  std::iota(s.begin(), s.end(), d_h / 2 - r);
  return s;
}

SubspaceSet select_uniform(std::uint32_t r, std::uint32_t d_h) {
  check_r(r, d_h);
  SubspaceSet s;
  for (std::uint32_t k = 0; k < r; ++k) s.push_back(static_cast<std::uint32_t>((std::uint64_t{k} * d_h) / (2 * r)));
  return s;
}

SubspaceSet top_r(std::span<const double> scores, std::uint32_t r) {
  if (r > scores.size()) {
    throw Error(ErrorCode::rank_bounds,
                "r = " + std::to_string(r) + " exceeds subspace count " + std::to_string(scores.size()));
  }
  std::vector<std::uint32_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) { return scores[a] > scores[b]; });
  SubspaceSet s(order.begin(), order.begin() + r);
  std::sort(s.begin(), s.end());
  return s;
}

RopeSelection RopeSelection::broadcast(Strategy strategy, const SubspaceSet& set, std::uint32_t d_h,
                                       std::uint32_t n_layers, std::uint32_t n_groups) {
  RopeSelection sel;
  sel.strategy = strategy;
  sel.d_h = d_h;
  sel.r = static_cast<std::uint32_t>(set.size());
  sel.sets.assign(n_layers, std::vector<SubspaceSet>(n_groups, set));
  return sel;
}

RopeSelection RopeSelection::full(const ModelConfig& cfg) {
  return broadcast(Strategy::high, all_subspaces(cfg.d_h), cfg.d_h, cfg.n_layers, cfg.n_g);
}

RopeSelection RopeSelection::for_strategy(Strategy strategy, std::uint32_t r, const ModelConfig& cfg) {
  SubspaceSet set;
  switch (strategy) {
    case Strategy::high: set = select_high(r, cfg.d_h); break;
    case Strategy::low: set = select_low(r, cfg.d_h); break;
    case Strategy::uniform: set = select_uniform(r, cfg.d_h); break;
    case Strategy::two_norm:
      throw Error(ErrorCode::usage, "two_norm selection needs calibration statistics");
  }
  return broadcast(strategy, set, cfg.d_h, cfg.n_layers, cfg.n_g);
}

std::vector<std::uint32_t> RopeSelection::rope_dims(std::uint32_t layer, std::uint32_t group) const {
  std::vector<std::uint32_t> dims;
  for (std::uint32_t k : at(layer, group)) {
    dims.push_back(2 * k);
    dims.push_back(2 * k + 1);
  }
  return dims;
}

std::vector<std::uint32_t> RopeSelection::nope_dims(std::uint32_t layer, std::uint32_t group) const {
  const auto& set = at(layer, group);
  std::vector<std::uint32_t> dims;
  for (std::uint32_t k = 0; k < d_h / 2; ++k) {
    if (std::binary_search(set.begin(), set.end(), k)) continue;
    dims.push_back(2 * k);
    dims.push_back(2 * k + 1);
  }
  return dims;
}

void RopeSelection::check_against(const ModelConfig& cfg) const {
  if (d_h != cfg.d_h || n_layers() != cfg.n_layers || n_groups() != cfg.n_g) {
    throw Error(ErrorCode::variant_mismatch, "rope selection covers " + std::to_string(n_layers()) + " layers x " +
                                                 std::to_string(n_groups()) + " groups (d_h " +
                                                 std::to_string(d_h) + "), config needs " +
                                                 std::to_string(cfg.n_layers) + " x " + std::to_string(cfg.n_g) +
                                                 " (d_h " + std::to_string(cfg.d_h) + ")");
  }
  for (const auto& layer : sets) {
    for (const auto& set : layer) {
      if (set.size() != r || !std::is_sorted(set.begin(), set.end()) ||
          std::adjacent_find(set.begin(), set.end()) != set.end() ||
          (!set.empty() && set.back() >= d_h / 2)) {
        throw Error(ErrorCode::variant_mismatch, "rope selection set is not a sorted r-subset of [0, d_h/2)");
      }
    }
  }
}

Matrix<std::uint32_t> RopeSelection::to_tensor(std::uint32_t layer) const {
  Matrix<std::uint32_t> m(n_groups(), r);
  for (std::uint32_t g = 0; g < n_groups(); ++g)
    for (std::uint32_t j = 0; j < r; ++j) m(g, j) = sets[layer][g][j];
  return m;
}

RopeSelection RopeSelection::from_store(const ModelConfig& cfg, const TensorStore& store) {
  if (!cfg.is_converted()) throw Error(ErrorCode::variant_mismatch, "checkpoint carries no rope selection");
  RopeSelection sel;
  sel.strategy = cfg.conversion->strategy;
  sel.d_h = cfg.d_h;
  sel.r = cfg.conversion->r;
  sel.sets.resize(cfg.n_layers);
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
    const auto& m = store.get<std::uint32_t>(layer_name(l, "S"));
    for (std::uint32_t g = 0; g < m.rows(); ++g) sel.sets[l].emplace_back(m.row(g).begin(), m.row(g).end());
  }
  sel.check_against(cfg);
  return sel;
}

RopeSelection select_two_norm(const NormStats& stats, std::uint32_t r, bool global) {
  RopeSelection sel;
  sel.strategy = Strategy::two_norm;
  sel.r = r;
  const std::size_t n_layers = stats.scores.size();
  const std::size_t n_groups = n_layers ? stats.scores[0].size() : 0;
  const std::size_t n_sub = n_groups ? stats.scores[0][0].size() : 0;
  sel.d_h = static_cast<std::uint32_t>(2 * n_sub);
  if (r > n_sub) {
    throw Error(ErrorCode::rank_bounds,
                "r = " + std::to_string(r) + " exceeds subspace count " + std::to_string(n_sub));
  }
  if (global) {
    std::vector<double> total(n_sub, 0.0);
    for (const auto& layer : stats.scores)
      for (const auto& group : layer)
        for (std::size_t k = 0; k < n_sub; ++k) total[k] += group[k];
    const SubspaceSet set = top_r(total, r);
    sel.sets.assign(n_layers, std::vector<SubspaceSet>(n_groups, set));
    return sel;
  }
  sel.sets.resize(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l)
    for (const auto& group : stats.scores[l]) sel.sets[l].push_back(top_r(group, r));
  return sel;
}

namespace {

struct HeadLayout {
  std::uint32_t heads = 0;
  std::uint32_t groups = 0;
};

HeadLayout layout_for(std::size_t cols, const RopeSelection& sel, ProjectionRole role) {
  if (sel.d_h == 0 || cols % sel.d_h != 0)
    throw Error(ErrorCode::shape, "projection width " + std::to_string(cols) + " is not a multiple of d_h");
  HeadLayout l{static_cast<std::uint32_t>(cols / sel.d_h), sel.n_groups()};
  if (role == ProjectionRole::key && l.heads != l.groups)
    throw Error(ErrorCode::variant_mismatch, "key projection has " + std::to_string(l.heads) +
                                                 " heads but selection has " + std::to_string(l.groups) + " groups");
  if (role == ProjectionRole::query && (l.groups == 0 || l.heads % l.groups != 0))
    throw Error(ErrorCode::variant_mismatch, "query head count is not a multiple of the group count");
  return l;
}

}  // namespace

ProjectionSplit split_projection(const MatrixD& w, const RopeSelection& sel, std::uint32_t layer,
                                 ProjectionRole role) {
  const HeadLayout hl = layout_for(w.cols(), sel, role);
  const std::size_t dr = 2 * sel.r;
  const std::size_t dc = sel.d_h - dr;
  ProjectionSplit out{MatrixD(w.rows(), hl.heads * dr), MatrixD(w.rows(), hl.heads * dc)};
  for (std::uint32_t h = 0; h < hl.heads; ++h) {
    const std::uint32_t g = h * hl.groups / hl.heads;
    const auto rope = sel.rope_dims(layer, g);
    const auto nope = sel.nope_dims(layer, g);
    for (std::size_t i = 0; i < w.rows(); ++i) {
      for (std::size_t j = 0; j < rope.size(); ++j) out.rope(i, h * dr + j) = w(i, h * sel.d_h + rope[j]);
      for (std::size_t j = 0; j < nope.size(); ++j) out.nope(i, h * dc + j) = w(i, h * sel.d_h + nope[j]);
    }
  }
  return out;
}

MatrixD reassemble_projection(const ProjectionSplit& parts, const RopeSelection& sel, std::uint32_t layer,
                              ProjectionRole role) {
  const std::size_t dr = 2 * sel.r;
  const std::size_t dc = sel.d_h - dr;
  const std::size_t heads = dr ? parts.rope.cols() / dr : parts.nope.cols() / dc;
  const std::size_t rows = dr ? parts.rope.rows() : parts.nope.rows();
  MatrixD w(rows, heads * sel.d_h);
  const HeadLayout hl = layout_for(w.cols(), sel, role);
  for (std::uint32_t h = 0; h < hl.heads; ++h) {
    const std::uint32_t g = h * hl.groups / hl.heads;
    const auto rope = sel.rope_dims(layer, g);
    const auto nope = sel.nope_dims(layer, g);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < rope.size(); ++j) w(i, h * sel.d_h + rope[j]) = parts.rope(i, h * dr + j);
      for (std::size_t j = 0; j < nope.size(); ++j) w(i, h * sel.d_h + nope[j]) = parts.nope(i, h * dc + j);
    }
  }
  return w;
}

}  // namespace mlaforge
