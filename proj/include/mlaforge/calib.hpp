// SPDX-License-Identifier: Apache-2.0
//
// Per-subspace 2-norm contribution statistics over a calibration corpus.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "mlaforge/config.hpp"
#include "mlaforge/tensorio.hpp"

namespace mlaforge {

using ScoreTable = std::vector<std::vector<std::vector<double>>>;  // [layer][head or group][subspace]

struct NormStats {
  std::string config_digest;
  std::string corpus_digest;
  std::uint32_t seq_len = 0;
  std::uint32_t n_samples = 0;
  ScoreTable scores;  // [layer][kv group][subspace]

  nlohmann::json to_json() const;
  static NormStats from_json(const nlohmann::json& j);
  // Throws Error(schema) when the table does not match cfg.
  void check_against(const ModelConfig& cfg) const;

  friend bool operator==(const NormStats&, const NormStats&) = default;
};

inline constexpr std::uint32_t kDefaultCalibrationSamples = 1024;

// Mean over (sample, position) of |q chunk_k| * |k chunk_k| per query head,
// from pre-RoPE activations; k is the query head's kv group.
ScoreTable compute_head_scores(const ModelConfig& cfg, const TensorStore& store, const TokenCorpus& corpus,
                               std::uint32_t max_samples = kDefaultCalibrationSamples);

// Head scores averaged within each kv group.
NormStats compute_norm_stats(const ModelConfig& cfg, const TensorStore& store, const TokenCorpus& corpus,
                             std::uint32_t max_samples = kDefaultCalibrationSamples);

ScoreTable average_groups(const ModelConfig& cfg, const ScoreTable& head_scores);

void save_stats(const NormStats& stats, const std::filesystem::path& path);
// With `expect`, the table shape is checked against it (Error(schema)).
NormStats load_stats(const std::filesystem::path& path, const ModelConfig* expect = nullptr);

}  // namespace mlaforge
