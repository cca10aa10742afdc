// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace mlaforge {

enum class Strategy { high, low, uniform, two_norm };
enum class SvdMode { split, joint };

const char* to_string(Strategy s);
const char* to_string(SvdMode m);
Strategy parse_strategy(const std::string& name);
SvdMode parse_svd_mode(const std::string& name);

// Conversion block of a converted checkpoint, including the factorization
// ledger written at convert time.
struct ConversionConfig {
  Strategy strategy = Strategy::two_norm;
  std::uint32_t r = 0;
  std::uint32_t d_kv_per_head = 0;
  SvdMode svd_mode = SvdMode::joint;
  bool per_head = false;
  bool global_selection = false;

  // discarded_sq_sum[layer] holds one entry per factorization in that layer.
  std::vector<std::vector<double>> discarded_sq_sum;
  std::string corpus_digest;

  friend bool operator==(const ConversionConfig&, const ConversionConfig&) = default;
};

struct ModelConfig {
  std::uint32_t d = 64;
  std::uint32_t n_h = 4;
  std::uint32_t n_g = 4;
  std::uint32_t d_h = 16;
  std::uint32_t n_layers = 2;
  double rope_base = 1e4;
  std::uint32_t vocab = 256;
  std::uint32_t d_ff = 0;  // 0 means 4 * d
  std::optional<ConversionConfig> conversion;

  bool is_converted() const { return conversion.has_value(); }
  std::uint32_t mlp_width() const { return d_ff == 0 ? 4 * d : d_ff; }
  std::uint32_t subspaces() const { return d_h / 2; }
  std::uint32_t group_of(std::uint32_t head) const { return head * n_g / n_h; }

  // Requires a conversion block.
  std::uint32_t rope_dim() const { return 2 * conversion->r; }
  std::uint32_t nope_dim() const { return d_h - rope_dim(); }
  std::uint32_t latent_width() const { return n_g * conversion->d_kv_per_head; }

  // Throws Error(invalid_config) naming the first violated invariant.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  // Digest of the architecture fields only (conversion block excluded).
  std::string digest() const;

  ModelConfig architecture() const {
    ModelConfig c = *this;
    c.conversion.reset();
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

}  // namespace mlaforge
