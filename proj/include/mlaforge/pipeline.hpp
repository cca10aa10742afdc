// SPDX-License-Identifier: Apache-2.0
//
// Source checkpoint -> converted checkpoint, and the equivalence checks
// between the two.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mlaforge/attention.hpp"
#include "mlaforge/calib.hpp"
#include "mlaforge/config.hpp"
#include "mlaforge/lowrank.hpp"
#include "mlaforge/rope.hpp"
#include "mlaforge/tensorio.hpp"

namespace mlaforge {

// Defaults: two_norm, joint, r = d_h/16 (at least 1), d_kv_per_head = d_h/2.
ConversionConfig default_conversion(const ModelConfig& cfg);

struct ConversionResult {
  Checkpoint checkpoint;
  RopeSelection selection;
  std::vector<LatentFactors> factors;  // per layer, before the f32 cast
  std::vector<MatrixD> originals;      // per layer [W_k_nope, W_v]
};

// `conversion` supplies strategy, r, d_kv_per_head, svd_mode and flags; the
// ledger fields are filled in. Stats are required iff strategy is two_norm.
ConversionResult convert(const ModelConfig& cfg, const TensorStore& store, const ConversionConfig& conversion,
                         const NormStats* stats = nullptr);

// [W_k_nope, W_v] per layer of the source, split with `sel`.
std::vector<MatrixD> latent_originals(const ModelConfig& cfg, const TensorStore& store, const RopeSelection& sel);

// Factors read back from a converted checkpoint.
std::vector<LatentFactors> stored_factors(const ModelConfig& cfg, const TensorStore& store);

struct VerifyLink {
  std::string name;
  double deviation = 0.0;
  double tolerance = 0.0;
  bool enforced = true;  // false: approximation gap reported only
  bool pass() const { return !enforced || deviation <= tolerance; }
};

struct VerifyReport {
  std::vector<VerifyLink> links;
  ReconstructionReport reconstruction;
  std::vector<std::string> warnings;
  std::size_t sequences = 0;
  std::size_t seq_len = 0;

  bool pass() const;
  nlohmann::json to_json() const;
  std::string table() const;
};

struct VerifyOptions {
  std::vector<std::vector<std::uint32_t>> tokens;  // empty: random sequences
  std::uint64_t seed = 0;
  std::size_t sequences = 4;
  std::size_t seq_len = 32;
  std::size_t decode_steps = 32;
  std::optional<std::string> corpus_digest;  // compared with the conversion ledger
};

// Throws Error(variant_mismatch) when the checkpoints do not share an architecture.
VerifyReport verify(const Checkpoint& source, const Checkpoint& converted, const VerifyOptions& options);
// Same, on already loaded weights (the converted weights may be tampered).
VerifyReport verify(const AttentionWeights& source, const AttentionWeights& converted,
                    const ReconstructionReport& reconstruction, const VerifyOptions& options);

std::vector<std::vector<std::uint32_t>> random_sequences(std::uint32_t vocab, std::size_t count, std::size_t len,
                                                         std::uint64_t seed);

}  // namespace mlaforge
