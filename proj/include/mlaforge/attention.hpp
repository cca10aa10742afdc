// SPDX-License-Identifier: Apache-2.0
//
// Forward paths over the toy pre-norm decoder:
//   full        full-RoPE MHA/GQA on a source checkpoint
//   partial     RoPE kept only on a selected subspace set, rest NoPE
//   mla_naive   converted checkpoint, k_nope and v re-expanded from c_kv
//   mla_absorbed converted checkpoint, scores and outputs taken directly
//               against cached latents through the pre-multiplied matrices
// Every path runs as "append the new tokens to a cache, then attend", so a
// batched forward is a prefill into an empty cache and decode_step is the
// same call with one token.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mlaforge/cachemodel.hpp"
#include "mlaforge/config.hpp"
#include "mlaforge/linalg.hpp"
#include "mlaforge/rope.hpp"
#include "mlaforge/tensorio.hpp"

namespace mlaforge {

enum class Variant { mha_full, mha_partial, mla };
enum class ForwardPath { full, partial, mla_naive, mla_absorbed };

const char* to_string(ForwardPath path);
ForwardPath parse_forward_path(const std::string& name);

template <typename T>
struct LayerParams {
  Matrix<T> norm1, norm2, up, down, wo;
  // source checkpoints
  Matrix<T> wq, wk, wv;
  // converted checkpoints
  Matrix<T> wq_rope, wq_nope, wk_rope, wdkv, wuk, wuv, wq_absorbed, wo_absorbed;
};

template <typename T>
struct ModelParams {
  ModelConfig cfg;
  Matrix<T> embed, lm_head;
  std::vector<LayerParams<T>> layers;

  static ModelParams from_store(const ModelConfig& cfg, const TensorStore& store);
};

// Absorbed products for one converted layer, computed in double from the
// given factors and returned at precision T:
//   q_absorbed (d x n_h*D):  head h block = W_q,nope^(h) W_uk^(g)^T
//   o_absorbed (n_h*D x d):  head h block = W_uv^(g) W_o^(h)
struct AbsorbedProducts {
  MatrixD q_absorbed;
  MatrixD o_absorbed;
};
AbsorbedProducts absorb(const ModelConfig& cfg, const MatrixD& wq_nope, const MatrixD& wuk, const MatrixD& wuv,
                        const MatrixD& wo);

class AttentionWeights {
 public:
  // Partial weights are source weights paired with a selection.
  static AttentionWeights from_store(const ModelConfig& cfg, const TensorStore& store,
                                     std::optional<RopeSelection> selection = std::nullopt);

  Variant variant() const { return variant_; }
  const ModelConfig& config() const { return params_.cfg; }
  const ModelParams<float>& params() const { return params_; }
  ModelParams<float>& mutable_params() { return params_; }
  // Converted: the stored selection. Partial: the given one.
  const RopeSelection& selection() const { return selection_; }

  // Max over layers of max|stored - recomputed| / max(1, max|recomputed|)
  // for both absorbed products. Zero for source weights.
  double absorbed_product_deviation() const;

 private:
  Variant variant_ = Variant::mha_full;
  ModelParams<float> params_;
  RopeSelection selection_;
};

template <typename T>
struct FullLayerCacheT {
  Matrix<T> k;  // positions x n_g*d_h, post-RoPE
  Matrix<T> v;
};

template <typename T>
struct FullCacheT {
  std::vector<FullLayerCacheT<T>> layers;
  std::size_t positions() const { return layers.empty() ? 0 : layers[0].k.rows(); }
};

template <typename T>
struct LatentLayerCacheT {
  Matrix<T> k_rope;  // positions x n_g*2r, post-RoPE
  Matrix<T> c_kv;    // positions x D_kv
};

template <typename T>
struct LatentCacheT {
  std::vector<LatentLayerCacheT<T>> layers;
  std::size_t positions() const { return layers.empty() ? 0 : layers[0].c_kv.rows(); }
};

template <typename T>
struct QuantizedLatentLayerCacheT {
  QuantizedRows c_kv_codes;
  QuantizedRows k_rope_codes;  // only with spec.include_rope
  // Read views: dequantized c_kv, and k_rope (dequantized or as computed).
  Matrix<T> c_kv;
  Matrix<T> k_rope;
};

template <typename T>
struct QuantizedLatentCacheT {
  QuantSpec spec;
  std::vector<QuantizedLatentLayerCacheT<T>> layers;
  std::size_t positions() const { return layers.empty() ? 0 : layers[0].c_kv.rows(); }
};

template <typename T>
using KvCacheT = std::variant<FullCacheT<T>, LatentCacheT<T>, QuantizedLatentCacheT<T>>;

using FullCache = FullCacheT<float>;
using LatentCache = LatentCacheT<float>;
using QuantizedLatentCache = QuantizedLatentCacheT<float>;
using KvCache = KvCacheT<float>;

enum class CacheKind { full, latent, quantized };

KvCache make_cache(const AttentionWeights& weights, CacheKind kind, const QuantSpec& quant = {});
std::size_t cache_positions(const KvCache& cache);

struct ForwardResult {
  MatrixF logits;                          // tokens x vocab
  std::vector<MatrixF> attention_outputs;  // per layer, tokens x d (after W_o)
};

// Appends `tokens` (at positions cache_positions(cache)...) and returns their
// logits. Throws Error(variant_mismatch) when path, weights and cache disagree.
ForwardResult forward(const AttentionWeights& weights, ForwardPath path, std::span<const std::uint32_t> tokens,
                      KvCache& cache, const RopeSelection* selection = nullptr);

ForwardResult forward_full(const AttentionWeights& weights, std::span<const std::uint32_t> tokens);
ForwardResult forward_partial(const AttentionWeights& weights, const RopeSelection& selection,
                              std::span<const std::uint32_t> tokens);
// With `quant`, c_kv rows pass through the quantizer exactly as a quantized
// cache would store them.
ForwardResult forward_mla_naive(const AttentionWeights& weights, std::span<const std::uint32_t> tokens,
                                const std::optional<QuantSpec>& quant = std::nullopt);
ForwardResult forward_mla_absorbed(const AttentionWeights& weights, std::span<const std::uint32_t> tokens,
                                   const std::optional<QuantSpec>& quant = std::nullopt);

// One token through `path`; appends one row per layer to the cache.
std::vector<float> decode_step(const AttentionWeights& weights, ForwardPath path, KvCache& cache,
                               std::uint32_t token, const RopeSelection* selection = nullptr);

// Pre-RoPE query/key activations of one layer, handed to calibration.
template <typename T>
using QkObserver = std::function<void(std::uint32_t layer, const Matrix<T>& q, const Matrix<T>& k)>;

// Double-precision full-RoPE forward over a source checkpoint, used by
// calibration. Returns logits.
MatrixD forward_source_f64(const ModelParams<double>& params, std::span<const std::uint32_t> tokens,
                           const QkObserver<double>& observer);

}  // namespace mlaforge
