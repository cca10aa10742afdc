// SPDX-License-Identifier: Apache-2.0
#include "mlaforge/attention.hpp"

#include <cmath>

namespace mlaforge {

const char* to_string(ForwardPath path) {
  switch (path) {
    case ForwardPath::full: return "full";
    case ForwardPath::partial: return "partial";
    case ForwardPath::mla_naive: return "mla";
    case ForwardPath::mla_absorbed: return "mla-absorbed";
  }
  return "?";
}

ForwardPath parse_forward_path(const std::string& name) {
  if (name == "full") return ForwardPath::full;
  if (name == "partial") return ForwardPath::partial;
  if (name == "mla" || name == "mla-naive" || name == "mla_naive") return ForwardPath::mla_naive;
  if (name == "mla-absorbed" || name == "mla_absorbed") return ForwardPath::mla_absorbed;
  throw Error(ErrorCode::usage, "unknown variant '" + name + "' (expected full, partial, mla, mla-absorbed)");
}

template <typename T>
ModelParams<T> ModelParams<T>::from_store(const ModelConfig& cfg, const TensorStore& store) {
  check_manifest(cfg, store);
  ModelParams<T> p;
  p.cfg = cfg;
  p.embed = store.get_as<T>("embed");
  p.lm_head = store.get_as<T>("lm_head");
  p.layers.resize(cfg.n_layers);
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
    auto& L = p.layers[l];
    auto get = [&](const char* leaf) { return store.get_as<T>(layer_name(l, leaf)); };
    L.norm1 = get("norm1");
    L.norm2 = get("norm2");
    L.up = get("mlp.up");
    L.down = get("mlp.down");
    L.wo = get("Wo");
    if (!cfg.is_converted()) {
      L.wq = get("Wq");
      L.wk = get("Wk");
      L.wv = get("Wv");
    } else {
      L.wq_rope = get("Wq_rope");
      L.wq_nope = get("Wq_nope");
      L.wk_rope = get("Wk_rope");
      L.wdkv = get("Wdkv");
      L.wuk = get("Wuk");
      L.wuv = get("Wuv");
      L.wq_absorbed = get("Wq_absorbed");
      L.wo_absorbed = get("Wo_absorbed");
    }
  }
  return p;
}

template struct ModelParams<float>;
template struct ModelParams<double>;

AbsorbedProducts absorb(const ModelConfig& cfg, const MatrixD& wq_nope, const MatrixD& wuk, const MatrixD& wuv,
                        const MatrixD& wo) {
  const std::size_t dc = cfg.nope_dim();
  const std::size_t dh = cfg.d_h;
  const std::size_t latent = cfg.latent_width();
  AbsorbedProducts out{MatrixD(cfg.d, cfg.n_h * latent), MatrixD(cfg.n_h * latent, cfg.d)};
  for (std::uint32_t h = 0; h < cfg.n_h; ++h) {
    const std::uint32_t g = cfg.group_of(h);
    const MatrixD q_block = matmul(column_slice(wq_nope, h * dc, dc), transpose(column_slice(wuk, g * dc, dc)));
    for (std::size_t i = 0; i < cfg.d; ++i)
      std::copy(q_block.row(i).begin(), q_block.row(i).end(), out.q_absorbed.row(i).begin() + h * latent);
    const MatrixD o_block = matmul(column_slice(wuv, g * dh, dh), row_slice(wo, h * dh, dh));
    for (std::size_t i = 0; i < latent; ++i)
      std::copy(o_block.row(i).begin(), o_block.row(i).end(), out.o_absorbed.row(h * latent + i).begin());
  }
  return out;
}

AttentionWeights AttentionWeights::from_store(const ModelConfig& cfg, const TensorStore& store,
                                              std::optional<RopeSelection> selection) {
  AttentionWeights w;
  w.params_ = ModelParams<float>::from_store(cfg, store);
  if (cfg.is_converted()) {
    if (selection) throw Error(ErrorCode::variant_mismatch, "converted checkpoints carry their own selection");
    w.variant_ = Variant::mla;
    w.selection_ = RopeSelection::from_store(cfg, store);
  } else if (selection) {
    selection->check_against(cfg);
    w.variant_ = Variant::mha_partial;
    w.selection_ = std::move(*selection);
  } else {
    w.variant_ = Variant::mha_full;
    w.selection_ = RopeSelection::full(cfg);
  }
  return w;
}

double AttentionWeights::absorbed_product_deviation() const {
  if (variant_ != Variant::mla) return 0.0;
  double worst = 0.0;
  for (const auto& L : params_.layers) {
    const AbsorbedProducts ref = absorb(params_.cfg, L.wq_nope.cast<double>(), L.wuk.cast<double>(),
                                        L.wuv.cast<double>(), L.wo.cast<double>());
    worst = std::max(worst, max_abs_diff(L.wq_absorbed.cast<double>(), ref.q_absorbed) /
                                std::max(1.0, max_abs(ref.q_absorbed)));
    worst = std::max(worst, max_abs_diff(L.wo_absorbed.cast<double>(), ref.o_absorbed) /
                                std::max(1.0, max_abs(ref.o_absorbed)));
  }
  return worst;
}

namespace {

constexpr double kNormEps = 1e-6;

template <typename T>
Matrix<T> rmsnorm(const Matrix<T>& x, const Matrix<T>& weight) {
  Matrix<T> y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto row = x.row(i);
    T ss{};
    for (T v : row) ss += v * v;
    const T inv = T{1} / std::sqrt(ss / static_cast<T>(x.cols()) + static_cast<T>(kNormEps));
    for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) = row[j] * inv * weight(0, j);
  }
  return y;
}

template <typename T>
void add_inplace(Matrix<T>& a, const Matrix<T>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a.values()[i] += b.values()[i];
}

template <typename T>
std::span<const T> slice(const Matrix<T>& m, std::size_t row, std::size_t first, std::size_t count) {
  return m.row(row).subspan(first, count);
}

template <typename T>
void append_latent(LatentLayerCacheT<T>& c, const Matrix<T>& k_rope, const Matrix<T>& c_kv, const QuantSpec*) {
  c.k_rope.append_rows(k_rope);
  c.c_kv.append_rows(c_kv);
}

template <typename T>
void append_latent(QuantizedLatentLayerCacheT<T>& c, const Matrix<T>& k_rope, const Matrix<T>& c_kv,
                   const QuantSpec* spec) {
  QuantizedRows coded = quantize_rows(c_kv, *spec);
  c.c_kv.append_rows(dequantize_rows<T>(coded));
  c.c_kv_codes.append(coded);
  if (spec->include_rope) {
    QuantizedRows rope_coded = quantize_rows(k_rope, *spec);
    c.k_rope.append_rows(dequantize_rows<T>(rope_coded));
    c.k_rope_codes.append(rope_coded);
  } else {
    c.k_rope.append_rows(k_rope);
  }
}

template <typename T>
class Engine {
 public:
  Engine(const ModelParams<T>& params, ForwardPath path, const RopeSelection* selection)
      : p_(params),
        cfg_(params.cfg),
        path_(path),
        selection_(selection),
        spectrum_(params.cfg.d_h, params.cfg.rope_base),
        all_(all_subspaces(params.cfg.d_h)),
        scale_(static_cast<T>(1.0 / std::sqrt(static_cast<double>(params.cfg.d_h)))) {}

  Matrix<T> run(std::span<const std::uint32_t> tokens, KvCacheT<T>& cache, std::vector<Matrix<T>>* attn_out,
                const QkObserver<T>* observer) {
    const std::size_t p0 = std::visit([](const auto& c) { return c.positions(); }, cache);
    Matrix<T> x(tokens.size(), cfg_.d);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i] >= cfg_.vocab)
        throw Error(ErrorCode::corpus_mismatch, "token id " + std::to_string(tokens[i]) + " exceeds vocab");
      std::copy(p_.embed.row(tokens[i]).begin(), p_.embed.row(tokens[i]).end(), x.row(i).begin());
    }
    for (std::uint32_t l = 0; l < cfg_.n_layers; ++l) {
      const auto& L = p_.layers[l];
      const Matrix<T> h = rmsnorm(x, L.norm1);
      Matrix<T> a = std::visit(
          [&](auto& c) -> Matrix<T> {
            using C = std::decay_t<decltype(c)>;
            if constexpr (std::is_same_v<C, FullCacheT<T>>) {
              return attend_source(l, h, p0, c.layers[l], observer);
            } else if constexpr (std::is_same_v<C, LatentCacheT<T>>) {
              return attend_latent(l, h, p0, c.layers[l], nullptr);
            } else {
              return attend_latent(l, h, p0, c.layers[l], &c.spec);
            }
          },
          cache);
      add_inplace(x, a);
      if (attn_out) attn_out->push_back(std::move(a));
      Matrix<T> u = matmul(rmsnorm(x, L.norm2), L.up);
      for (T& v : u.values()) v = v / (T{1} + std::exp(-v));
      add_inplace(x, matmul(u, L.down));
    }
    return matmul(x, p_.lm_head);
  }

 private:
  std::span<const std::uint32_t> subspaces(std::uint32_t layer, std::uint32_t group) const {
    if (path_ == ForwardPath::full) return all_;
    return selection_->at(layer, group);
  }

  Matrix<T> attend_source(std::uint32_t l, const Matrix<T>& h, std::size_t p0, FullLayerCacheT<T>& cache,
                          const QkObserver<T>* observer) {
    const auto& L = p_.layers[l];
    const std::size_t dh = cfg_.d_h;
    Matrix<T> q = matmul(h, L.wq);
    Matrix<T> k = matmul(h, L.wk);
    const Matrix<T> v = matmul(h, L.wv);
    if (observer && *observer) (*observer)(l, q, k);
    for (std::size_t i = 0; i < h.rows(); ++i) {
      const double pos = static_cast<double>(p0 + i);
      for (std::uint32_t hd = 0; hd < cfg_.n_h; ++hd)
        apply_rope(q.row(i).subspan(hd * dh, dh), spectrum_, subspaces(l, cfg_.group_of(hd)), pos);
      for (std::uint32_t g = 0; g < cfg_.n_g; ++g) apply_rope(k.row(i).subspan(g * dh, dh), spectrum_, subspaces(l, g), pos);
    }
    cache.k.append_rows(k);
    cache.v.append_rows(v);

    Matrix<T> o(h.rows(), cfg_.n_h * dh);
    std::vector<T> scores;
    for (std::size_t i = 0; i < h.rows(); ++i) {
      const std::size_t ctx = p0 + i + 1;
      scores.resize(ctx);
      for (std::uint32_t hd = 0; hd < cfg_.n_h; ++hd) {
        const std::uint32_t g = cfg_.group_of(hd);
        const auto qh = slice(q, i, hd * dh, dh);
        for (std::size_t j = 0; j < ctx; ++j) scores[j] = dot(qh, slice(cache.k, j, g * dh, dh)) * scale_;
        softmax_inplace(std::span<T>(scores));
        auto oh = o.row(i).subspan(hd * dh, dh);
        for (std::size_t j = 0; j < ctx; ++j) {
          const auto vj = slice(cache.v, j, g * dh, dh);
          for (std::size_t c = 0; c < dh; ++c) oh[c] += scores[j] * vj[c];
        }
      }
    }
    return matmul(o, L.wo);
  }

  template <typename LayerCache>
  Matrix<T> attend_latent(std::uint32_t l, const Matrix<T>& h, std::size_t p0, LayerCache& cache,
                          const QuantSpec* quant) {
    const auto& L = p_.layers[l];
    const std::size_t dh = cfg_.d_h;
    const std::size_t dr = cfg_.rope_dim();
    const std::size_t dc = cfg_.nope_dim();
    const std::size_t latent = cfg_.latent_width();
    Matrix<T> qr = matmul(h, L.wq_rope);
    Matrix<T> kr = matmul(h, L.wk_rope);
    const Matrix<T> ckv = matmul(h, L.wdkv);
    for (std::size_t i = 0; i < h.rows(); ++i) {
      const double pos = static_cast<double>(p0 + i);
      for (std::uint32_t hd = 0; hd < cfg_.n_h; ++hd)
        apply_rope_packed(qr.row(i).subspan(hd * dr, dr), spectrum_, subspaces(l, cfg_.group_of(hd)), pos);
      for (std::uint32_t g = 0; g < cfg_.n_g; ++g)
        apply_rope_packed(kr.row(i).subspan(g * dr, dr), spectrum_, subspaces(l, g), pos);
    }
    append_latent(cache, kr, ckv, quant);
    const Matrix<T>& k_rope = cache.k_rope;
    const Matrix<T>& c_kv = cache.c_kv;

    std::vector<T> scores;
    if (path_ == ForwardPath::mla_naive) {
      const Matrix<T> qn = matmul(h, L.wq_nope);
      const Matrix<T> kn = matmul(c_kv, L.wuk);
      const Matrix<T> v = matmul(c_kv, L.wuv);
      Matrix<T> o(h.rows(), cfg_.n_h * dh);
      for (std::size_t i = 0; i < h.rows(); ++i) {
        const std::size_t ctx = p0 + i + 1;
        scores.resize(ctx);
        for (std::uint32_t hd = 0; hd < cfg_.n_h; ++hd) {
          const std::uint32_t g = cfg_.group_of(hd);
          const auto qrh = slice(qr, i, hd * dr, dr);
          const auto qnh = slice(qn, i, hd * dc, dc);
          for (std::size_t j = 0; j < ctx; ++j) {
            scores[j] = (dot(qrh, slice(k_rope, j, g * dr, dr)) + dot(qnh, slice(kn, j, g * dc, dc))) * scale_;
          }
          softmax_inplace(std::span<T>(scores));
          auto oh = o.row(i).subspan(hd * dh, dh);
          for (std::size_t j = 0; j < ctx; ++j) {
            const auto vj = slice(v, j, g * dh, dh);
            for (std::size_t c = 0; c < dh; ++c) oh[c] += scores[j] * vj[c];
          }
        }
      }
      return matmul(o, L.wo);
    }

    const Matrix<T> cq = matmul(h, L.wq_absorbed);
    Matrix<T> o_latent(h.rows(), cfg_.n_h * latent);
    for (std::size_t i = 0; i < h.rows(); ++i) {
      const std::size_t ctx = p0 + i + 1;
      scores.resize(ctx);
      for (std::uint32_t hd = 0; hd < cfg_.n_h; ++hd) {
        const std::uint32_t g = cfg_.group_of(hd);
        const auto qrh = slice(qr, i, hd * dr, dr);
        const auto cqh = slice(cq, i, hd * latent, latent);
        for (std::size_t j = 0; j < ctx; ++j)
          scores[j] = (dot(qrh, slice(k_rope, j, g * dr, dr)) + dot(cqh, c_kv.row(j))) * scale_;
        softmax_inplace(std::span<T>(scores));
        auto oh = o_latent.row(i).subspan(hd * latent, latent);
        for (std::size_t j = 0; j < ctx; ++j) {
          const auto cj = c_kv.row(j);
          for (std::size_t c = 0; c < latent; ++c) oh[c] += scores[j] * cj[c];
        }
      }
    }
    return matmul(o_latent, L.wo_absorbed);
  }

  const ModelParams<T>& p_;
  const ModelConfig& cfg_;
  ForwardPath path_;
  const RopeSelection* selection_;
  FreqSpectrum spectrum_;
  SubspaceSet all_;
  T scale_;
};

template <typename T>
KvCacheT<T> empty_cache(const ModelConfig& cfg, CacheKind kind, const QuantSpec& quant) {
  switch (kind) {
    case CacheKind::full: {
      FullCacheT<T> c;
      c.layers.resize(cfg.n_layers);
      return c;
    }
    case CacheKind::latent: {
      LatentCacheT<T> c;
      c.layers.resize(cfg.n_layers);
      return c;
    }
    case CacheKind::quantized: {
      quant.validate();
      QuantizedLatentCacheT<T> c;
      c.spec = quant;
      c.layers.resize(cfg.n_layers);
      return c;
    }
  }
  throw Error(ErrorCode::usage, "unknown cache kind");
}

bool is_latent_path(ForwardPath path) {
  return path == ForwardPath::mla_naive || path == ForwardPath::mla_absorbed;
}

}  // namespace

KvCache make_cache(const AttentionWeights& weights, CacheKind kind, const QuantSpec& quant) {
  const bool converted = weights.variant() == Variant::mla;
  if (converted == (kind == CacheKind::full)) {
    throw Error(ErrorCode::variant_mismatch,
                converted ? "converted weights need a latent or quantized cache" : "source weights need a full cache");
  }
  return empty_cache<float>(weights.config(), kind, quant);
}

std::size_t cache_positions(const KvCache& cache) {
  return std::visit([](const auto& c) { return c.positions(); }, cache);
}

ForwardResult forward(const AttentionWeights& weights, ForwardPath path, std::span<const std::uint32_t> tokens,
                      KvCache& cache, const RopeSelection* selection) {
  const bool converted = weights.variant() == Variant::mla;
  if (is_latent_path(path) != converted) {
    throw Error(ErrorCode::variant_mismatch, std::string("path '") + to_string(path) +
                                                 "' does not match " + (converted ? "converted" : "source") +
                                                 " weights");
  }
  const bool full_cache = std::holds_alternative<FullCache>(cache);
  if (full_cache == converted) {
    throw Error(ErrorCode::variant_mismatch, std::string("cache type does not match path '") + to_string(path) + "'");
  }
  if (path == ForwardPath::partial) {
    if (!selection) selection = &weights.selection();
    selection->check_against(weights.config());
  } else if (converted) {
    selection = &weights.selection();
  }
  if (auto* q = std::get_if<QuantizedLatentCache>(&cache)) q->spec.validate();

  Engine<float> engine(weights.params(), path, selection);
  ForwardResult out;
  out.logits = engine.run(tokens, cache, &out.attention_outputs, nullptr);
  return out;
}

ForwardResult forward_full(const AttentionWeights& weights, std::span<const std::uint32_t> tokens) {
  KvCache cache = make_cache(weights, CacheKind::full);
  return forward(weights, ForwardPath::full, tokens, cache);
}

ForwardResult forward_partial(const AttentionWeights& weights, const RopeSelection& selection,
                              std::span<const std::uint32_t> tokens) {
  KvCache cache = make_cache(weights, CacheKind::full);
  return forward(weights, ForwardPath::partial, tokens, cache, &selection);
}

ForwardResult forward_mla_naive(const AttentionWeights& weights, std::span<const std::uint32_t> tokens,
                                const std::optional<QuantSpec>& quant) {
  KvCache cache = make_cache(weights, quant ? CacheKind::quantized : CacheKind::latent, quant.value_or(QuantSpec{}));
  return forward(weights, ForwardPath::mla_naive, tokens, cache);
}

ForwardResult forward_mla_absorbed(const AttentionWeights& weights, std::span<const std::uint32_t> tokens,
                                   const std::optional<QuantSpec>& quant) {
  KvCache cache = make_cache(weights, quant ? CacheKind::quantized : CacheKind::latent, quant.value_or(QuantSpec{}));
  return forward(weights, ForwardPath::mla_absorbed, tokens, cache);
}

std::vector<float> decode_step(const AttentionWeights& weights, ForwardPath path, KvCache& cache,
                               std::uint32_t token, const RopeSelection* selection) {
  const std::uint32_t one[1] = {token};
  ForwardResult r = forward(weights, path, one, cache, selection);
  return std::vector<float>(r.logits.row(0).begin(), r.logits.row(0).end());
}

MatrixD forward_source_f64(const ModelParams<double>& params, std::span<const std::uint32_t> tokens,
                           const QkObserver<double>& observer) {
  if (params.cfg.is_converted()) throw Error(ErrorCode::variant_mismatch, "calibration needs a source checkpoint");
  KvCacheT<double> cache = empty_cache<double>(params.cfg, CacheKind::full, {});
  Engine<double> engine(params, ForwardPath::full, nullptr);
  return engine.run(tokens, cache, nullptr, &observer);
}

}  // namespace mlaforge
