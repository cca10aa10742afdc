// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "helpers.hpp"
#include "mlaforge/attention.hpp"
#include "mlaforge/error.hpp"
#include "mlaforge/pipeline.hpp"
#include "oracle.hpp"

using namespace mlaforge;
using testing::toy_config;

namespace {

std::vector<std::uint32_t> tokens_for(std::size_t n, std::uint64_t seed) {
  return random_sequences(256, 1, n, seed)[0];
}

ConversionConfig conversion(Strategy strategy, std::uint32_t r, std::uint32_t dkv, SvdMode mode) {
  ConversionConfig c;
  c.strategy = strategy;
  c.r = r;
  c.d_kv_per_head = dkv;
  c.svd_mode = mode;
  return c;
}

struct Pair {
  ModelConfig cfg;
  TensorStore store;
  AttentionWeights source;
  AttentionWeights converted;
};

Pair make_pair(const ModelConfig& cfg, std::uint64_t seed, const ConversionConfig& conv) {
  TensorStore store = init_toy(cfg, seed);
  const Checkpoint ck = convert(cfg, store, conv).checkpoint;
  return Pair{cfg, store, AttentionWeights::from_store(cfg, store),
              AttentionWeights::from_store(ck.config, ck.store)};
}

// Full joint rank per kv head for d=64, d_h=16: min(64/n_g, 2*16-2r).
std::uint32_t full_joint_dkv(const ModelConfig& cfg, std::uint32_t r) {
  return std::min<std::uint32_t>(cfg.d / cfg.n_g, 2 * cfg.d_h - 2 * r);
}

MatrixF last_rows(const MatrixF& m, std::size_t from) { return row_slice(m, from, m.rows() - from); }

}  // namespace

TEST_CASE("full forward matches the brute-force oracle") {
  for (std::uint32_t n_g : {4u, 2u}) {
    const ModelConfig cfg = toy_config(n_g);
    const TensorStore store = init_toy(cfg, 1);
    const AttentionWeights w = AttentionWeights::from_store(cfg, store);
    const auto tokens = tokens_for(16, 2);
    const ForwardResult got = forward_full(w, tokens);
    const oracle::Output want = oracle::forward(cfg, store, tokens, oracle::all_sets(cfg));
    CHECK(oracle::max_abs_diff(want.logits, got.logits) <= 1e-5);
    for (std::uint32_t l = 0; l < cfg.n_layers; ++l)
      CHECK(oracle::max_abs_diff(want.attn[l], got.attention_outputs[l]) <= 1e-5);
  }
}

TEST_CASE("single token attends only to itself") {
  const ModelConfig cfg = toy_config(2, 1);
  const TensorStore store = init_toy(cfg, 3);
  const AttentionWeights w = AttentionWeights::from_store(cfg, store);
  const std::vector<std::uint32_t> t{42};
  const ForwardResult r = forward_full(w, t);
  // v of the token, routed through W_o, with each query head reading its group's v.
  const MatrixD x = row_slice(store.get_as<double>("embed"), 42, 1);
  double ss = 0.0;
  for (double v : x.values()) ss += v * v;
  MatrixD h = x;
  for (double& v : h.values()) v /= std::sqrt(ss / cfg.d + 1e-6);
  const MatrixD v = matmul(h, store.get_as<double>("L0.Wv"));
  MatrixD o(1, cfg.n_h * cfg.d_h);
  for (std::uint32_t hd = 0; hd < cfg.n_h; ++hd)
    for (std::uint32_t c = 0; c < cfg.d_h; ++c) o(0, hd * 16 + c) = v(0, cfg.group_of(hd) * 16 + c);
  const MatrixD want = matmul(o, store.get_as<double>("L0.Wo"));
  CHECK(max_abs_diff(r.attention_outputs[0].cast<double>(), want) <= 1e-5);
}

TEST_CASE("GQA with duplicated kv heads equals MHA bit for bit") {
  const ModelConfig gqa = toy_config(2);
  const TensorStore gs = init_toy(gqa, 4);
  const ModelConfig mha = toy_config(4);
  TensorStore ms = gs;
  for (std::uint32_t l = 0; l < gqa.n_layers; ++l)
    for (const char* leaf : {"Wk", "Wv"}) {
      const MatrixF src = gs.get<float>(layer_name(l, leaf));
      MatrixF dup(src.rows(), 4 * 16);
      for (std::size_t i = 0; i < src.rows(); ++i)
        for (std::uint32_t h = 0; h < 4; ++h)
          for (std::uint32_t c = 0; c < 16; ++c) dup(i, h * 16 + c) = src(i, gqa.group_of(h) * 16 + c);
      ms.set(layer_name(l, leaf), dup);
    }
  const auto tokens = tokens_for(20, 5);
  const MatrixF a = forward_full(AttentionWeights::from_store(gqa, gs), tokens).logits;
  const MatrixF b = forward_full(AttentionWeights::from_store(mha, ms), tokens).logits;
  CHECK(a == b);
}

TEST_CASE("partial with every subspace is bit-identical to full") {
  for (std::uint32_t n_g : {4u, 2u}) {
    const ModelConfig cfg = toy_config(n_g);
    const AttentionWeights w = AttentionWeights::from_store(cfg, init_toy(cfg, 6));
    const auto tokens = tokens_for(32, 7);
    CHECK(forward_full(w, tokens).logits == forward_partial(w, RopeSelection::full(cfg), tokens).logits);
  }
}

TEST_CASE("partial forward matches the oracle for a two_norm selection") {
  const ModelConfig cfg = toy_config(2);
  const TensorStore store = init_toy(cfg, 8);
  const NormStats stats = compute_norm_stats(cfg, store, TokenCorpus::synthetic(cfg.vocab, 4, 16, 1));
  const RopeSelection sel = select_two_norm(stats, 1);
  const AttentionWeights w = AttentionWeights::from_store(cfg, store, sel);
  CHECK(w.variant() == Variant::mha_partial);
  const auto tokens = tokens_for(24, 9);
  const oracle::Output want = oracle::forward(cfg, store, tokens, oracle::from_selection(sel));
  CHECK(oracle::max_abs_diff(want.logits, forward_partial(w, sel, tokens).logits) <= 1e-5);
  KvCache cache = make_cache(w, CacheKind::full);
  CHECK(oracle::max_abs_diff(want.logits, forward(w, ForwardPath::partial, tokens, cache).logits) <= 1e-5);
}

TEST_CASE("without RoPE attention ignores the order of earlier tokens") {
  const ModelConfig cfg = toy_config(2, 1);
  const AttentionWeights w = AttentionWeights::from_store(cfg, init_toy(cfg, 10));
  const RopeSelection none = RopeSelection::for_strategy(Strategy::high, 0, cfg);
  std::vector<std::uint32_t> a = tokens_for(12, 11);
  std::vector<std::uint32_t> b = a;
  std::swap(b[2], b[7]);
  const MatrixF la = forward_partial(w, none, a).logits;
  const MatrixF lb = forward_partial(w, none, b).logits;
  // Rows after the later swapped position see the same multiset of keys.
  CHECK(max_abs_diff(last_rows(la, 8), last_rows(lb, 8)) <= 1e-5);
  const MatrixF fa = forward_full(w, a).logits;
  const MatrixF fb = forward_full(w, b).logits;
  CHECK(max_abs_diff(last_rows(fa, 8), last_rows(fb, 8)) > 1e-4);
}

TEST_CASE("full-rank conversion reproduces the partial model") {
  for (std::uint32_t n_g : {4u, 2u})
    for (SvdMode mode : {SvdMode::joint, SvdMode::split}) {
      const ModelConfig cfg = toy_config(n_g);
      const std::uint32_t dkv = mode == SvdMode::joint ? full_joint_dkv(cfg, 1) : 32;
      const Pair p = make_pair(cfg, 12, conversion(Strategy::uniform, 1, dkv, mode));
      const auto tokens = tokens_for(32, 13);
      const MatrixF partial = forward_partial(p.source, p.converted.selection(), tokens).logits;
      const MatrixF naive = forward_mla_naive(p.converted, tokens).logits;
      CHECK_MESSAGE(max_abs_diff(partial, naive) <= 1e-4, "n_g=" << n_g << " mode=" << to_string(mode));
    }
}

TEST_CASE("single token through the latent path") {
  const ModelConfig cfg = toy_config(2, 1);
  const Pair p = make_pair(cfg, 14, conversion(Strategy::high, 1, 8, SvdMode::joint));
  const std::vector<std::uint32_t> t{7};
  const ForwardResult r = forward_mla_naive(p.converted, t);
  const auto& L = p.converted.params().layers[0];
  const MatrixF x = row_slice(p.converted.params().embed, 7, 1);
  double ss = 0.0;
  for (float v : x.values()) ss += static_cast<double>(v) * v;
  MatrixD h = x.cast<double>();
  for (double& v : h.values()) v /= std::sqrt(ss / cfg.d + 1e-6);
  const MatrixD v = matmul(matmul(h, L.wdkv.cast<double>()), L.wuv.cast<double>());
  MatrixD o(1, cfg.n_h * 16);
  for (std::uint32_t hd = 0; hd < cfg.n_h; ++hd)
    for (std::uint32_t c = 0; c < 16; ++c) o(0, hd * 16 + c) = v(0, cfg.group_of(hd) * 16 + c);
  CHECK(max_abs_diff(r.attention_outputs[0].cast<double>(), matmul(o, L.wo.cast<double>())) <= 1e-5);
}

TEST_CASE("truncation gap shrinks as the latent grows") {
  const ModelConfig cfg = toy_config(2);
  const TensorStore store = init_toy(cfg, 15);
  const auto tokens = tokens_for(32, 16);
  double prev_gap = INFINITY, prev_disc = INFINITY;
  for (std::uint32_t dkv : {4u, 8u, 16u}) {
    const ConversionResult res = convert(cfg, store, conversion(Strategy::high, 1, dkv, SvdMode::joint));
    const AttentionWeights src = AttentionWeights::from_store(cfg, store);
    const AttentionWeights conv = AttentionWeights::from_store(res.checkpoint.config, res.checkpoint.store);
    const double gap = max_abs_diff(forward_partial(src, conv.selection(), tokens).logits,
                                    forward_mla_naive(conv, tokens).logits);
    double disc = 0.0;
    for (const auto& f : res.factors) disc += f.total_discarded();
    MESSAGE("d_kv=" << dkv << " discarded=" << disc << " max|dlogit|=" << gap);
    CHECK(disc < prev_disc);
    CHECK(gap < prev_gap);
    prev_gap = gap;
    prev_disc = disc;
  }
}

TEST_CASE("absorbed path matches the naive path") {
  for (std::uint32_t n_g : {4u, 2u})
    for (std::uint32_t dkv : {4u, 8u, full_joint_dkv(toy_config(n_g), 2)}) {
      const ModelConfig cfg = toy_config(n_g);
      const Pair p = make_pair(cfg, 17, conversion(Strategy::low, 2, dkv, SvdMode::joint));
      const auto tokens = tokens_for(32, 18);
      CHECK(max_abs_diff(forward_mla_naive(p.converted, tokens).logits,
                         forward_mla_absorbed(p.converted, tokens).logits) <= 1e-4);
      CHECK(p.converted.absorbed_product_deviation() <= 1e-6);
    }
}

TEST_CASE("absorbed output path with an identity W_o") {
  const ModelConfig cfg = toy_config(4, 1);  // n_h * d_h = d
  TensorStore store = init_toy(cfg, 19);
  MatrixF eye(64, 64);
  for (std::size_t i = 0; i < 64; ++i) eye(i, i) = 1.0f;
  store.set("L0.Wo", eye);
  const Checkpoint ck = convert(cfg, store, conversion(Strategy::high, 1, 8, SvdMode::joint)).checkpoint;
  const AttentionWeights w = AttentionWeights::from_store(ck.config, ck.store);
  const auto tokens = tokens_for(16, 20);
  CHECK(max_abs_diff(forward_mla_naive(w, tokens).attention_outputs[0],
                     forward_mla_absorbed(w, tokens).attention_outputs[0]) <= 1e-6);
}

TEST_CASE("incremental decode equals the batched forward on every path and cache") {
  const ModelConfig cfg = toy_config(2);
  const Pair p = make_pair(cfg, 21, conversion(Strategy::uniform, 2, 8, SvdMode::joint));
  const AttentionWeights partial = AttentionWeights::from_store(cfg, p.store, p.converted.selection());
  const auto tokens = tokens_for(32, 22);
  struct Case {
    const AttentionWeights* w;
    ForwardPath path;
    CacheKind kind;
    QuantSpec quant;
  };
  const QuantSpec q4{4, 32, false}, q2{2, 32, true};
  const std::vector<Case> cases = {
      {&p.source, ForwardPath::full, CacheKind::full, {}},
      {&partial, ForwardPath::partial, CacheKind::full, {}},
      {&p.converted, ForwardPath::mla_naive, CacheKind::latent, {}},
      {&p.converted, ForwardPath::mla_absorbed, CacheKind::latent, {}},
      {&p.converted, ForwardPath::mla_naive, CacheKind::quantized, q4},
      {&p.converted, ForwardPath::mla_absorbed, CacheKind::quantized, q4},
      {&p.converted, ForwardPath::mla_absorbed, CacheKind::quantized, q2},
  };
  for (const Case& c : cases) {
    KvCache batch_cache = make_cache(*c.w, c.kind, c.quant);
    const MatrixF batched = forward(*c.w, c.path, tokens, batch_cache).logits;
    KvCache cache = make_cache(*c.w, c.kind, c.quant);
    double worst = 0.0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const auto step = decode_step(*c.w, c.path, cache, tokens[i]);
      for (std::size_t j = 0; j < step.size(); ++j)
        worst = std::max(worst, std::abs(static_cast<double>(step[j]) - batched(i, j)));
      CHECK(cache_positions(cache) == i + 1);
    }
    CHECK_MESSAGE(worst <= 1e-5, to_string(c.path));
  }
}

TEST_CASE("decode from an empty cache equals a one-token forward") {
  const ModelConfig cfg = toy_config(2);
  const Pair p = make_pair(cfg, 23, conversion(Strategy::high, 1, 8, SvdMode::split));
  const std::vector<std::uint32_t> t{99};
  KvCache cache = make_cache(p.converted, CacheKind::latent);
  const auto step = decode_step(p.converted, ForwardPath::mla_absorbed, cache, 99);
  const MatrixF once = forward_mla_absorbed(p.converted, t).logits;
  CHECK(std::vector<float>(once.row(0).begin(), once.row(0).end()) == step);
  const auto& layers = std::get<LatentCache>(cache).layers;
  for (const auto& l : layers) {
    CHECK(l.c_kv.rows() == 1);
    CHECK(l.k_rope.rows() == 1);
  }
}

TEST_CASE("causality: later tokens never change earlier logits") {
  const ModelConfig cfg = toy_config(2);
  const Pair p = make_pair(cfg, 24, conversion(Strategy::high, 1, 8, SvdMode::joint));
  auto a = tokens_for(20, 25);
  auto b = a;
  for (std::size_t i = 12; i < b.size(); ++i) b[i] = (b[i] + 17) % 256;
  auto prefix = [](const MatrixF& m) { return row_slice(m, 0, 12); };
  CHECK(prefix(forward_full(p.source, a).logits) == prefix(forward_full(p.source, b).logits));
  CHECK(prefix(forward_mla_naive(p.converted, a).logits) == prefix(forward_mla_naive(p.converted, b).logits));
  CHECK(prefix(forward_mla_absorbed(p.converted, a).logits) == prefix(forward_mla_absorbed(p.converted, b).logits));
  const QuantSpec q{4, 32, false};
  CHECK(prefix(forward_mla_absorbed(p.converted, a, q).logits) == prefix(forward_mla_absorbed(p.converted, b, q).logits));
}

TEST_CASE("quantized latent cache drift is reported") {
  const ModelConfig cfg = toy_config(2);
  const Pair p = make_pair(cfg, 26, conversion(Strategy::high, 1, 16, SvdMode::joint));
  const auto tokens = tokens_for(32, 27);
  const MatrixF exact = forward_mla_absorbed(p.converted, tokens).logits;
  for (std::uint32_t bits : {8u, 4u, 2u}) {
    const MatrixF q = forward_mla_absorbed(p.converted, tokens, QuantSpec{bits, 32, false}).logits;
    CHECK(all_finite(q));
    MESSAGE(bits << "-bit latent cache: max|dlogit| = " << max_abs_diff(exact, q));
  }
}

TEST_CASE("a thousand decode steps stay finite and bounded") {
  const ModelConfig cfg = toy_config(2);
  const Pair p = make_pair(cfg, 28, conversion(Strategy::high, 1, 8, SvdMode::joint));
  KvCache cache = make_cache(p.converted, CacheKind::latent);
  const auto tokens = tokens_for(1000, 29);
  double worst = 0.0;
  bool finite = true;
  for (std::uint32_t t : tokens) {
    const auto logits = decode_step(p.converted, ForwardPath::mla_absorbed, cache, t);
    for (float v : logits) {
      finite = finite && std::isfinite(v);
      worst = std::max(worst, static_cast<double>(std::abs(v)));
    }
  }
  CHECK(finite);
  CHECK(cache_positions(cache) == 1000);
  CHECK(worst < 1e3);
}

TEST_CASE("variant and cache mismatches are rejected") {
  const ModelConfig cfg = toy_config(2);
  const Pair p = make_pair(cfg, 30, conversion(Strategy::high, 1, 8, SvdMode::joint));
  auto code = [](auto fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::usage;
  };
  const std::vector<std::uint32_t> t{1, 2};
  CHECK(code([&] { make_cache(p.source, CacheKind::latent); }) == ErrorCode::variant_mismatch);
  CHECK(code([&] { make_cache(p.converted, CacheKind::full); }) == ErrorCode::variant_mismatch);
  CHECK(code([&] { forward_mla_naive(p.source, t); }) == ErrorCode::variant_mismatch);
  CHECK(code([&] {
          KvCache c = make_cache(p.converted, CacheKind::latent);
          forward(p.converted, ForwardPath::full, t, c);
        }) == ErrorCode::variant_mismatch);
  CHECK(code([&] { forward_partial(p.source, RopeSelection::full(toy_config(4)), t); }) ==
        ErrorCode::variant_mismatch);
  CHECK(code([&] { forward_full(p.source, std::vector<std::uint32_t>{256}); }) == ErrorCode::corpus_mismatch);
}

TEST_CASE("a tampered W_uk breaks the absorbed identity") {
  const ModelConfig cfg = toy_config(2);
  Pair p = make_pair(cfg, 31, conversion(Strategy::high, 1, 8, SvdMode::joint));
  const auto tokens = tokens_for(16, 32);
  ModelParams<float>& params = p.converted.mutable_params();
  for (float& v : params.layers[0].wuk.values()) v *= 1.5f;
  CHECK(p.converted.absorbed_product_deviation() > 1e-2);
  CHECK(max_abs_diff(forward_mla_naive(p.converted, tokens).logits,
                     forward_mla_absorbed(p.converted, tokens).logits) > 1e-4);
}

TEST_CASE("absorb places per-head blocks") {
  ModelConfig cfg = toy_config(2, 1);
  cfg.conversion = conversion(Strategy::high, 1, 4, SvdMode::joint);
  const MatrixD wq = testing::gaussian(64, 4 * 14, 1), wuk = testing::gaussian(8, 2 * 14, 2);
  const MatrixD wuv = testing::gaussian(8, 2 * 16, 3), wo = testing::gaussian(64, 64, 4);
  const AbsorbedProducts a = absorb(cfg, wq, wuk, wuv, wo);
  CHECK(a.q_absorbed.rows() == 64);
  CHECK(a.q_absorbed.cols() == 4 * 8);
  CHECK(a.o_absorbed.rows() == 4 * 8);
  // head 3, group 1
  const MatrixD q3 = matmul(column_slice(wq, 3 * 14, 14), transpose(column_slice(wuk, 14, 14)));
  CHECK(max_abs_diff(column_slice(a.q_absorbed, 24, 8), q3) == 0.0);
  const MatrixD o3 = matmul(column_slice(wuv, 16, 16), row_slice(wo, 48, 16));
  CHECK(max_abs_diff(row_slice(a.o_absorbed, 24, 8), o3) == 0.0);
}
