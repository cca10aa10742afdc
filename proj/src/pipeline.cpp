// SPDX-License-Identifier: Apache-2.0
#include "mlaforge/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <map>

#include "mlaforge/error.hpp"
#include "mlaforge/util.hpp"

namespace mlaforge {

ConversionConfig default_conversion(const ModelConfig& cfg) {
  ConversionConfig c;
  c.strategy = Strategy::two_norm;
  c.svd_mode = SvdMode::joint;
  c.r = std::max<std::uint32_t>(1, cfg.d_h / 16);
  c.d_kv_per_head = cfg.d_h / 2;
  return c;
}

namespace {

MatrixD round_to_f32(const MatrixD& m) { return m.cast<float>().cast<double>(); }

void check_conversion_bounds(const ModelConfig& cfg, const ConversionConfig& c) {
  if (c.r > cfg.d_h / 2)
    throw Error(ErrorCode::rank_bounds, "r = " + std::to_string(c.r) + " exceeds d_h/2 = " + std::to_string(cfg.d_h / 2));
  if (c.d_kv_per_head == 0) throw Error(ErrorCode::rank_bounds, "d_kv must be positive");
  const std::uint32_t limit = c.svd_mode == SvdMode::joint ? 2 * cfg.d_h - 2 * c.r : 2 * cfg.d_h;
  if (c.d_kv_per_head > limit)
    throw Error(ErrorCode::rank_bounds, "d_kv = " + std::to_string(c.d_kv_per_head) + " exceeds " +
                                            std::to_string(limit) + " for " + to_string(c.svd_mode) + " mode");
  if (c.svd_mode == SvdMode::split && c.d_kv_per_head % 2 != 0)
    throw Error(ErrorCode::rank_bounds, "split mode needs an even d_kv");
}

RopeSelection make_selection(const ModelConfig& cfg, const ConversionConfig& c, const NormStats* stats) {
  if (c.strategy != Strategy::two_norm) return RopeSelection::for_strategy(c.strategy, c.r, cfg);
  if (!stats) throw Error(ErrorCode::usage, "strategy two_norm needs calibration stats");
  stats->check_against(cfg);
  RopeSelection sel = select_two_norm(*stats, c.r, c.global_selection);
  sel.check_against(cfg);
  return sel;
}

struct LayerOutput {
  std::map<std::string, Tensor> tensors;
  LatentFactors factors;
  MatrixD original;
};

}  // namespace

std::vector<MatrixD> latent_originals(const ModelConfig& cfg, const TensorStore& store, const RopeSelection& sel) {
  std::vector<MatrixD> out;
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
    const ProjectionSplit k = split_projection(store.get_as<double>(layer_name(l, "Wk")), sel, l, ProjectionRole::key);
    out.push_back(hcat(k.nope, store.get_as<double>(layer_name(l, "Wv"))));
  }
  return out;
}

std::vector<LatentFactors> stored_factors(const ModelConfig& cfg, const TensorStore& store) {
  if (!cfg.is_converted()) throw Error(ErrorCode::variant_mismatch, "checkpoint is not converted");
  std::vector<LatentFactors> out;
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
    LatentFactors f;
    f.mode = cfg.conversion->svd_mode;
    f.per_head = cfg.conversion->per_head;
    f.down = store.get_as<double>(layer_name(l, "Wdkv"));
    f.up_k = store.get_as<double>(layer_name(l, "Wuk"));
    f.up_v = store.get_as<double>(layer_name(l, "Wuv"));
    if (l < cfg.conversion->discarded_sq_sum.size()) f.discarded = cfg.conversion->discarded_sq_sum[l];
    out.push_back(std::move(f));
  }
  return out;
}

ConversionResult convert(const ModelConfig& cfg, const TensorStore& store, const ConversionConfig& conversion,
                         const NormStats* stats) {
  if (cfg.is_converted()) throw Error(ErrorCode::variant_mismatch, "checkpoint is already converted");
  cfg.validate();
  check_manifest(cfg, store);
  check_conversion_bounds(cfg, conversion);

  ModelConfig out_cfg = cfg;
  out_cfg.conversion = conversion;
  out_cfg.conversion->discarded_sq_sum.clear();
  out_cfg.conversion->corpus_digest = stats ? stats->corpus_digest : std::string();
  out_cfg.validate();

  ConversionResult result;
  result.selection = make_selection(cfg, conversion, stats);

  std::vector<LayerOutput> layers(cfg.n_layers);
  parallel_for(cfg.n_layers, [&](std::size_t li) {
    const auto l = static_cast<std::uint32_t>(li);
    auto name = [&](const char* leaf) { return layer_name(l, leaf); };
    const ProjectionSplit q = split_projection(store.get_as<double>(name("Wq")), result.selection, l, ProjectionRole::query);
    const ProjectionSplit k = split_projection(store.get_as<double>(name("Wk")), result.selection, l, ProjectionRole::key);
    const MatrixD wv = store.get_as<double>(name("Wv"));

    LayerOutput& out = layers[l];
    out.original = hcat(k.nope, wv);
    out.factors = factor_layer(k.nope, wv, out_cfg);

    const MatrixD wq_nope = round_to_f32(q.nope);
    const MatrixD wuk = round_to_f32(out.factors.up_k);
    const MatrixD wuv = round_to_f32(out.factors.up_v);
    const MatrixD wo = store.get_as<double>(name("Wo"));
    const AbsorbedProducts abs = absorb(out_cfg, wq_nope, wuk, wuv, wo);

    out.tensors["Wq_rope"] = q.rope.cast<float>();
    out.tensors["Wq_nope"] = q.nope.cast<float>();
    out.tensors["Wk_rope"] = k.rope.cast<float>();
    out.tensors["Wdkv"] = out.factors.down.cast<float>();
    out.tensors["Wuk"] = out.factors.up_k.cast<float>();
    out.tensors["Wuv"] = out.factors.up_v.cast<float>();
    out.tensors["Wq_absorbed"] = abs.q_absorbed.cast<float>();
    out.tensors["Wo_absorbed"] = abs.o_absorbed.cast<float>();
    out.tensors["S"] = result.selection.to_tensor(l);
  });

  for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
    out_cfg.conversion->discarded_sq_sum.push_back(layers[l].factors.discarded);
    result.factors.push_back(std::move(layers[l].factors));
    result.originals.push_back(std::move(layers[l].original));
  }

  TensorStore out_store;
  const std::string prefix = "L";
  for (const ManifestEntry& entry : manifest(out_cfg)) {
    if (store.contains(entry.name)) {
      out_store.set(entry.name, store.at(entry.name));
      continue;
    }
    const auto dot = entry.name.find('.');
    const auto l = static_cast<std::uint32_t>(std::stoul(entry.name.substr(prefix.size(), dot - prefix.size())));
    out_store.set(entry.name, layers[l].tensors.at(entry.name.substr(dot + 1)));
  }
  check_manifest(out_cfg, out_store);
  result.checkpoint = Checkpoint{out_cfg, std::move(out_store)};
  return result;
}

std::vector<std::vector<std::uint32_t>> random_sequences(std::uint32_t vocab, std::size_t count, std::size_t len,
                                                         std::uint64_t seed) {
  return TokenCorpus::synthetic(vocab, static_cast<std::uint32_t>(count), static_cast<std::uint32_t>(len),
                                seed + 0x5eed)
      .sequences;
}

bool VerifyReport::pass() const {
  return std::all_of(links.begin(), links.end(), [](const VerifyLink& l) { return l.pass(); });
}

nlohmann::json VerifyReport::to_json() const {
  nlohmann::json j_links = nlohmann::json::array();
  for (const auto& l : links) {
    j_links.push_back({{"name", l.name},
                       {"deviation", l.deviation},
                       {"tolerance", l.tolerance},
                       {"enforced", l.enforced},
                       {"pass", l.pass()}});
  }
  return {{"pass", pass()},
          {"sequences", sequences},
          {"seq_len", seq_len},
          {"links", j_links},
          {"reconstruction", reconstruction.to_json()},
          {"warnings", warnings}};
}

std::string VerifyReport::table() const {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-28s %14s %12s  %s\n", "link", "max_abs", "tolerance", "status");
  out += buf;
  for (const auto& l : links) {
    const char* status = !l.enforced ? "reported" : (l.pass() ? "pass" : "FAIL");
    std::snprintf(buf, sizeof buf, "%-28s %14.6e %12.1e  %s\n", l.name.c_str(), l.deviation, l.tolerance, status);
    out += buf;
  }
  out += "\n";
  out += reconstruction.table();
  for (const auto& w : warnings) out += "warning: " + w + "\n";
  out += pass() ? "verify: pass\n" : "verify: FAIL\n";
  return out;
}

namespace {

double logit_gap(const MatrixF& a, const MatrixF& b) { return max_abs_diff(a, b); }

double incremental_gap(const AttentionWeights& w, ForwardPath path, CacheKind kind,
                       std::span<const std::uint32_t> tokens, const RopeSelection* sel) {
  KvCache batched_cache = make_cache(w, kind);
  const MatrixF batched = forward(w, path, tokens, batched_cache, sel).logits;
  KvCache cache = make_cache(w, kind);
  double worst = 0.0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::vector<float> step = decode_step(w, path, cache, tokens[i], sel);
    for (std::size_t c = 0; c < step.size(); ++c)
      worst = std::max(worst, std::abs(static_cast<double>(step[c]) - batched(i, c)));
  }
  return worst;
}

}  // namespace

VerifyReport verify(const AttentionWeights& source, const AttentionWeights& converted,
                    const ReconstructionReport& reconstruction, const VerifyOptions& options) {
  if (source.variant() == Variant::mla || converted.variant() != Variant::mla)
    throw Error(ErrorCode::variant_mismatch, "verify needs a source and a converted checkpoint");
  if (source.config().architecture() != converted.config().architecture())
    throw Error(ErrorCode::variant_mismatch, "source and converted checkpoints have different architectures");

  const ModelConfig& cfg = converted.config();
  const auto& conv = *cfg.conversion;
  auto seqs = options.tokens.empty() ? random_sequences(cfg.vocab, options.sequences, options.seq_len, options.seed)
                                     : options.tokens;
  if (seqs.empty() || seqs[0].empty()) throw Error(ErrorCode::usage, "verify needs at least one token");

  const RopeSelection& sel = converted.selection();
  bool truncated = false;
  for (const auto& layer : conv.discarded_sq_sum)
    for (double v : layer) truncated = truncated || v > 0.0;

  VerifyLink full_partial{"full_vs_partial_all", 0.0, 0.0};
  VerifyLink partial_naive{"partial_vs_mla_naive", 0.0, 1e-4, !truncated};
  VerifyLink absorbed_products{"absorbed_products", converted.absorbed_product_deviation(), 1e-6};
  VerifyLink naive_absorbed{"mla_naive_vs_absorbed", 0.0, 1e-4};
  VerifyLink incremental{"batched_vs_incremental", 0.0, 1e-5};

  const RopeSelection all = RopeSelection::full(cfg);
  for (const auto& tokens : seqs) {
    const ForwardResult full = forward_full(source, tokens);
    full_partial.deviation = std::max(full_partial.deviation, logit_gap(full.logits, forward_partial(source, all, tokens).logits));
    const ForwardResult partial = forward_partial(source, sel, tokens);
    const ForwardResult naive = forward_mla_naive(converted, tokens);
    const ForwardResult absorbed = forward_mla_absorbed(converted, tokens);
    partial_naive.deviation = std::max(partial_naive.deviation, logit_gap(partial.logits, naive.logits));
    naive_absorbed.deviation = std::max(naive_absorbed.deviation, logit_gap(naive.logits, absorbed.logits));
  }

  const std::size_t steps = std::min(options.decode_steps, seqs[0].size());
  const std::span<const std::uint32_t> prefix(seqs[0].data(), steps);
  incremental.deviation = std::max({incremental_gap(source, ForwardPath::full, CacheKind::full, prefix, nullptr),
                                    incremental_gap(source, ForwardPath::partial, CacheKind::full, prefix, &sel),
                                    incremental_gap(converted, ForwardPath::mla_naive, CacheKind::latent, prefix, nullptr),
                                    incremental_gap(converted, ForwardPath::mla_absorbed, CacheKind::latent, prefix, nullptr)});

  VerifyReport rep;
  rep.links = {full_partial, partial_naive, absorbed_products, naive_absorbed, incremental};
  rep.reconstruction = reconstruction;
  rep.sequences = seqs.size();
  rep.seq_len = seqs[0].size();
  if (truncated) rep.warnings.push_back("latent width is truncated; partial_vs_mla_naive is an approximation gap");
  if (options.corpus_digest && !conv.corpus_digest.empty() && *options.corpus_digest != conv.corpus_digest)
    rep.warnings.push_back("corpus digest " + *options.corpus_digest + " differs from calibration corpus " + conv.corpus_digest);
  return rep;
}

VerifyReport verify(const Checkpoint& source, const Checkpoint& converted, const VerifyOptions& options) {
  if (!converted.config.is_converted() || source.config.is_converted())
    throw Error(ErrorCode::variant_mismatch, "verify needs a source and a converted checkpoint");
  if (source.config.architecture() != converted.config.architecture())
    throw Error(ErrorCode::variant_mismatch, "source and converted checkpoints have different architectures");
  const AttentionWeights src = AttentionWeights::from_store(source.config, source.store);
  const AttentionWeights conv = AttentionWeights::from_store(converted.config, converted.store);
  const ReconstructionReport recon = reconstruction_report(
      stored_factors(converted.config, converted.store),
      latent_originals(source.config, source.store, conv.selection()));
  return verify(src, conv, recon, options);
}

}  // namespace mlaforge
