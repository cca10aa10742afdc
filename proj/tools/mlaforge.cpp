// SPDX-License-Identifier: Apache-2.0
//
// mlaforge: toy checkpoints, calibration, MHA/GQA -> MLA conversion,
// verification, cache accounting and greedy decoding.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "mlaforge/attention.hpp"
#include "mlaforge/cachemodel.hpp"
#include "mlaforge/calib.hpp"
#include "mlaforge/error.hpp"
#include "mlaforge/pipeline.hpp"
#include "mlaforge/tensorio.hpp"
#include "mlaforge/util.hpp"

using namespace mlaforge;
using nlohmann::json;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return json::parse(ss.str());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::schema, path + ": " + e.what());
  }
}

ModelConfig read_config(const std::string& path) {
  ModelConfig cfg = ModelConfig::from_json(read_json_file(path));
  cfg.validate();
  return cfg;
}

std::vector<std::uint32_t> parse_ids(const std::string& text) {
  std::vector<std::uint32_t> ids;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      const unsigned long v = std::stoul(item, &used);
      if (used != item.size() || v > 0xffffffffUL) throw std::invalid_argument(item);
      ids.push_back(static_cast<std::uint32_t>(v));
    } catch (const std::exception&) {
      throw Error(ErrorCode::usage, "bad token id '" + item + "'");
    }
  }
  return ids;
}

// Comma-separated ids, or a corpus file when the argument names one.
std::vector<std::vector<std::uint32_t>> read_tokens(const std::string& arg) {
  if (std::filesystem::is_regular_file(arg)) return load_corpus(arg).sequences;
  return {parse_ids(arg)};
}

// init-toy

struct InitToyArgs {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  std::string corpus_out;
  std::uint32_t corpus_seqs = 64;
  std::uint32_t corpus_len = 32;
};

int run_init_toy(const InitToyArgs& a) {
  ModelConfig cfg = a.config.empty() ? ModelConfig{} : read_config(a.config);
  if (cfg.is_converted()) throw Error(ErrorCode::invalid_config, "toy config must not carry a conversion block");
  cfg.validate();
  save_checkpoint(cfg, init_toy(cfg, a.seed), a.out);
  std::printf("wrote %s (d=%u n_h=%u n_g=%u d_h=%u layers=%u vocab=%u)\n", a.out.c_str(), cfg.d, cfg.n_h, cfg.n_g,
              cfg.d_h, cfg.n_layers, cfg.vocab);
  if (!a.corpus_out.empty()) {
    const TokenCorpus corpus = TokenCorpus::synthetic(cfg.vocab, a.corpus_seqs, a.corpus_len, a.seed);
    save_corpus(corpus, a.corpus_out);
    std::printf("wrote %s (%u x %u, digest %s)\n", a.corpus_out.c_str(), a.corpus_seqs, a.corpus_len,
                corpus.digest().c_str());
  }
  return 0;
}

// stats

struct StatsArgs {
  std::string ckpt;
  std::string corpus;
  std::string out;
  std::uint32_t max_samples = kDefaultCalibrationSamples;
};

int run_stats(const StatsArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  if (ck.config.is_converted())
    throw Error(ErrorCode::variant_mismatch, "stats needs an unconverted checkpoint, got a converted one");
  const TokenCorpus corpus = load_corpus(a.corpus);
  const NormStats stats = compute_norm_stats(ck.config, ck.store, corpus, a.max_samples);
  save_stats(stats, a.out);
  std::printf("wrote %s (%u samples x %u tokens)\n", a.out.c_str(), stats.n_samples, stats.seq_len);
  return 0;
}

// convert

struct ConvertArgs {
  std::string ckpt;
  std::string stats;
  std::string strategy = "two_norm";
  std::optional<std::uint32_t> r;
  std::optional<std::uint32_t> dkv;
  std::string svd = "joint";
  bool per_head = false;
  bool global_selection = false;
  std::string out;
  bool json_out = false;
};

int run_convert(const ConvertArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  ConversionConfig conv = default_conversion(ck.config);
  conv.strategy = parse_strategy(a.strategy);
  conv.svd_mode = parse_svd_mode(a.svd);
  if (a.r) conv.r = *a.r;
  if (a.dkv) conv.d_kv_per_head = *a.dkv;
  conv.per_head = a.per_head;
  conv.global_selection = a.global_selection;

  std::optional<NormStats> stats;
  if (!a.stats.empty()) stats = load_stats(a.stats, &ck.config);
  if (conv.strategy == Strategy::two_norm && !stats)
    throw Error(ErrorCode::usage, "--stats is required for strategy two_norm");

  const ConversionResult res = convert(ck.config, ck.store, conv, stats ? &*stats : nullptr);
  save_checkpoint(res.checkpoint.config, res.checkpoint.store, a.out);
  const auto& ledger = res.checkpoint.config.conversion->discarded_sq_sum;
  if (a.json_out) {
    json j = {{"out", a.out},
              {"strategy", to_string(conv.strategy)},
              {"svd_mode", to_string(conv.svd_mode)},
              {"r", conv.r},
              {"d_kv_per_head", conv.d_kv_per_head},
              {"discarded_sq_sum", ledger}};
    std::cout << j.dump(2) << '\n';
    return 0;
  }
  std::printf("strategy=%s svd=%s r=%u d_kv=%u latent=%u\n", to_string(conv.strategy), to_string(conv.svd_mode),
              conv.r, conv.d_kv_per_head, res.checkpoint.config.latent_width());
  for (std::size_t l = 0; l < ledger.size(); ++l) {
    double total = 0.0;
    for (double v : ledger[l]) total += v;
    std::printf("layer %zu discarded_sq_sum %.9e\n", l, total);
  }
  std::printf("wrote %s\n", a.out.c_str());
  return 0;
}

// verify

struct VerifyArgs {
  std::string src;
  std::string converted;
  std::string tokens;
  std::string corpus;
  std::uint64_t seed = 0;
  std::size_t sequences = 4;
  std::size_t len = 32;
  bool json_out = false;
};

int run_verify(const VerifyArgs& a) {
  const Checkpoint src = load_checkpoint(a.src);
  const Checkpoint conv = load_checkpoint(a.converted);
  VerifyOptions opt;
  opt.seed = a.seed;
  opt.sequences = a.sequences;
  opt.seq_len = a.len;
  if (!a.tokens.empty()) opt.tokens = read_tokens(a.tokens);
  if (!a.corpus.empty()) opt.corpus_digest = load_corpus(a.corpus).digest();
  const VerifyReport rep = verify(src, conv, opt);
  if (a.json_out) {
    std::cout << rep.to_json().dump(2) << '\n';
    for (const auto& w : rep.warnings) std::cerr << "warning: " << w << '\n';
  } else {
    std::cout << rep.table();
  }
  return rep.pass() ? 0 : exit_code_for(ErrorCode::verification_failed);
}

// bench

struct BenchArgs {
  std::string preset;
  std::string config;
  std::optional<std::uint32_t> dkv;
  std::optional<std::uint32_t> r;
  std::uint32_t quant = 16;
  std::uint32_t group_size = 32;
  bool json_out = false;
};

void print_report_header() {
  std::printf("%-8s %4s %3s %5s %4s %9s %10s %10s %9s\n", "model", "d_h", "r", "d_kv", "bits", "scalars",
              "kv_mem", "ckv_only", "meta_bits");
}

void print_report(const CacheReport& r) {
  std::printf("%-8s %4u %3u %5u %4u %9llu %10s %10s %9llu\n", r.label.c_str(), r.d_h, r.r, r.d_kv_per_head, r.bits,
              static_cast<unsigned long long>(r.scalars_per_token_layer), r.kv_mem().c_str(),
              format_reduction(r.ckv_only_reduction).c_str(),
              static_cast<unsigned long long>(r.metadata_bits_per_token_layer));
}

int run_bench(const BenchArgs& a) {
  if (a.quant == 0 || a.quant > 16) throw Error(ErrorCode::usage, "--quant must be in [1, 16]");
  std::vector<CacheReport> reports;
  if (!a.config.empty()) {
    ModelConfig cfg = read_config(a.config);
    if (cfg.conversion) {
      if (a.dkv) cfg.conversion->d_kv_per_head = *a.dkv;
      if (a.r) cfg.conversion->r = *a.r;
    }
    reports.push_back(make_cache_report("config", cfg, a.quant, a.group_size));
  } else {
    std::vector<const Preset*> chosen;
    if (!a.preset.empty()) {
      chosen.push_back(&find_preset(a.preset));
    } else {
      for (const auto& p : presets()) chosen.push_back(&p);
    }
    const bool table = a.preset.empty() && !a.dkv;
    for (const Preset* p : chosen) {
      const std::vector<std::uint32_t> settings = a.dkv ? std::vector<std::uint32_t>{*a.dkv} : p->d_kv_settings;
      for (std::uint32_t dkv : settings) {
        ModelConfig cfg = p->config(dkv);
        if (a.r) cfg.conversion->r = *a.r;
        reports.push_back(make_cache_report(p->name, cfg, a.quant, a.group_size));
        // The full table also lists the 4-bit compounded rows.
        if (table && a.quant == 16) reports.push_back(make_cache_report(p->name, cfg, 4, a.group_size));
      }
    }
  }
  if (a.json_out) {
    json j = json::array();
    for (const auto& r : reports) j.push_back(r.to_json());
    std::cout << j.dump(2) << '\n';
    return 0;
  }
  print_report_header();
  for (const auto& r : reports) print_report(r);
  return 0;
}

// run

struct RunArgs {
  std::string ckpt;
  std::string prompt_ids;
  std::uint32_t steps = 8;
  std::string variant;
  std::string cache;
  std::string stats;
  std::string strategy = "high";
  std::optional<std::uint32_t> r;
  std::uint32_t group_size = 32;
  bool json_out = false;
};

int run_run(const RunArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const bool converted = ck.config.is_converted();
  const ForwardPath path = a.variant.empty() ? (converted ? ForwardPath::mla_absorbed : ForwardPath::full)
                                             : parse_forward_path(a.variant);

  std::optional<RopeSelection> selection;
  if (path == ForwardPath::partial) {
    const std::uint32_t r = a.r.value_or(std::max<std::uint32_t>(1, ck.config.d_h / 16));
    const Strategy strategy = parse_strategy(a.strategy);
    if (strategy == Strategy::two_norm) {
      if (a.stats.empty()) throw Error(ErrorCode::usage, "--stats is required for strategy two_norm");
      const NormStats stats = load_stats(a.stats, &ck.config);
      selection = select_two_norm(stats, r);
    } else {
      selection = RopeSelection::for_strategy(strategy, r, ck.config);
    }
  }
  const AttentionWeights weights = AttentionWeights::from_store(ck.config, ck.store, selection);

  CacheKind kind = converted ? CacheKind::latent : CacheKind::full;
  QuantSpec quant;
  quant.group_size = a.group_size;
  if (a.cache == "full") {
    kind = CacheKind::full;
  } else if (a.cache == "latent") {
    kind = CacheKind::latent;
  } else if (a.cache == "quant4" || a.cache == "quant2") {
    kind = CacheKind::quantized;
    quant.bits = a.cache == "quant4" ? 4 : 2;
  } else if (!a.cache.empty()) {
    throw Error(ErrorCode::usage, "unknown cache '" + a.cache + "' (expected full, latent, quant4, quant2)");
  }

  const std::vector<std::uint32_t> prompt = parse_ids(a.prompt_ids);
  if (prompt.empty()) throw Error(ErrorCode::usage, "--prompt-ids needs at least one id");
  KvCache cache = make_cache(weights, kind, quant);

  std::vector<std::uint32_t> tokens = prompt;
  std::vector<std::string> step_digests;
  Fnv1a total;
  if (a.steps > 0) {
    ForwardResult pre = forward(weights, path, prompt, cache);
    std::vector<float> logits(pre.logits.row(prompt.size() - 1).begin(), pre.logits.row(prompt.size() - 1).end());
    for (std::uint32_t s = 0; s < a.steps; ++s) {
      for (float v : logits)
        if (!std::isfinite(v)) throw Error(ErrorCode::non_convergence, "non-finite logit at step " + std::to_string(s));
      Fnv1a step;
      step.update(std::as_bytes(std::span<const float>(logits)));
      total.update(std::as_bytes(std::span<const float>(logits)));
      step_digests.push_back(step.hex());
      const auto next = static_cast<std::uint32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
      tokens.push_back(next);
      if (s + 1 < a.steps) logits = decode_step(weights, path, cache, next);
    }
  }

  if (a.json_out) {
    json j = {{"variant", to_string(path)},
              {"tokens", tokens},
              {"step_digests", step_digests},
              {"logit_digest", total.hex()}};
    std::cout << j.dump(2) << '\n';
    return 0;
  }
  std::cout << "tokens:";
  for (std::size_t i = 0; i < tokens.size(); ++i) std::cout << (i ? "," : " ") << tokens[i];
  std::cout << '\n';
  for (std::size_t s = 0; s < step_digests.size(); ++s) std::cout << "step " << s << " " << step_digests[s] << '\n';
  std::cout << "logit_digest: " << total.hex() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MHA/GQA to MLA checkpoint conversion toolkit"};
  app.require_subcommand(1);

  InitToyArgs init;
  auto* c_init = app.add_subcommand("init-toy", "write a deterministic toy checkpoint");
  c_init->add_option("--config", init.config, "model config JSON");
  c_init->add_option("--seed", init.seed, "init seed");
  c_init->add_option("--out", init.out, "checkpoint path")->required();
  c_init->add_option("--corpus-out", init.corpus_out, "also write a synthetic calibration corpus");
  c_init->add_option("--corpus-seqs", init.corpus_seqs, "corpus sequence count");
  c_init->add_option("--corpus-len", init.corpus_len, "corpus sequence length");

  StatsArgs stats;
  auto* c_stats = app.add_subcommand("stats", "2-norm calibration statistics");
  c_stats->add_option("--ckpt", stats.ckpt, "source checkpoint")->required();
  c_stats->add_option("--corpus", stats.corpus, "token corpus")->required();
  c_stats->add_option("--out", stats.out, "stats JSON path")->required();
  c_stats->add_option("--max-samples", stats.max_samples, "sequence cap (0 = all)");

  ConvertArgs conv;
  auto* c_conv = app.add_subcommand("convert", "convert to latent attention");
  c_conv->add_option("--ckpt", conv.ckpt, "source checkpoint")->required();
  c_conv->add_option("--stats", conv.stats, "stats JSON (two_norm)");
  c_conv->add_option("--strategy", conv.strategy, "high, low, uniform or two_norm");
  c_conv->add_option("--r", conv.r, "retained subspaces (default d_h/16, at least 1)");
  c_conv->add_option("--dkv", conv.dkv, "latent dims per kv head (default d_h/2)");
  c_conv->add_option("--svd", conv.svd, "joint or split");
  c_conv->add_flag("--per-head", conv.per_head, "factorize each kv head separately");
  c_conv->add_flag("--global-selection", conv.global_selection, "one two_norm set for all layers and groups");
  c_conv->add_option("--out", conv.out, "converted checkpoint path")->required();
  c_conv->add_flag("--json", conv.json_out, "JSON output");

  VerifyArgs ver;
  auto* c_ver = app.add_subcommand("verify", "check source/converted equivalence");
  c_ver->add_option("--src", ver.src, "source checkpoint")->required();
  c_ver->add_option("--converted", ver.converted, "converted checkpoint")->required();
  c_ver->add_option("--tokens", ver.tokens, "comma-separated ids or corpus file");
  c_ver->add_option("--corpus", ver.corpus, "corpus to compare against the calibration digest");
  c_ver->add_option("--seed", ver.seed, "seed for random sequences");
  c_ver->add_option("--sequences", ver.sequences, "random sequence count");
  c_ver->add_option("--len", ver.len, "random sequence length");
  c_ver->add_flag("--json", ver.json_out, "JSON output");

  BenchArgs bench;
  auto* c_bench = app.add_subcommand("bench", "KV-cache memory accounting");
  c_bench->add_option("--preset", bench.preset, "135M, 360M, 1B7, 7B or 13B");
  c_bench->add_option("--config", bench.config, "model config JSON with a conversion block")->excludes("--preset");
  c_bench->add_option("--dkv", bench.dkv, "latent dims per kv head");
  c_bench->add_option("--r", bench.r, "retained subspaces");
  c_bench->add_option("--quant", bench.quant, "cache bits (16 = unquantized)");
  c_bench->add_option("--group-size", bench.group_size, "quantizer group size");
  c_bench->add_flag("--json", bench.json_out, "JSON output");

  RunArgs run;
  auto* c_run = app.add_subcommand("run", "greedy decode");
  c_run->add_option("--ckpt", run.ckpt, "checkpoint")->required();
  c_run->add_option("--prompt-ids", run.prompt_ids, "comma-separated prompt ids")->required();
  c_run->add_option("--steps", run.steps, "tokens to generate");
  c_run->add_option("--variant", run.variant, "full, partial, mla or mla-absorbed");
  c_run->add_option("--cache", run.cache, "full, latent, quant4 or quant2");
  c_run->add_option("--strategy", run.strategy, "selection for the partial variant");
  c_run->add_option("--r", run.r, "retained subspaces for the partial variant");
  c_run->add_option("--stats", run.stats, "stats JSON for a two_norm partial selection");
  c_run->add_option("--group-size", run.group_size, "quantizer group size");
  c_run->add_flag("--json", run.json_out, "JSON output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*c_init) return run_init_toy(init);
    if (*c_stats) return run_stats(stats);
    if (*c_conv) return run_convert(conv);
    if (*c_ver) return run_verify(ver);
    if (*c_bench) return run_bench(bench);
    if (*c_run) return run_run(run);
  } catch (const Error& e) {
    std::fprintf(stderr, "error[%s]: %s\n", to_string(e.code()), e.what());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 2;
}
